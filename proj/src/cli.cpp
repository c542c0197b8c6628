#include "oat/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "oat/checkpoint.hpp"
#include "oat/errors.hpp"
#include "oat/eval.hpp"
#include "oat/gradsuite.hpp"
#include "oat/training.hpp"
#include "oat/world.hpp"

namespace oat {

namespace {

namespace fs = std::filesystem;

// Everything a run needs, one flat key=value namespace: the sprite world,
// the dataset/eval sizes, the ablation schedule, and the training
// hyperparameters. The echo written to every output directory parses back
// to the identical configuration.
struct PipelineConfig {
  WorldConfig world;
  TrainConfig train;
  int episodes = 200;           // gen-data episode count
  int t_eval = 15;              // eval/rollout unroll window
  int eval_episodes = 64;       // episodes scored by eval/ablate (0 = all)
  int codec_pretrain_steps = 3000;
  int codec_batch = 8;
  double codec_lr = 1e-3;
  std::vector<uint64_t> seeds = {1, 2, 3};  // ablation seeds
};

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

int parse_int(const std::string& key, const std::string& v) {
  size_t used = 0;
  int out = 0;
  try {
    out = std::stoi(v, &used);
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "' needs an integer, got '" + v +
                     "'");
  }
  if (used != v.size())
    throw UsageError("config key '" + key + "' needs an integer, got '" + v +
                     "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "' needs a number, got '" + v +
                     "'");
  }
  if (used != v.size())
    throw UsageError("config key '" + key + "' needs a number, got '" + v +
                     "'");
  return out;
}

std::vector<uint64_t> parse_seed_list(const std::string& key,
                                      const std::string& v) {
  std::vector<uint64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    size_t used = 0;
    unsigned long long x = 0;
    try {
      x = std::stoull(item, &used);
    } catch (const std::exception&) {
      throw UsageError("config key '" + key + "' needs comma-separated "
                       "seeds, got '" + v + "'");
    }
    if (used != item.size())
      throw UsageError("config key '" + key + "' needs comma-separated "
                       "seeds, got '" + v + "'");
    out.push_back(x);
  }
  if (out.empty())
    throw UsageError("config key '" + key + "' needs at least one seed");
  return out;
}

// Keys are matched case-insensitively; values keep their case.
void apply_pipeline_entry(PipelineConfig& pc, const std::string& raw_key,
                          const std::string& value) {
  std::string key = raw_key;
  std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  WorldConfig& w = pc.world;
  if (key == "arena_w") w.arena_w = parse_int(key, value);
  else if (key == "arena_h") w.arena_h = parse_int(key, value);
  else if (key == "window_w") w.window_w = parse_int(key, value);
  else if (key == "window_h") w.window_h = parse_int(key, value);
  else if (key == "n_obj") w.n_obj = parse_int(key, value);
  else if (key == "pan_step") w.pan_step = parse_int(key, value);
  else if (key == "episode_len") w.episode_len = parse_int(key, value);
  else if (key == "speed_min") w.speed_min = parse_double(key, value);
  else if (key == "speed_max") w.speed_max = parse_double(key, value);
  else if (key == "sprite_min") w.sprite_min = parse_int(key, value);
  else if (key == "sprite_max") w.sprite_max = parse_int(key, value);
  else if (key == "episodes") pc.episodes = parse_int(key, value);
  else if (key == "t_eval") pc.t_eval = parse_int(key, value);
  else if (key == "eval_episodes") pc.eval_episodes = parse_int(key, value);
  else if (key == "codec_pretrain_steps")
    pc.codec_pretrain_steps = parse_int(key, value);
  else if (key == "codec_batch") pc.codec_batch = parse_int(key, value);
  else if (key == "codec_lr") pc.codec_lr = parse_double(key, value);
  else if (key == "seeds") pc.seeds = parse_seed_list(key, value);
  else apply_config_entry(pc.train, key, value);  // throws UsageError on junk
}

std::string format_pipeline_config(const PipelineConfig& pc) {
  char buf[128];
  std::string s;
  auto kv_i = [&](const char* k, long long v) {
    std::snprintf(buf, sizeof buf, "%s=%lld\n", k, v);
    s += buf;
  };
  auto kv_d = [&](const char* k, double v) {
    std::snprintf(buf, sizeof buf, "%s=%.17g\n", k, v);
    s += buf;
  };
  const WorldConfig& w = pc.world;
  kv_i("arena_w", w.arena_w);
  kv_i("arena_h", w.arena_h);
  kv_i("window_w", w.window_w);
  kv_i("window_h", w.window_h);
  kv_i("n_obj", w.n_obj);
  kv_i("pan_step", w.pan_step);
  kv_i("episode_len", w.episode_len);
  kv_d("speed_min", w.speed_min);
  kv_d("speed_max", w.speed_max);
  kv_i("sprite_min", w.sprite_min);
  kv_i("sprite_max", w.sprite_max);
  kv_i("episodes", pc.episodes);
  kv_i("t_eval", pc.t_eval);
  kv_i("eval_episodes", pc.eval_episodes);
  kv_i("codec_pretrain_steps", pc.codec_pretrain_steps);
  kv_i("codec_batch", pc.codec_batch);
  kv_d("codec_lr", pc.codec_lr);
  s += "seeds=";
  for (size_t i = 0; i < pc.seeds.size(); ++i) {
    if (i) s += ',';
    std::snprintf(buf, sizeof buf, "%" PRIu64, pc.seeds[i]);
    s += buf;
  }
  s += '\n';
  s += format_train_config(pc.train);
  return s;
}

void apply_config_text(PipelineConfig& pc, const std::string& text,
                       const std::string& origin) {
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(origin + " line " + std::to_string(lineno) +
                       ": expected key=value, got '" + line + "'");
    apply_pipeline_entry(pc, trim(line.substr(0, eq)),
                         trim(line.substr(eq + 1)));
  }
}

void load_config_file(PipelineConfig& pc, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  apply_config_text(pc, ss.str(), path);
}

void apply_overrides(PipelineConfig& pc,
                     const std::vector<std::string>& sets) {
  for (const std::string& kv : sets) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw UsageError("--set needs key=value, got '" + kv + "'");
    apply_pipeline_entry(pc, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << text;
  f.flush();
  if (!f) throw DataError("cannot write " + path);
}

void prepare_out_dir(const std::string& out, const PipelineConfig& pc) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw DataError("cannot create " + out + ": " + ec.message());
  write_text(out + "/config.txt", format_pipeline_config(pc));
}

// Model hyperparameters travel inside the checkpoint, so evaluation and
// rendering reconstruct the model the artifact was trained with instead of
// trusting the caller to repeat them.
struct LoadedModel {
  Model model;
  TrainConfig cfg;
};

void load_model(LoadedModel& lm, const std::string& ckpt_path,
                const TrainConfig& fallback, int window_w, int window_h) {
  if (!fs::exists(ckpt_path))
    throw DataError("checkpoint not found: " + ckpt_path);
  const auto entries = read_checkpoint(ckpt_path);
  const std::string text = checkpoint_config_text(entries);
  lm.cfg = text.empty() ? fallback : parse_train_config(text);
  build_model(lm.model, lm.cfg, window_w, window_h);
  restore_params(lm.model.ps, entries);
}

int cmd_gen_data(const PipelineConfig& pc, const std::string& out,
                 std::ostream& os) {
  pc.world.validate();
  prepare_out_dir(out, pc);
  std::vector<Trajectory> trs;
  trs.reserve(pc.episodes);
  const Rng root(pc.train.seed);
  for (int i = 0; i < pc.episodes; ++i)
    trs.push_back(generate_trajectory(
        pc.world, root.stream("gen-data", static_cast<uint64_t>(i)).u64()));
  const std::string path = out + "/dataset.bin";
  save_dataset(trs, path);
  os << "wrote " << trs.size() << " episodes to " << path << "\n";
  return 0;
}

int cmd_train(const PipelineConfig& pc, const std::string& data,
              const std::string& out, bool resume, std::ostream& os) {
  const std::vector<Trajectory> eps = load_dataset(data);
  prepare_out_dir(out, pc);
  const TrainOutcome to = train(pc.train, eps, out, resume);
  os << "trained " << to.steps_done << " steps\n"
     << "checkpoint: " << to.checkpoint_path << "\n"
     << "metrics: " << to.metrics_path << "\n";
  return 0;
}

int cmd_ablate(const PipelineConfig& pc, const std::string& data,
               const std::string& eval_data, const std::string& out,
               std::ostream& os) {
  const std::vector<Trajectory> train_eps = load_dataset(data);
  const std::vector<Trajectory> eval_eps = load_dataset(eval_data);
  prepare_out_dir(out, pc);
  AblationConfig acfg;
  acfg.base = pc.train;
  acfg.codec_pretrain_steps = pc.codec_pretrain_steps;
  acfg.codec_batch = pc.codec_batch;
  acfg.codec_lr = pc.codec_lr;
  acfg.seeds = pc.seeds;
  acfg.eval_episodes = pc.eval_episodes;
  const AblationReport rep = run_ablation_grid(acfg, train_eps, eval_eps, out);
  os << "grid: " << rep.grid_csv_path << "\n"
     << "table: " << rep.table_csv_path << "\n";
  for (const AblationCell& cell : rep.cells) {
    os << input_mode_name(cell.input) << "+" << loss_mode_name(cell.loss)
       << " median error " << cell.median_error
       << (cell.lower_bound ? " (lower bound)" : "") << "\n";
  }
  return 0;
}

int cmd_eval(const PipelineConfig& pc, const std::string& data,
             const std::string& ckpt, const std::string& out,
             std::ostream& os) {
  std::vector<Trajectory> eps = load_dataset(data);
  if (pc.eval_episodes > 0 &&
      static_cast<int>(eps.size()) > pc.eval_episodes)
    eps.resize(pc.eval_episodes);
  if (eps.empty()) throw DataError("dataset is empty: " + data);
  LoadedModel lm;
  load_model(lm, ckpt, pc.train, eps[0].w, eps[0].h);
  PipelineConfig effective = pc;
  effective.train = lm.cfg;
  prepare_out_dir(out, effective);
  const MetricsReport rep = evaluate_model(lm.model, eps, lm.cfg, pc.t_eval);
  write_report(rep, out + "/report.json", out + "/report.csv");
  os << "scored " << eps.size() << " episodes over " << pc.t_eval
     << " unroll steps\n";
  for (const auto& [name, v] : rep.summary) {
    if (std::isnan(v))
      os << name << " = missing\n";
    else
      os << name << " = " << v << "\n";
  }
  return 0;
}

int cmd_rollout(const PipelineConfig& pc, const std::string& data,
                const std::string& ckpt, const std::string& out, int episode,
                std::ostream& os) {
  const std::vector<Trajectory> eps = load_dataset(data);
  if (episode < 0 || episode >= static_cast<int>(eps.size()))
    throw DataError("episode " + std::to_string(episode) +
                    " out of range, dataset has " +
                    std::to_string(eps.size()));
  LoadedModel lm;
  load_model(lm, ckpt, pc.train, eps[episode].w, eps[episode].h);
  PipelineConfig effective = pc;
  effective.train = lm.cfg;
  prepare_out_dir(out, effective);
  const uint64_t scramble =
      Rng(lm.cfg.seed).stream("rollout", static_cast<uint64_t>(episode)).u64();
  const int files = render_rollout_images(lm.model, eps[episode], lm.cfg,
                                          pc.t_eval, scramble, out);
  os << "wrote " << files << " images to " << out << "\n";
  return 0;
}

int cmd_gradcheck(int points, uint64_t seed, std::ostream& os) {
  const auto rows = gradcheck_suite(points, seed);
  bool all_pass = true;
  os << "module               max_rel      probes  moved  status\n";
  for (const GradSuiteRow& row : rows) {
    char line[128];
    std::snprintf(line, sizeof line, "%-20s %-12.3g %-7d %-6d %s\n",
                  row.module.c_str(), row.worst.max_rel, row.checked,
                  row.skipped, row.pass ? "pass" : "FAIL");
    os << line;
    all_pass = all_pass && row.pass;
  }
  if (!all_pass) {
    os << "gradient check failed\n";
    return 4;
  }
  os << "all modules pass\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"Slot-based world model over moving sprites: data "
               "generation, training, ablation, evaluation, rendering, and "
               "gradient self-checks."};
  app.require_subcommand(1);

  struct Common {
    std::string config, data, eval_data, checkpoint, out;
    std::vector<std::string> sets;
    uint64_t seed = 0;
    bool seed_given = false;
  };

  std::vector<std::unique_ptr<Common>> commons;  // outlives the callbacks
  auto add_common = [&](CLI::App* sub, bool needs_out) {
    commons.push_back(std::make_unique<Common>());
    Common* c = commons.back().get();
    sub->add_option("--config", c->config,
                    "key=value config file; later --set entries win");
    sub->add_option("--set", c->sets,
                    "override one config key, e.g. --set t_unroll=15")
        ->take_all();
    sub->add_option_function<uint64_t>(
           "--seed",
           [c](const uint64_t& s) {
             c->seed = s;
             c->seed_given = true;
           },
           "training / generation seed (beats config and --set)");
    auto* o = sub->add_option("--out", c->out, "output directory");
    if (needs_out) o->required();
    return c;
  };

  auto effective_config = [](const Common& c) {
    PipelineConfig pc;
    if (!c.config.empty()) load_config_file(pc, c.config);
    apply_overrides(pc, c.sets);
    if (c.seed_given) pc.train.seed = c.seed;
    return pc;
  };

  int rc = 0;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a sprite dataset");
  Common* gc = add_common(gen, true);
  gen->callback([&, gc] {
    rc = cmd_gen_data(effective_config(*gc), gc->out, out);
  });

  CLI::App* tr = app.add_subcommand("train", "train on a dataset");
  Common* tc = add_common(tr, true);
  tr->add_option("--data", tc->data, "dataset file from gen-data")->required();
  bool resume = false;
  tr->add_flag("--resume", resume, "continue from the checkpoint in --out");
  tr->callback([&, tc] {
    rc = cmd_train(effective_config(*tc), tc->data, tc->out, resume, out);
  });

  CLI::App* ab = app.add_subcommand(
      "ablate", "train and score the four input/loss conditions");
  Common* ac = add_common(ab, true);
  ab->add_option("--data", ac->data, "training dataset")->required();
  ab->add_option("--eval-data", ac->eval_data, "held-out dataset")->required();
  ab->callback([&, ac] {
    rc = cmd_ablate(effective_config(*ac), ac->data, ac->eval_data, ac->out,
                    out);
  });

  CLI::App* ev = app.add_subcommand("eval", "score a checkpoint");
  Common* ec = add_common(ev, true);
  ev->add_option("--data", ec->data, "evaluation dataset")->required();
  ev->add_option("--checkpoint", ec->checkpoint, "trained model")->required();
  ev->callback([&, ec] {
    rc = cmd_eval(effective_config(*ec), ec->data, ec->checkpoint, ec->out,
                  out);
  });

  CLI::App* ro = app.add_subcommand("rollout", "render one episode's unroll");
  Common* oc = add_common(ro, true);
  ro->add_option("--data", oc->data, "evaluation dataset")->required();
  ro->add_option("--checkpoint", oc->checkpoint, "trained model")->required();
  int episode = 0;
  ro->add_option("--episode", episode, "episode index (default 0)");
  ro->callback([&, oc] {
    rc = cmd_rollout(effective_config(*oc), oc->data, oc->checkpoint, oc->out,
                     episode, out);
  });

  CLI::App* gr = app.add_subcommand(
      "gradcheck", "finite-difference check of every differentiable module");
  int points = 5;
  uint64_t gr_seed = 0;
  gr->add_option("--points", points, "random parameter points per module");
  gr->add_option("--seed", gr_seed, "probe seed");
  gr->callback([&] { rc = cmd_gradcheck(points, gr_seed, out); });

  // CLI11's missing-subcommand error hides which word failed to match, so
  // name the offender ourselves.
  if (!args.empty() && args[0].rfind("-", 0) != 0 &&
      app.get_subcommand_no_throw(args[0]) == nullptr) {
    err << "usage error: unknown subcommand '" << args[0] << "'\n";
    return 2;
  }

  // CLI11 wants argv order; keep ownership of the strings while parsing.
  std::vector<const char*> argv;
  argv.push_back("oat");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return 4;
  }
  return rc;
}

}  // namespace oat
