#include "oat/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <unordered_map>

#include "oat/checkpoint.hpp"
#include "oat/errors.hpp"
#include "oat/parallel.hpp"

namespace fs = std::filesystem;

namespace oat {

const char* loss_mode_name(LossMode m) {
  return m == LossMode::kObjectLevel ? "object-level" : "pixel-level";
}

const char* input_mode_name(InputMode m) {
  return m == InputMode::kAligned ? "aligned" : "unaligned-shuffled";
}

LossMode loss_mode_from_name(const std::string& s) {
  if (s == "object-level") return LossMode::kObjectLevel;
  if (s == "pixel-level") return LossMode::kPixelLevel;
  throw UsageError("unknown loss mode '" + s + "'");
}

InputMode input_mode_from_name(const std::string& s) {
  if (s == "aligned") return InputMode::kAligned;
  if (s == "unaligned-shuffled") return InputMode::kUnalignedShuffled;
  throw UsageError("unknown input mode '" + s + "'");
}

void TrainConfig::validate() const {
  if (zeta < 0) throw std::invalid_argument("zeta must be >= 0");
  if (psi < 0) throw std::invalid_argument("psi must be >= 0");
  if (lr <= 0) throw std::invalid_argument("lr must be > 0");
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (t_enc < 1) throw std::invalid_argument("t_enc must be >= 1");
  if (t_unroll < 0) throw std::invalid_argument("t_unroll must be >= 0");
  if (k_slots < 1) throw std::invalid_argument("k_slots must be >= 1");
  if (memory_slots < k_slots)
    throw std::invalid_argument("memory_slots must be >= k_slots");
  if (feat < 1) throw std::invalid_argument("feat must be >= 1");
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty())
    throw UsageError("config value for '" + key + "' is not a number: '" + v +
                     "'");
  return x;
}

int64_t parse_int(const std::string& key, const std::string& v) {
  size_t pos = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty())
    throw UsageError("config value for '" + key + "' is not an integer: '" + v +
                     "'");
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw UsageError("config value for '" + key + "' is not a boolean: '" + v +
                   "'");
}

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

void apply_config_entry(TrainConfig& cfg, const std::string& key,
                        const std::string& value) {
  if (key == "zeta") cfg.zeta = parse_double(key, value);
  else if (key == "psi") cfg.psi = parse_double(key, value);
  else if (key == "lr") cfg.lr = parse_double(key, value);
  else if (key == "batch") cfg.batch = static_cast<int>(parse_int(key, value));
  else if (key == "steps") cfg.steps = parse_int(key, value);
  else if (key == "t_enc") cfg.t_enc = static_cast<int>(parse_int(key, value));
  else if (key == "t_unroll") cfg.t_unroll = static_cast<int>(parse_int(key, value));
  else if (key == "seed") cfg.seed = static_cast<uint64_t>(parse_int(key, value));
  else if (key == "loss_mode") cfg.loss_mode = loss_mode_from_name(value);
  else if (key == "input_mode") cfg.input_mode = input_mode_from_name(value);
  else if (key == "core") cfg.core = core_variant_from_name(value);
  else if (key == "memory_input") cfg.memory_input = parse_bool(key, value);
  else if (key == "k_slots") cfg.k_slots = static_cast<int>(parse_int(key, value));
  else if (key == "memory_slots") cfg.memory_slots = static_cast<int>(parse_int(key, value));
  else if (key == "feat") cfg.feat = static_cast<int>(parse_int(key, value));
  else throw UsageError("unknown config key '" + key + "'");
}

TrainConfig parse_train_config(const std::string& text) {
  TrainConfig cfg;
  size_t start = 0;
  while (start <= text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    start = end + 1;
    if (size_t hash = line.find('#'); hash != std::string::npos)
      line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("malformed config line (expected key=value): '" + line +
                       "'");
    apply_config_entry(cfg, trim(line.substr(0, eq)),
                       trim(line.substr(eq + 1)));
  }
  return cfg;
}

std::string format_train_config(const TrainConfig& cfg) {
  std::string s;
  s += "zeta=" + fmt_double(cfg.zeta) + "\n";
  s += "psi=" + fmt_double(cfg.psi) + "\n";
  s += "lr=" + fmt_double(cfg.lr) + "\n";
  s += "batch=" + std::to_string(cfg.batch) + "\n";
  s += "steps=" + std::to_string(cfg.steps) + "\n";
  s += "t_enc=" + std::to_string(cfg.t_enc) + "\n";
  s += "t_unroll=" + std::to_string(cfg.t_unroll) + "\n";
  s += "seed=" + std::to_string(cfg.seed) + "\n";
  s += std::string("loss_mode=") + loss_mode_name(cfg.loss_mode) + "\n";
  s += std::string("input_mode=") + input_mode_name(cfg.input_mode) + "\n";
  s += std::string("core=") + core_variant_name(cfg.core) + "\n";
  s += std::string("memory_input=") + (cfg.memory_input ? "true" : "false") + "\n";
  s += "k_slots=" + std::to_string(cfg.k_slots) + "\n";
  s += "memory_slots=" + std::to_string(cfg.memory_slots) + "\n";
  s += "feat=" + std::to_string(cfg.feat) + "\n";
  return s;
}

void build_model(Model& out, const TrainConfig& cfg, int window_w,
                 int window_h) {
  cfg.validate();
  CodecConfig cc;
  cc.window_w = window_w;
  cc.window_h = window_h;
  cc.k_slots = cfg.k_slots;
  cc.feat = cfg.feat;
  AlignConfig ac;
  ac.memory_slots = cfg.memory_slots;
  ac.feat = cfg.feat;
  ac.psi = cfg.psi;
  CoreConfig kc;
  kc.variant = cfg.core;
  kc.feat = cfg.feat;
  kc.memory_input = cfg.memory_input;
  Rng init = Rng(cfg.seed).stream("init");
  out.codec = std::make_unique<SlotCodec>(out.ps, cc, init);
  out.align = std::make_unique<AlignNet>(out.ps, ac, init);
  out.core = std::make_unique<TransitionCore>(out.ps, kc, init);
}

Tensor hungarian_min_assignment_loss(const Tensor& z_d,
                                     const Tensor& z_targets) {
  const int m = z_d.rows(), k = z_targets.rows(), f = z_d.cols();
  if (z_targets.cols() != f)
    throw std::invalid_argument("assignment loss: feature width mismatch");
  if (k > m)
    throw std::invalid_argument("assignment loss: more targets than rows");
  // The match is decided on current values and treated as a constant of the
  // loss; gradients flow through the matched pairs only.
  std::vector<double> score(static_cast<size_t>(m) * k);
  const auto& a = z_d.values();
  const auto& b = z_targets.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) {
      double d2 = 0;
      for (int c = 0; c < f; ++c) {
        const double d = a[static_cast<size_t>(i) * f + c] -
                         b[static_cast<size_t>(j) * f + c];
        d2 += d * d;
      }
      score[static_cast<size_t>(i) * k + j] = -d2;
    }
  Assignment asg = hungarian_assign(score, m, k, std::vector<uint8_t>(k, 0));
  std::vector<int> rows, cols;
  for (int i = 0; i < m; ++i)
    if (asg.memory_to_obs[i] >= 0) {
      rows.push_back(i);
      cols.push_back(asg.memory_to_obs[i]);
    }
  Tensor diff = sub(gather_rows(z_d, rows), gather_rows(z_targets, cols));
  return sum(mul(diff, diff));
}

Tensor pixel_level_loss(Tape& t, const SlotCodec& codec,
                        const std::vector<Tensor>& z_d, const Trajectory& tr,
                        int first_step) {
  if (z_d.empty())
    throw std::invalid_argument("pixel loss needs at least one prediction");
  const int p = tr.w * tr.h;
  if (first_step < 0 || first_step + static_cast<int>(z_d.size()) > tr.t)
    throw DataError("pixel loss: predictions run past the episode end");
  Tensor acc;
  for (size_t i = 0; i < z_d.size(); ++i) {
    SlotDecode dec = codec.decode(t, z_d[i]);
    Tensor comp = codec.compose(dec);
    Tensor frame =
        t.constant(p, 3, tr.frame(first_step + static_cast<int>(i)));
    Tensor diff = sub(comp, frame);
    Tensor term = scale(sum(mul(diff, diff)), 1.0 / (3.0 * p));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

LossBreakdown episode_loss(Tape& t, const Model& model,
                           const EpisodeSource& src, const TrainConfig& cfg,
                           uint64_t shuffle_seed, bool codec_term,
                           RolloutResult* roll_out) {
  RolloutConfig rc;
  rc.t_enc = cfg.t_enc;
  rc.t_unroll = cfg.t_unroll;
  rc.memory_slots = cfg.memory_slots;
  rc.aligned = cfg.input_mode == InputMode::kAligned;
  rc.shuffle_seed = shuffle_seed;
  const AlignNet* an = rc.aligned ? model.align.get() : nullptr;
  RolloutResult r = rollout(t, src, an, *model.core, rc);
  const int L = cfg.t_enc + cfg.t_unroll;
  const Trajectory& tr = *src.traj;

  LossBreakdown out;

  if (codec_term) {
    Tensor acc;
    for (int step = 0; step < cfg.t_enc; ++step) {
      SlotDecode dec = model.codec->decode(t, r.z_canon[step]);
      Tensor term = model.codec->mixture_loss(t, dec, tr.frame(step));
      acc = acc.defined() ? add(acc, term) : term;
    }
    out.codec_term = acc;
  } else {
    out.codec_term = t.zeros(1, 1);
  }

  const std::vector<Tensor> zd(r.z_d.begin() + 1, r.z_d.begin() + L + 1);
  if (rc.aligned) {
    const std::vector<Tensor> zs(r.z_soft.begin() + 1, r.z_soft.begin() + L + 1);
    const std::vector<Tensor> aseq(r.adj.begin() + 1, r.adj.begin() + L + 1);
    out.align_term = alignnet_loss(zd, zs, aseq, cfg.psi);
  } else {
    out.align_term = t.zeros(1, 1);
  }

  if (cfg.loss_mode == LossMode::kPixelLevel) {
    out.transition_term = pixel_level_loss(t, *model.codec, zd, tr, 1);
  } else if (rc.aligned) {
    const std::vector<Tensor> zh(r.z_hard.begin() + 1, r.z_hard.begin() + L + 1);
    out.transition_term = transition_loss(zd, zh);
  } else {
    Tensor acc;
    for (int step = 1; step <= L; ++step) {
      Tensor term = hungarian_min_assignment_loss(r.z_d[step], r.z_obs[step]);
      acc = acc.defined() ? add(acc, term) : term;
    }
    out.transition_term = acc;
  }

  out.total = add(add(out.codec_term, out.align_term),
                  scale(out.transition_term, cfg.zeta));
  out.codec = out.codec_term.scalar();
  out.align = out.align_term.scalar();
  out.transition = out.transition_term.scalar();
  out.total_value = out.total.scalar();
  if (roll_out) *roll_out = std::move(r);
  return out;
}

LossBreakdown total_loss(Tape& t, const Model& model,
                         const std::vector<EpisodeSource>& batch,
                         const TrainConfig& cfg, uint64_t step_index,
                         bool codec_term) {
  if (batch.empty()) throw std::invalid_argument("total_loss: empty batch");
  const Rng root(cfg.seed);
  Tensor c_acc, a_acc, t_acc;
  for (size_t b = 0; b < batch.size(); ++b) {
    const uint64_t ss =
        root.stream("scramble", step_index * batch.size() + b).u64();
    LossBreakdown lb = episode_loss(t, model, batch[b], cfg, ss, codec_term);
    c_acc = c_acc.defined() ? add(c_acc, lb.codec_term) : lb.codec_term;
    a_acc = a_acc.defined() ? add(a_acc, lb.align_term) : lb.align_term;
    t_acc = t_acc.defined() ? add(t_acc, lb.transition_term) : lb.transition_term;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  LossBreakdown out;
  out.codec_term = scale(c_acc, inv);
  out.align_term = scale(a_acc, inv);
  out.transition_term = scale(t_acc, inv);
  out.total = add(add(out.codec_term, out.align_term),
                  scale(out.transition_term, cfg.zeta));
  out.codec = out.codec_term.scalar();
  out.align = out.align_term.scalar();
  out.transition = out.transition_term.scalar();
  out.total_value = out.total.scalar();
  return out;
}

namespace {

void append_metric(std::ofstream& f, std::vector<MetricRow>& hist, int64_t step,
                   const char* term, double value) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%lld,%s,%.17g\n",
                static_cast<long long>(step), term, value);
  f << buf;
  hist.push_back({step, term, value});
}

void check_finite_grads(const ParamStore& ps,
                        const std::unordered_map<int, std::vector<double>>& g,
                        int64_t step) {
  for (const auto& [id, vec] : g)
    for (double v : vec)
      if (!std::isfinite(v))
        throw NumericError("non-finite gradient in " + ps.name(id) +
                           " at step " + std::to_string(step));
}

struct LoopSpec {
  const TrainConfig* cfg = nullptr;
  Model* model = nullptr;
  int n_episodes = 0;
  std::function<EpisodeSource(int)> source;
  bool codec_term = true;
  std::vector<std::string> frozen_prefixes;
  std::string out_dir;
  bool resume = false;
  int64_t snapshot_every = 500;
};

// One optimization loop: batch items run on independent tapes (possibly in
// parallel), gradients reduce in item order, so results are identical at any
// thread count.
TrainOutcome run_loop(const LoopSpec& spec) {
  const TrainConfig& cfg = *spec.cfg;
  Model& model = *spec.model;
  fs::create_directories(spec.out_dir);
  TrainOutcome out;
  out.checkpoint_path = spec.out_dir + "/checkpoint.oatw";
  out.metrics_path = spec.out_dir + "/metrics.csv";

  Adam opt(model.ps, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, 5.0});
  int64_t start = 0;
  if (spec.resume && fs::exists(out.checkpoint_path)) {
    TrainingState st =
        load_training_state(out.checkpoint_path, model.ps, &opt);
    start = st.step;
    if (start > cfg.steps)
      throw DataError("checkpoint is at step " + std::to_string(start) +
                      ", past the configured " + std::to_string(cfg.steps));
  }
  std::ofstream metrics(out.metrics_path,
                        start > 0 ? std::ios::app : std::ios::trunc);
  if (!metrics) throw DataError("cannot open " + out.metrics_path);
  if (start == 0) metrics << "step,term,value\n";

  const std::string cfg_text = format_train_config(cfg);
  if (start == 0)
    save_training_state(out.checkpoint_path, model.ps, opt, cfg_text);

  const Rng root(cfg.seed);
  const int B = cfg.batch;
  const int workers = std::min(worker_count(), B);

  struct Item {
    std::unordered_map<int, std::vector<double>> grads;
    double codec = 0, align = 0, transition = 0, total = 0;
    std::exception_ptr err;
  };

  for (int64_t step = start; step < cfg.steps; ++step) {
    std::vector<int> idx(B);
    for (int b = 0; b < B; ++b)
      idx[b] = root.stream("episode", static_cast<uint64_t>(step) * B + b)
                   .uniform_int(0, spec.n_episodes - 1);

    std::vector<Item> items(B);
    parallel_for(B, workers, [&](int b) {
      try {
        Tape t(true);
        EpisodeSource src = spec.source(idx[b]);
        const uint64_t ss =
            root.stream("scramble", static_cast<uint64_t>(step) * B + b).u64();
        LossBreakdown lb =
            episode_loss(t, model, src, cfg, ss, spec.codec_term);
        items[b].codec = lb.codec;
        items[b].align = lb.align;
        items[b].transition = lb.transition;
        items[b].total = lb.total_value;
        items[b].grads = t.backward(scale(lb.total, 1.0 / B));
      } catch (...) {
        items[b].err = std::current_exception();
      }
    });
    for (const auto& it : items)
      if (it.err) {
        try {
          std::rethrow_exception(it.err);
        } catch (const NumericError& e) {
          throw NumericError(std::string(e.what()) + " (training step " +
                             std::to_string(step) + ")");
        }
      }

    double mc = 0, ma = 0, mt = 0, mtot = 0;
    std::unordered_map<int, std::vector<double>> grads;
    for (const auto& it : items) {
      accumulate_grads(grads, it.grads);
      mc += it.codec / B;
      ma += it.align / B;
      mt += it.transition / B;
      mtot += it.total / B;
    }
    for (const char* term : {"codec", "align", "transition", "total"}) {
      const double v = term == std::string("codec")        ? mc
                       : term == std::string("align")      ? ma
                       : term == std::string("transition") ? mt
                                                           : mtot;
      if (!std::isfinite(v))
        throw NumericError("non-finite " + std::string(term) +
                           " term at step " + std::to_string(step));
    }
    for (const auto& prefix : spec.frozen_prefixes)
      for (int id = 0; id < model.ps.count(); ++id)
        if (model.ps.name(id).rfind(prefix, 0) == 0) grads.erase(id);
    check_finite_grads(model.ps, grads, step);

    const double gnorm = opt.step(grads);
    append_metric(metrics, out.history, step, "codec", mc);
    append_metric(metrics, out.history, step, "align", ma);
    append_metric(metrics, out.history, step, "transition", mt);
    append_metric(metrics, out.history, step, "total", mtot);
    append_metric(metrics, out.history, step, "grad_norm", gnorm);

    if (spec.snapshot_every > 0 && (step + 1) % spec.snapshot_every == 0)
      save_training_state(out.checkpoint_path, model.ps, opt, cfg_text);
  }
  metrics.flush();
  save_training_state(out.checkpoint_path, model.ps, opt, cfg_text);
  out.steps_done = cfg.steps;
  return out;
}

void validate_dataset(const std::vector<Trajectory>& eps,
                      const TrainConfig& cfg, bool need_targets) {
  if (eps.empty()) throw DataError("dataset has no episodes");
  const int need = cfg.t_enc + cfg.t_unroll + (need_targets ? 1 : 0);
  for (size_t i = 0; i < eps.size(); ++i) {
    const Trajectory& tr = eps[i];
    if (tr.w != eps[0].w || tr.h != eps[0].h || tr.n_obj != eps[0].n_obj ||
        tr.a != eps[0].a)
      throw DataError("episode " + std::to_string(i) +
                      " disagrees with episode 0 on dimensions");
    if (tr.t < need)
      throw DataError("episode " + std::to_string(i) + " has " +
                      std::to_string(tr.t) + " steps, needs " +
                      std::to_string(need));
  }
  if (cfg.k_slots != eps[0].n_obj + 1)
    throw DataError("k_slots=" + std::to_string(cfg.k_slots) +
                    " but the data carries " + std::to_string(eps[0].n_obj) +
                    " objects (+1 background)");
}

}  // namespace

TrainOutcome train(const TrainConfig& cfg,
                   const std::vector<Trajectory>& episodes,
                   const std::string& out_dir, bool resume) {
  cfg.validate();
  validate_dataset(episodes, cfg, true);
  Model model;
  build_model(model, cfg, episodes[0].w, episodes[0].h);
  LoopSpec spec;
  spec.cfg = &cfg;
  spec.model = &model;
  spec.n_episodes = static_cast<int>(episodes.size());
  const SlotCodec* codec = model.codec.get();
  spec.source = [codec, &episodes](int i) {
    return encoding_source(*codec, episodes[i]);
  };
  spec.out_dir = out_dir;
  spec.resume = resume;
  return run_loop(spec);
}

double object_level_error(const Model& model, const EpisodeSource& src,
                          const TrainConfig& cfg, int t_unroll_eval,
                          uint64_t shuffle_seed) {
  Tape t(false);
  RolloutConfig rc;
  rc.t_enc = cfg.t_enc;
  rc.t_unroll = t_unroll_eval;
  rc.memory_slots = cfg.memory_slots;
  rc.aligned = cfg.input_mode == InputMode::kAligned;
  rc.shuffle_seed = shuffle_seed;
  const AlignNet* an = rc.aligned ? model.align.get() : nullptr;
  RolloutResult r = rollout(t, src, an, *model.core, rc);
  const int L = cfg.t_enc + t_unroll_eval;
  double err = 0;
  if (rc.aligned) {
    for (int s = 1; s <= L; ++s)
      err += sum(mul(sub(r.z_d[s], r.z_hard[s]), sub(r.z_d[s], r.z_hard[s])))
                 .scalar();
    err /= static_cast<double>(L) * cfg.memory_slots * cfg.feat;
  } else {
    for (int s = 1; s <= L; ++s)
      err += hungarian_min_assignment_loss(r.z_d[s], r.z_obs[s]).scalar();
    err /= static_cast<double>(L) * src.k_slots * cfg.feat;
  }
  return err;
}

PrecomputedSlots precompute_slots(const SlotCodec& codec,
                                  const std::vector<Trajectory>& eps) {
  PrecomputedSlots out;
  out.values.resize(eps.size());
  out.flags.resize(eps.size());
  const int workers = std::min<int>(worker_count(), static_cast<int>(eps.size()));
  std::vector<std::exception_ptr> errs(eps.size());
  parallel_for(static_cast<int>(eps.size()), workers, [&](int i) {
    try {
      const EpisodeSource src = encoding_source(codec, eps[i]);
      Tape t(false);
      for (int s = 0; s < eps[i].t; ++s) {
        const auto v = src.slots(t, s).values();
        out.values[i].emplace_back(v.begin(), v.end());
        out.flags[i].push_back(src.flags(s));
      }
    } catch (...) {
      errs[i] = std::current_exception();
    }
  });
  for (const auto& e : errs)
    if (e) std::rethrow_exception(e);
  return out;
}

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string condition_name(InputMode in, LossMode lm) {
  return std::string(input_mode_name(in)) + "+" + loss_mode_name(lm);
}

}  // namespace

AblationReport run_ablation_grid(const AblationConfig& acfg,
                                 const std::vector<Trajectory>& train_eps,
                                 const std::vector<Trajectory>& eval_eps,
                                 const std::string& out_dir) {
  const TrainConfig& base = acfg.base;
  base.validate();
  if (acfg.seeds.empty()) throw std::invalid_argument("ablation needs seeds");
  validate_dataset(train_eps, base, true);
  validate_dataset(eval_eps, base, true);
  fs::create_directories(out_dir);

  // Phase 1: reconstruction-only codec, then freeze.
  CodecConfig cc;
  cc.window_w = train_eps[0].w;
  cc.window_h = train_eps[0].h;
  cc.k_slots = base.k_slots;
  cc.feat = base.feat;
  ParamStore codec_ps;
  Rng codec_init = Rng(base.seed).stream("codec-init");
  SlotCodec codec(codec_ps, cc, codec_init);
  Adam copt(codec_ps, AdamConfig{acfg.codec_lr, 0.9, 0.999, 1e-8, 5.0});
  const Rng root(base.seed);
  const int n_train = static_cast<int>(train_eps.size());
  const int CB = acfg.codec_batch;
  const int workers = std::min(worker_count(), CB);
  for (int64_t s = 0; s < acfg.codec_pretrain_steps; ++s) {
    struct Item {
      std::unordered_map<int, std::vector<double>> grads;
      double loss = 0;
      std::exception_ptr err;
    };
    std::vector<Item> items(CB);
    parallel_for(CB, workers, [&](int b) {
      try {
        const uint64_t u = static_cast<uint64_t>(s) * CB + b;
        const Trajectory& tr =
            train_eps[root.stream("codec-ep", u).uniform_int(0, n_train - 1)];
        const int frame =
            root.stream("codec-frame", u).uniform_int(0, tr.t - 1);
        Tape t(true);
        Tensor z = codec.encode(t, tr.frame(frame), slot_mask_stack(tr, frame));
        SlotDecode dec = codec.decode(t, z);
        Tensor loss = codec.mixture_loss(t, dec, tr.frame(frame));
        items[b].loss = loss.scalar();
        items[b].grads = t.backward(scale(loss, 1.0 / CB));
      } catch (...) {
        items[b].err = std::current_exception();
      }
    });
    double mean = 0;
    for (auto& it : items) {
      if (it.err) std::rethrow_exception(it.err);
      mean += it.loss / CB;
    }
    if (!std::isfinite(mean))
      throw NumericError("non-finite codec loss at pretrain step " +
                         std::to_string(s));
    std::unordered_map<int, std::vector<double>> grads;
    for (const auto& it : items) accumulate_grads(grads, it.grads);
    check_finite_grads(codec_ps, grads, s);
    copt.step(grads);
  }
  AblationReport report;
  report.codec_checkpoint = out_dir + "/codec.oatw";
  write_checkpoint(report.codec_checkpoint, snapshot_params(codec_ps));
  const auto codec_entries = snapshot_params(codec_ps);

  // Frozen features once for everyone.
  const PrecomputedSlots train_pre = precompute_slots(codec, train_eps);
  const PrecomputedSlots eval_pre = precompute_slots(codec, eval_eps);
  const int n_eval =
      std::min<int>(acfg.eval_episodes, static_cast<int>(eval_eps.size()));

  report.grid_csv_path = out_dir + "/ablation.csv";
  std::ofstream grid(report.grid_csv_path, std::ios::trunc);
  if (!grid) throw DataError("cannot open " + report.grid_csv_path);
  grid << "condition,seed,error\n";

  const std::pair<InputMode, LossMode> conditions[4] = {
      {InputMode::kAligned, LossMode::kObjectLevel},
      {InputMode::kAligned, LossMode::kPixelLevel},
      {InputMode::kUnalignedShuffled, LossMode::kObjectLevel},
      {InputMode::kUnalignedShuffled, LossMode::kPixelLevel},
  };
  for (int ci = 0; ci < 4; ++ci) {
    AblationCell& cell = report.cells[ci];
    cell.input = conditions[ci].first;
    cell.loss = conditions[ci].second;
    cell.lower_bound = cell.input == InputMode::kUnalignedShuffled;
    const std::string cname = condition_name(cell.input, cell.loss);
    for (uint64_t seed : acfg.seeds) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      cfg.input_mode = cell.input;
      cfg.loss_mode = cell.loss;
      if (cfg.input_mode == InputMode::kUnalignedShuffled)
        cfg.memory_slots = cfg.k_slots;  // nothing to align a wider memory to
      Model model;
      build_model(model, cfg, train_eps[0].w, train_eps[0].h);
      restore_params(model.ps, codec_entries);

      LoopSpec spec;
      spec.cfg = &cfg;
      spec.model = &model;
      spec.n_episodes = n_train;
      spec.source = [&](int i) {
        return precomputed_source(train_pre.values[i], train_pre.flags[i],
                                  train_eps[i], cfg.k_slots, cfg.feat);
      };
      spec.codec_term = false;
      spec.frozen_prefixes = {"codec."};
      spec.out_dir =
          out_dir + "/" + cname + "/seed_" + std::to_string(seed);
      TrainOutcome outcome = run_loop(spec);
      cell.checkpoints.push_back(outcome.checkpoint_path);

      double err = 0;
      for (int e = 0; e < n_eval; ++e) {
        EpisodeSource src =
            precomputed_source(eval_pre.values[e], eval_pre.flags[e],
                               eval_eps[e], cfg.k_slots, cfg.feat);
        const uint64_t ss = Rng(base.seed).stream("eval-scramble", e).u64();
        err += object_level_error(model, src, cfg, cfg.t_unroll, ss) / n_eval;
      }
      cell.seed_errors.push_back(err);
      char row[160];
      std::snprintf(row, sizeof row, "%s,%llu,%.17g\n", cname.c_str(),
                    static_cast<unsigned long long>(seed), err);
      grid << row;
      grid.flush();
    }
    cell.median_error = median_of(cell.seed_errors);
  }

  report.table_csv_path = out_dir + "/table.csv";
  std::ofstream table(report.table_csv_path, std::ios::trunc);
  if (!table) throw DataError("cannot open " + report.table_csv_path);
  table << "input,object-level,pixel-level\n";
  for (InputMode in : {InputMode::kAligned, InputMode::kUnalignedShuffled}) {
    table << input_mode_name(in);
    for (LossMode lm : {LossMode::kObjectLevel, LossMode::kPixelLevel}) {
      for (const auto& cell : report.cells)
        if (cell.input == in && cell.loss == lm) {
          table << "," << fmt_double(cell.median_error);
          if (cell.lower_bound) table << " (lower bound)";
        }
    }
    table << "\n";
  }
  return report;
}

}  // namespace oat
