#include "oat/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <utility>

#include "json.hpp"
#include "oat/errors.hpp"
#include "oat/parallel.hpp"
#include "oat/rng.hpp"

namespace oat {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// Pair counts stay in integers so the index is exactly invariant under any
// relabeling (summation order cannot perturb it).
uint64_t comb2(uint64_t x) { return x < 2 ? 0 : x * (x - 1) / 2; }

double nan_mean(const std::vector<double>& v) {
  double s = 0;
  int n = 0;
  for (double x : v)
    if (!std::isnan(x)) {
      s += x;
      ++n;
    }
  return n ? s / n : kNan;
}

}  // namespace

std::optional<double> adjusted_rand_index(const std::vector<int>& pred,
                                          const std::vector<int>& truth,
                                          int background_label,
                                          bool exclude_background) {
  if (pred.size() != truth.size())
    throw std::invalid_argument("adjusted_rand_index: label count mismatch");
  std::map<std::pair<int, int>, uint64_t> cell;
  std::map<int, uint64_t> row, col;
  uint64_t n = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    if (exclude_background && truth[i] == background_label) continue;
    ++cell[{truth[i], pred[i]}];
    ++row[truth[i]];
    ++col[pred[i]];
    ++n;
  }
  if (n < 2) return std::nullopt;
  uint64_t sum_cells = 0, sum_rows = 0, sum_cols = 0;
  for (const auto& [k, c] : cell) sum_cells += comb2(c);
  for (const auto& [k, c] : row) sum_rows += comb2(c);
  for (const auto& [k, c] : col) sum_cols += comb2(c);
  const double total = static_cast<double>(comb2(n));
  const double expected =
      static_cast<double>(sum_rows) * static_cast<double>(sum_cols) / total;
  const double max_index = 0.5 * (static_cast<double>(sum_rows) +
                                  static_cast<double>(sum_cols));
  const double denom = max_index - expected;
  // Both partitions carry no pair information (all-singleton or all-one on
  // both sides); they agree trivially.
  if (denom == 0.0) return 1.0;
  return (static_cast<double>(sum_cells) - expected) / denom;
}

std::vector<int> truth_pixel_labels(const Trajectory& tr, int step) {
  if (step < 0 || step >= tr.t)
    throw std::invalid_argument("truth_pixel_labels: step out of range");
  const int p = tr.w * tr.h;
  std::vector<int> labels(p, 0);
  for (int j = 0; j < tr.n_obj; ++j) {
    const float* m = tr.mask(step, j);
    for (int i = 0; i < p; ++i)
      if (m[i] > 0.5f) labels[i] = j + 1;
  }
  return labels;
}

std::vector<int> mask_argmax_labels(const Tensor& logits) {
  if (!logits.defined())
    throw std::invalid_argument("mask_argmax_labels: undefined tensor");
  const int k = logits.rows(), p = logits.cols();
  const auto v = logits.values();
  std::vector<int> labels(p, 0);
  for (int i = 0; i < p; ++i) {
    int best = 0;
    double bv = v[i];
    for (int r = 1; r < k; ++r) {
      const double x = v[static_cast<size_t>(r) * p + i];
      if (x > bv) {
        bv = x;
        best = r;
      }
    }
    labels[i] = best;
  }
  return labels;
}

void ConsistencyStats::merge(const ConsistencyStats& o) {
  overall_sum += o.overall_sum;
  overall_n += o.overall_n;
  reappear_sum += o.reappear_sum;
  reappear_n += o.reappear_n;
}

std::optional<double> ConsistencyStats::overall() const {
  if (!overall_n) return std::nullopt;
  return overall_sum / overall_n;
}

std::optional<double> ConsistencyStats::reappear() const {
  if (!reappear_n) return std::nullopt;
  return reappear_sum / reappear_n;
}

ConsistencyStats slot_consistency(const RolloutResult& roll,
                                  const Trajectory& tr) {
  ConsistencyStats st;
  const int steps = std::min<int>(
      tr.t, static_cast<int>(
                std::min(roll.assignments.size(), roll.perms.size())));
  for (int j = 0; j < tr.n_obj; ++j) {
    const int canon = j + 1;  // slot 0 is the background
    int anchor = -1;
    int later = 0, hits = 0, re_later = 0, re_hits = 0;
    for (int s = 0; s < steps; ++s) {
      if (!tr.visible(s, j)) continue;
      const auto& perm = roll.perms[s];
      const auto& asg = roll.assignments[s];
      if (perm.empty() || asg.obs_to_memory.empty()) continue;
      int pos = -1;
      for (size_t i = 0; i < perm.size(); ++i)
        if (perm[i] == canon) {
          pos = static_cast<int>(i);
          break;
        }
      if (pos < 0) continue;
      const int slot = asg.obs_to_memory[pos];
      if (slot < 0) continue;  // excluded as empty; nothing to score
      if (anchor < 0) {
        anchor = slot;
        continue;
      }
      const bool reappearing = s > 0 && !tr.visible(s - 1, j);
      ++later;
      hits += slot == anchor;
      if (reappearing) {
        ++re_later;
        re_hits += slot == anchor;
      }
    }
    if (later > 0) {
      st.overall_sum += static_cast<double>(hits) / later;
      ++st.overall_n;
    }
    if (re_later > 0) {
      st.reappear_sum += static_cast<double>(re_hits) / re_later;
      ++st.reappear_n;
    }
  }
  return st;
}

namespace {

double frame_mse(const Tensor& composed, const float* frame, int p) {
  const auto v = composed.values();
  double s = 0;
  for (int i = 0; i < 3 * p; ++i) {
    const double d = v[i] - static_cast<double>(frame[i]);
    s += d * d;
  }
  return s / (3.0 * p);
}

std::optional<double> step_ari(const SlotCodec& codec, Tape& t,
                               const Tensor& z, const Trajectory& tr,
                               int step) {
  const SlotDecode dec = codec.decode(t, z);
  return adjusted_rand_index(mask_argmax_labels(dec.mask_logits),
                             truth_pixel_labels(tr, step));
}

}  // namespace

UnrollEval unroll_metrics(const Model& model, const EpisodeSource& src,
                          const TrainConfig& cfg, int t_eval,
                          uint64_t scramble_seed) {
  if (t_eval < 1)
    throw std::invalid_argument("unroll_metrics: t_eval must be positive");
  if (!src.traj)
    throw std::invalid_argument("unroll_metrics: source has no trajectory");
  const Trajectory& tr = *src.traj;

  RolloutConfig rc;
  rc.t_enc = cfg.t_enc;
  rc.t_unroll = t_eval;
  rc.memory_slots = cfg.memory_slots;
  rc.aligned = cfg.input_mode == InputMode::kAligned;
  rc.shuffle_seed = scramble_seed;
  Tape t(false);
  const AlignNet* an = rc.aligned ? model.align.get() : nullptr;
  const RolloutResult roll = rollout(t, src, an, *model.core, rc);

  UnrollEval ev;
  const int p = tr.w * tr.h;
  for (int u = 0; u < t_eval; ++u) {
    const int step = cfg.t_enc + 1 + u;
    const SlotDecode dec = model.codec->decode(t, roll.z_d[step]);
    ev.pixel_error.push_back(
        frame_mse(model.codec->compose(dec), tr.frame(step), p));
    const auto ari = adjusted_rand_index(mask_argmax_labels(dec.mask_logits),
                                         truth_pixel_labels(tr, step));
    ev.ari.push_back(ari ? *ari : kNan);

    const SlotDecode own =
        model.codec->decode(t, roll.z_canon[step]);
    ev.recon_error.push_back(
        frame_mse(model.codec->compose(own), tr.frame(step), p));

    if (rc.aligned) {
      const auto a = roll.z_d[step].values();
      const auto b = roll.z_hard[step].values();
      double s = 0;
      for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
      }
      ev.latent_error.push_back(
          s / (static_cast<double>(cfg.memory_slots) * cfg.feat));
    } else {
      const double s =
          hungarian_min_assignment_loss(roll.z_d[step], roll.z_obs[step])
              .scalar();
      ev.latent_error.push_back(
          s / (static_cast<double>(src.k_slots) * cfg.feat));
    }
  }

  std::vector<double> enc;
  for (int s = 0; s < cfg.t_enc; ++s) {
    const auto a = step_ari(*model.codec, t, roll.z_canon[s], tr, s);
    enc.push_back(a ? *a : kNan);
  }
  ev.encoding_ari = nan_mean(enc);
  if (rc.aligned) ev.consistency = slot_consistency(roll, tr);
  return ev;
}

MetricsReport evaluate_model(const Model& model,
                             const std::vector<Trajectory>& episodes,
                             const TrainConfig& cfg, int t_eval) {
  if (episodes.empty())
    throw std::invalid_argument("evaluate_model: no episodes");
  const int n = static_cast<int>(episodes.size());
  std::vector<UnrollEval> evs(n);
  std::vector<std::exception_ptr> errs(n);
  std::vector<uint64_t> seeds(n);
  const Rng root(cfg.seed);
  for (int e = 0; e < n; ++e)
    seeds[e] = root.stream("eval-scramble", static_cast<uint64_t>(e)).u64();
  parallel_for(n, std::min(worker_count(), n), [&](int e) {
    try {
      const EpisodeSource src = encoding_source(*model.codec, episodes[e]);
      evs[e] = unroll_metrics(model, src, cfg, t_eval, seeds[e]);
    } catch (...) {
      errs[e] = std::current_exception();
    }
  });
  for (int e = 0; e < n; ++e)
    if (errs[e]) std::rethrow_exception(errs[e]);

  MetricsReport rep;
  rep.config_text = format_train_config(cfg);
  rep.seed = cfg.seed;

  const char* names[4] = {"unroll_pixel_error", "recon_pixel_error",
                          "unroll_ari", "latent_error"};
  for (const char* name : names)
    rep.per_step[name].assign(t_eval, 0.0);
  ConsistencyStats pooled;
  std::vector<double> enc_aris;
  for (int e = 0; e < n; ++e) {
    const UnrollEval& ev = evs[e];
    const std::vector<double>* curves[4] = {&ev.pixel_error, &ev.recon_error,
                                            &ev.ari, &ev.latent_error};
    for (int u = 0; u < t_eval; ++u) {
      const int step = cfg.t_enc + 1 + u;
      for (int c = 0; c < 4; ++c)
        rep.rows.push_back({e, step, names[c], (*curves[c])[u]});
    }
    rep.rows.push_back({e, -1, "encoding_ari", ev.encoding_ari});
    const auto ov = ev.consistency.overall();
    const auto ra = ev.consistency.reappear();
    rep.rows.push_back({e, -1, "slot_consistency", ov ? *ov : kNan});
    rep.rows.push_back({e, -1, "reappear_consistency", ra ? *ra : kNan});
    pooled.merge(ev.consistency);
    enc_aris.push_back(ev.encoding_ari);
  }

  // NaN-skipping per-step means over episodes.
  for (int c = 0; c < 4; ++c) {
    auto& curve = rep.per_step[names[c]];
    for (int u = 0; u < t_eval; ++u) {
      double s = 0;
      int cnt = 0;
      for (int e = 0; e < n; ++e) {
        const std::vector<double>* curves[4] = {
            &evs[e].pixel_error, &evs[e].recon_error, &evs[e].ari,
            &evs[e].latent_error};
        const double x = (*curves[c])[u];
        if (!std::isnan(x)) {
          s += x;
          ++cnt;
        }
      }
      curve[u] = cnt ? s / cnt : kNan;
    }
    rep.summary[names[c]] = nan_mean(curve);
  }
  rep.summary["encoding_ari"] = nan_mean(enc_aris);
  const auto ov = pooled.overall();
  const auto ra = pooled.reappear();
  rep.summary["slot_consistency"] = ov ? *ov : kNan;
  rep.summary["reappear_consistency"] = ra ? *ra : kNan;
  rep.summary["episodes"] = n;
  return rep;
}

void write_report(const MetricsReport& rep, const std::string& json_path,
                  const std::string& csv_path) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config"] = rep.config_text;
  j["seed"] = rep.seed;
  j["metrics"] = nlohmann::json::object();
  for (const auto& [name, curve] : rep.per_step) {
    auto arr = nlohmann::json::array();
    for (double v : curve)
      arr.push_back(std::isnan(v) ? nlohmann::json()
                                  : nlohmann::json(v));
    j["metrics"][name] = std::move(arr);
  }
  j["summary"] = nlohmann::json::object();
  for (const auto& [name, v] : rep.summary)
    j["summary"][name] =
        std::isnan(v) ? nlohmann::json("missing") : nlohmann::json(v);

  std::ofstream js(json_path, std::ios::trunc);
  if (!js) throw DataError("cannot write report file: " + json_path);
  js << j.dump(2) << '\n';
  js.flush();
  if (!js) throw DataError("cannot write report file: " + json_path);

  std::ofstream cs(csv_path, std::ios::trunc);
  if (!cs) throw DataError("cannot write report file: " + csv_path);
  cs << "episode,step,metric,value\n";
  for (const ReportRow& r : rep.rows) {
    char buf[160];
    if (std::isnan(r.value))
      std::snprintf(buf, sizeof buf, "%d,%d,%s,missing\n", r.episode, r.step,
                    r.metric.c_str());
    else
      std::snprintf(buf, sizeof buf, "%d,%d,%s,%.17g\n", r.episode, r.step,
                    r.metric.c_str(), r.value);
    cs << buf;
  }
  cs.flush();
  if (!cs) throw DataError("cannot write report file: " + csv_path);
}

std::vector<OcclusionEpisode> occlusion_test_set(const WorldConfig& cfg,
                                                 int n, uint64_t seed,
                                                 int hidden_min,
                                                 int hidden_max,
                                                 int earliest_reappear,
                                                 int latest_reappear) {
  if (n < 1) throw std::invalid_argument("occlusion_test_set: n must be >= 1");
  if (hidden_min < 1 || hidden_max < hidden_min)
    throw std::invalid_argument("occlusion_test_set: bad hidden-gap bounds");
  std::vector<OcclusionEpisode> out;
  const Rng root(seed);
  const int64_t budget = std::max<int64_t>(2000, static_cast<int64_t>(n) * 500);
  for (int64_t attempt = 0; attempt < budget && static_cast<int>(out.size()) < n;
       ++attempt) {
    Trajectory tr = generate_trajectory(
        cfg, root.stream("occlusion", static_cast<uint64_t>(attempt)).u64());
    int best_r = tr.t, best_j = -1, best_start = 0;
    for (int j = 0; j < tr.n_obj; ++j) {
      for (int s = 1; s < tr.t; ++s) {
        if (!tr.visible(s, j) || tr.visible(s - 1, j)) continue;
        int gap = 0;
        while (s - 1 - gap >= 0 && !tr.visible(s - 1 - gap, j)) ++gap;
        const int gap_start = s - gap;
        if (gap_start < 1) continue;  // never seen before the gap
        if (gap < hidden_min || gap > hidden_max) continue;
        if (earliest_reappear >= 0 && s < earliest_reappear) continue;
        if (latest_reappear >= 0 && s > latest_reappear) continue;
        if (s < best_r) {
          best_r = s;
          best_j = j;
          best_start = gap_start;
        }
        break;  // later gaps of this object re-appear later anyway
      }
    }
    if (best_j >= 0)
      out.push_back({std::move(tr), best_j, best_start, best_r});
  }
  if (static_cast<int>(out.size()) < n)
    throw DataError("occlusion_test_set: found only " +
                    std::to_string(out.size()) + " of " + std::to_string(n) +
                    " qualifying episodes within the attempt budget");
  return out;
}

void write_ppm(const std::string& path, int w, int h, const double* rgb) {
  if (w < 1 || h < 1) throw std::invalid_argument("write_ppm: empty image");
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw DataError("cannot write image file: " + path);
  char header[64];
  const int hl = std::snprintf(header, sizeof header, "P6\n%d %d\n255\n", w, h);
  os.write(header, hl);
  std::vector<unsigned char> bytes(static_cast<size_t>(w) * h * 3);
  for (size_t i = 0; i < bytes.size(); ++i) {
    const double c = std::clamp(rgb[i], 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(c * 255.0));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  os.flush();
  if (!os) throw DataError("cannot write image file: " + path);
}

int render_rollout_images(const Model& model, const Trajectory& tr,
                          const TrainConfig& cfg, int t_eval,
                          uint64_t scramble_seed, const std::string& out_dir) {
  if (t_eval < 1)
    throw std::invalid_argument("render_rollout_images: t_eval must be >= 1");
  const int last = cfg.t_enc + t_eval;
  if (tr.t < last + 1)
    throw DataError("render_rollout_images: episode has " +
                    std::to_string(tr.t) + " steps, needs " +
                    std::to_string(last + 1));
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir + ": " + ec.message());

  RolloutConfig rc;
  rc.t_enc = cfg.t_enc;
  rc.t_unroll = t_eval;
  rc.memory_slots = cfg.memory_slots;
  rc.aligned = cfg.input_mode == InputMode::kAligned;
  rc.shuffle_seed = scramble_seed;
  rc.want_targets = false;
  Tape t(false);
  const AlignNet* an = rc.aligned ? model.align.get() : nullptr;
  const EpisodeSource src = encoding_source(*model.codec, tr);
  const RolloutResult roll = rollout(t, src, an, *model.core, rc);

  const int p = tr.w * tr.h;
  std::vector<double> rgb(static_cast<size_t>(p) * 3);
  int files = 0;
  char name[64];
  for (int u = 0; u < t_eval; ++u) {
    const int step = cfg.t_enc + 1 + u;
    const float* frame = tr.frame(step);
    for (int i = 0; i < 3 * p; ++i) rgb[i] = frame[i];
    std::snprintf(name, sizeof name, "/step_%04d_truth.ppm", step);
    write_ppm(out_dir + name, tr.w, tr.h, rgb.data());
    ++files;

    const SlotDecode dec = model.codec->decode(t, roll.z_d[step]);
    const Tensor comp = model.codec->compose(dec);
    const auto cv = comp.values();
    for (int i = 0; i < 3 * p; ++i) rgb[i] = cv[i];
    std::snprintf(name, sizeof name, "/step_%04d_pred.ppm", step);
    write_ppm(out_dir + name, tr.w, tr.h, rgb.data());
    ++files;

    // Per-pixel softmax over the mask logits, one masked component per slot.
    const int rows = dec.mask_logits.rows();
    const auto ml = dec.mask_logits.values();
    const auto px = dec.pixels.values();
    std::vector<double> w(static_cast<size_t>(rows) * p);
    for (int i = 0; i < p; ++i) {
      double m = ml[i];
      for (int k = 1; k < rows; ++k)
        m = std::max(m, ml[static_cast<size_t>(k) * p + i]);
      double z = 0;
      for (int k = 0; k < rows; ++k)
        z += std::exp(ml[static_cast<size_t>(k) * p + i] - m);
      for (int k = 0; k < rows; ++k)
        w[static_cast<size_t>(k) * p + i] =
            std::exp(ml[static_cast<size_t>(k) * p + i] - m) / z;
    }
    for (int k = 0; k < rows; ++k) {
      for (int i = 0; i < p; ++i)
        for (int c = 0; c < 3; ++c)
          rgb[static_cast<size_t>(i) * 3 + c] =
              px[static_cast<size_t>(k) * 3 * p + i * 3 + c] *
              w[static_cast<size_t>(k) * p + i];
      std::snprintf(name, sizeof name, "/step_%04d_slot_%02d.ppm", step, k);
      write_ppm(out_dir + name, tr.w, tr.h, rgb.data());
      ++files;
    }
  }
  return files;
}

}  // namespace oat
