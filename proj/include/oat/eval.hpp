#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "oat/rollout.hpp"
#include "oat/training.hpp"
#include "oat/world.hpp"

namespace oat {

// Rollout scoring: segmentation agreement, pixel and latent prediction
// error, and identity-tracking consistency of the aligner's assignments.
// Everything here is gradient-free.

// Adjusted Rand index between two flat labelings of the same pixels.
// Chance-corrected pair-counting agreement: 1 for identical partitions
// (up to relabeling), ~0 for independent ones. When exclude_background is
// set, pixels whose TRUTH label equals background_label are dropped before
// counting; fewer than two surviving pixels leaves the index undefined.
std::optional<double> adjusted_rand_index(const std::vector<int>& pred,
                                          const std::vector<int>& truth,
                                          int background_label = 0,
                                          bool exclude_background = true);

// Per-pixel ground-truth labels for one step: 0 for background, j+1 for
// object j. Object masks are disjoint (occlusion already resolved).
std::vector<int> truth_pixel_labels(const Trajectory& tr, int step);

// Per-pixel argmax over the rows of a [K, P] mask-logit tensor. Ties pick
// the lowest row so results never depend on float summation order.
std::vector<int> mask_argmax_labels(const Tensor& mask_logits);

// Per-object anchor tracking. An object's anchor is the memory slot of its
// first matched visible step; `overall` averages, over objects, the
// fraction of later matched visible steps spent in the anchor slot.
// `reappear` restricts the count to steps immediately following a hidden
// gap. Objects matched fewer than twice contribute nothing.
struct ConsistencyStats {
  double overall_sum = 0.0;   // sum of per-object anchor-match fractions
  int overall_n = 0;          // objects with at least one scored later step
  double reappear_sum = 0.0;  // same, over re-appearance steps only
  int reappear_n = 0;         // objects with at least one re-appearance step

  void merge(const ConsistencyStats& o);
  std::optional<double> overall() const;
  std::optional<double> reappear() const;
};

// Scores the aligner's assignments against ground-truth object identity.
// Defined for aligned rollouts; steps where the object's slot was excluded
// as empty are skipped rather than counted as misses.
ConsistencyStats slot_consistency(const RolloutResult& roll,
                                  const Trajectory& tr);

// Per-step curves over the unroll window. Index u holds the score of
// prediction step t_enc + u + 1, so each vector has t_eval entries.
struct UnrollEval {
  std::vector<double> pixel_error;   // mean squared error of the composed
                                     // prediction, per pixel channel
  std::vector<double> recon_error;   // same, decoding the step's own
                                     // encoded observation (codec ceiling)
  std::vector<double> ari;           // mask-argmax segmentation vs truth;
                                     // NaN when undefined for the step
  std::vector<double> latent_error;  // squared feature distance between the
                                     // prediction and its target, per element
  double encoding_ari = 0.0;         // mean over the encode steps; NaN when
                                     // every encode step was undefined
  ConsistencyStats consistency;      // aligned rollouts only
};

// Runs one grad-free rollout with t_unroll = t_eval and scores it. t_eval
// may exceed the t_unroll the model was trained with. Needs an episode of
// at least t_enc + t_eval + 1 steps.
UnrollEval unroll_metrics(const Model& model, const EpisodeSource& src,
                          const TrainConfig& cfg, int t_eval,
                          uint64_t scramble_seed);

struct ReportRow {
  int episode = 0;
  int step = 0;  // -1 for episode-level scalars
  std::string metric;
  double value = 0.0;  // NaN serializes as a missing marker
};

struct MetricsReport {
  std::string config_text;
  uint64_t seed = 0;
  std::map<std::string, std::vector<double>> per_step;  // mean curves
  std::map<std::string, double> summary;
  std::vector<ReportRow> rows;  // raw per-episode values
};

// Scores every episode and aggregates. Per-step curves are NaN-skipping
// means over episodes; summary holds their step means plus the episode
// scalars. Scramble seeds derive from cfg.seed and the episode index only.
MetricsReport evaluate_model(const Model& model,
                             const std::vector<Trajectory>& episodes,
                             const TrainConfig& cfg, int t_eval);

// JSON (schema_version, config, seed, metrics, summary) plus a flat CSV
// (episode,step,metric,value). NaN becomes null in JSON and "missing" in
// CSV; neither file ever contains the token nan. Throws DataError when a
// path cannot be written.
void write_report(const MetricsReport& rep, const std::string& json_path,
                  const std::string& csv_path);

// One episode where some object is visible, hidden for hidden_min..hidden_max
// consecutive steps, then visible again.
struct OcclusionEpisode {
  Trajectory tr;
  int object = 0;      // trajectory object index
  int hide_start = 0;  // first hidden step
  int reappear = 0;    // first visible step after the gap
};

// Rejection-samples trajectories until n qualifying episodes are found.
// Optional bounds pin the re-appearance step into a window (pass -1 to
// leave a side open). Throws DataError when the attempt budget runs out.
std::vector<OcclusionEpisode> occlusion_test_set(
    const WorldConfig& cfg, int n, uint64_t seed, int hidden_min = 3,
    int hidden_max = 6, int earliest_reappear = -1, int latest_reappear = -1);

// Clamps each value to [0,1] and writes an 8-bit binary PPM. rgb holds
// w*h*3 interleaved channels.
void write_ppm(const std::string& path, int w, int h, const double* rgb);

// Renders the unroll window of one aligned-or-not rollout: per step the
// ground-truth frame, the composed prediction, and each slot's
// weight-masked component, as step_%04d_{truth,pred,slot_%02d}.ppm.
// Returns the number of files written (t_eval * (2 + rows)).
int render_rollout_images(const Model& model, const Trajectory& tr,
                          const TrainConfig& cfg, int t_eval,
                          uint64_t scramble_seed, const std::string& out_dir);

}  // namespace oat
