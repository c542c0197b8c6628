#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "oat/align.hpp"
#include "oat/codec.hpp"
#include "oat/nn.hpp"
#include "oat/rollout.hpp"
#include "oat/transition.hpp"
#include "oat/world.hpp"

namespace oat {

enum class LossMode { kObjectLevel, kPixelLevel };
enum class InputMode { kAligned, kUnalignedShuffled };

const char* loss_mode_name(LossMode m);
const char* input_mode_name(InputMode m);
LossMode loss_mode_from_name(const std::string& s);    // throws UsageError
InputMode input_mode_from_name(const std::string& s);  // throws UsageError

struct TrainConfig {
  double zeta = 10.0;  // transition-loss weight
  double psi = 0.01;   // adjacency entropy weight
  double lr = 3e-4;
  int batch = 8;
  int64_t steps = 10000;
  int t_enc = 4;
  int t_unroll = 6;
  uint64_t seed = 0;
  LossMode loss_mode = LossMode::kObjectLevel;
  InputMode input_mode = InputMode::kAligned;
  CoreVariant core = CoreVariant::kTransformerSlotLstm;
  bool memory_input = false;  // feed the memory rows to the core too
  int k_slots = 7;            // K: background plus objects
  int memory_slots = 9;       // M
  int feat = 16;              // F

  void validate() const;  // throws std::invalid_argument
};

// Flat key=value text, one line per field, '#' comments. Unknown keys and
// malformed values are usage errors naming the offender.
TrainConfig parse_train_config(const std::string& text);
void apply_config_entry(TrainConfig& cfg, const std::string& key,
                        const std::string& value);
std::string format_train_config(const TrainConfig& cfg);  // canonical echo

// The three trained modules over one parameter store. Checkpoints restore by
// parameter name, so construction attaches to whatever the store holds.
struct Model {
  ParamStore ps;
  std::unique_ptr<SlotCodec> codec;
  std::unique_ptr<AlignNet> align;
  std::unique_ptr<TransitionCore> core;

  Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
};

// Module widths come from the config, pixel dims from the data.
void build_model(Model& out, const TrainConfig& cfg, int window_w,
                 int window_h);

// Sum over steps of the minimum-cost one-to-one matching between prediction
// rows and target rows under squared L2. The match is solved on values; the
// summed cost is differentiable through the matched pairs. Lower-bounds any
// fixed row pairing, so unaligned conditions report it as their error.
Tensor hungarian_min_assignment_loss(const Tensor& z_d, const Tensor& z_targets);

// Mean squared error between composed predictions and ground-truth frames,
// averaged per pixel and channel, summed over steps. z_d[i] is the
// prediction for frame first_step + i.
Tensor pixel_level_loss(Tape& t, const SlotCodec& codec,
                        const std::vector<Tensor>& z_d, const Trajectory& tr,
                        int first_step);

struct LossBreakdown {
  Tensor total;  // on-tape scalar
  Tensor codec_term, align_term, transition_term;  // on-tape scalars
  double codec = 0, align = 0, transition = 0, total_value = 0;
};

// One episode's loss under the configured mode. codec_term=false drops the
// reconstruction term (frozen-codec training). The rollout is returned via
// `roll_out` when the caller wants the trajectories (may be null).
LossBreakdown episode_loss(Tape& t, const Model& model,
                           const EpisodeSource& src, const TrainConfig& cfg,
                           uint64_t shuffle_seed, bool codec_term,
                           RolloutResult* roll_out = nullptr);

// Batch mean with per-term breakdown; terms always satisfy
// total = codec + align + zeta * transition to float accuracy.
LossBreakdown total_loss(Tape& t, const Model& model,
                         const std::vector<EpisodeSource>& batch,
                         const TrainConfig& cfg, uint64_t step_index,
                         bool codec_term = true);

struct MetricRow {
  int64_t step = 0;
  std::string term;
  double value = 0;
};

struct TrainOutcome {
  int64_t steps_done = 0;
  std::vector<MetricRow> history;
  std::string checkpoint_path, metrics_path;
};

// Joint end-to-end training. Writes checkpoint.oatw and metrics.csv under
// out_dir; with resume=true continues from the checkpoint there, bitwise
// identical to an uninterrupted run. Non-finite losses or gradients abort
// with NumericError naming the term and step; the last checkpoint survives.
TrainOutcome train(const TrainConfig& cfg,
                   const std::vector<Trajectory>& episodes,
                   const std::string& out_dir, bool resume = false);

// Per-element object-level error of a trained model on one episode:
// aligned mode scores predictions against carry-forward aligned targets,
// unaligned mode reports the Hungarian lower bound against the raw slots.
double object_level_error(const Model& model, const EpisodeSource& src,
                          const TrainConfig& cfg, int t_unroll_eval,
                          uint64_t shuffle_seed);

struct AblationCell {
  InputMode input = InputMode::kAligned;
  LossMode loss = LossMode::kObjectLevel;
  std::vector<double> seed_errors;  // one per seed, seed order
  double median_error = 0;
  bool lower_bound = false;  // unaligned rows report the Hungarian bound
  std::vector<std::string> checkpoints;  // one per seed
};

struct AblationReport {
  std::array<AblationCell, 4> cells;  // aligned/unaligned x object/pixel
  std::string grid_csv_path;   // condition,seed,error rows
  std::string table_csv_path;  // 2x2 median layout
  std::string codec_checkpoint;
};

struct AblationConfig {
  TrainConfig base;                   // steps = per-condition budget
  int64_t codec_pretrain_steps = 3000;
  int codec_batch = 8;
  double codec_lr = 1e-3;  // reconstruction-only phase tolerates a hotter rate
  std::vector<uint64_t> seeds = {1, 2, 3};
  int eval_episodes = 64;  // cap on eval set usage
};

// Two-phase protocol: pretrain the codec on reconstruction alone, freeze it,
// precompute every episode's slot features once, then train alignment and
// transition per condition and seed on the frozen features. Pixel-level
// conditions still decode through the frozen codec inside the loss.
AblationReport run_ablation_grid(const AblationConfig& acfg,
                                 const std::vector<Trajectory>& train_eps,
                                 const std::vector<Trajectory>& eval_eps,
                                 const std::string& out_dir);

// Encodes every step of every episode with the codec (no gradients) for
// frozen-codec training; returns per-episode value and flag blocks.
struct PrecomputedSlots {
  std::vector<std::vector<std::vector<double>>> values;  // [ep][step][K*F]
  std::vector<std::vector<std::vector<uint8_t>>> flags;  // [ep][step][K]
};
PrecomputedSlots precompute_slots(const SlotCodec& codec,
                                  const std::vector<Trajectory>& eps);

}  // namespace oat
