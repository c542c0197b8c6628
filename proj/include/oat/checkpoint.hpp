#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oat/nn.hpp"

namespace oat {

// Single-file weight container. Layout, little-endian:
//   magic "OATW", version u32, then entries until end of file:
//     name length u16, UTF-8 name, rank u8, extents u32 per axis,
//     float64 values in row-major order.
// Reserved names carry bookkeeping alongside the weights:
//   __step__             [1]      optimizer step counter
//   __adam_m__/<param>   (shape)  first-moment buffer
//   __adam_v__/<param>   (shape)  second-moment buffer
//   __config__           [n]      flat key=value text, one byte per value
//                                 (the table has a single payload type, so
//                                 the snapshot's text rides along as bytes)
struct CheckpointEntry {
  std::string name;
  std::vector<uint32_t> extents;
  std::vector<double> values;
};

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'O', 'A', 'T', 'W'};

// Writes to a temp file and renames into place, so an interrupted save never
// clobbers the previous checkpoint.
void write_checkpoint(const std::string& path,
                      const std::vector<CheckpointEntry>& entries);

// Malformed input throws DataError naming the byte offset.
std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

// Params in id order, rank 2.
std::vector<CheckpointEntry> snapshot_params(const ParamStore& ps);

// Loads parameter entries into the store: existing names are overwritten
// (shape mismatch throws DataError), new names are added. Reserved names are
// skipped. Returns the ids touched, in entry order.
std::vector<int> restore_params(ParamStore& ps,
                                const std::vector<CheckpointEntry>& entries);

// Full training state: params, step counter, optimizer moments, config text.
void save_training_state(const std::string& path, const ParamStore& ps,
                         Adam& opt, const std::string& config_text);

struct TrainingState {
  int64_t step = 0;
  std::string config_text;
};

// Restores params into `ps` and, when `opt` is given, its step counter and
// moment buffers (missing moments reset to zero).
TrainingState load_training_state(const std::string& path, ParamStore& ps,
                                  Adam* opt);

// Decodes the embedded config text; empty when no such entry exists.
std::string checkpoint_config_text(const std::vector<CheckpointEntry>& entries);

}  // namespace oat
