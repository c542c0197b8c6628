#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oat/rng.hpp"

namespace oat {

// Moving colored sprites in an arena, observed through a camera window that
// pans under a discrete action. Objects routinely leave and re-enter view,
// which is the partial-observability stressor the pipeline trains against.
struct WorldConfig {
  int arena_w = 64, arena_h = 64;
  int window_w = 24, window_h = 24;
  int n_obj = 6;
  int pan_step = 4;
  int episode_len = 20;
  double speed_min = 0.35, speed_max = 1.2;
  int sprite_min = 6, sprite_max = 9;

  // left, right, up, down, stay
  static constexpr int kActions = 5;

  void validate() const;  // throws std::invalid_argument
};

struct ObjectState {
  double x = 0, y = 0;    // center, arena coordinates
  double vx = 0, vy = 0;  // pixels per step
  int shape = 0;          // 0 square, 1 circle, 2 triangle
  int color = 0;          // palette index
  int size = 0;           // bounding box side in pixels
  int id = 0;             // persistent identity (shape * palette + color)
};

struct WorldState {
  std::vector<ObjectState> objects;
  int cam_x = 0, cam_y = 0;  // window origin, clamped inside the arena
};

struct Trajectory {
  int t = 0, n_obj = 0, w = 0, h = 0, a = 0;
  std::vector<float> frames;        // t*w*h*3, in [0,1]
  std::vector<float> masks;         // t*n_obj*w*h, in {0,1}
  std::vector<int32_t> identities;  // t*n_obj, -1 for padding
  std::vector<uint8_t> visibility;  // t*n_obj
  std::vector<float> actions;       // t*a one-hot

  const float* frame(int step) const {
    return frames.data() + static_cast<size_t>(step) * w * h * 3;
  }
  const float* mask(int step, int obj) const {
    return masks.data() + (static_cast<size_t>(step) * n_obj + obj) * w * h;
  }
  const float* action(int step) const {
    return actions.data() + static_cast<size_t>(step) * a;
  }
  bool visible(int step, int obj) const {
    return visibility[static_cast<size_t>(step) * n_obj + obj] != 0;
  }
  int identity(int step, int obj) const {
    return identities[static_cast<size_t>(step) * n_obj + obj];
  }
};

// Fixed render constants.
inline constexpr int kPaletteSize = 8;
inline constexpr int kShapeCount = 3;
extern const float kPalette[kPaletteSize][3];
extern const float kBackground[3];

WorldState init_world(const WorldConfig& cfg, Rng& rng);

// Positions advance by velocity with elastic wall reflection; the camera
// shifts by the pan vector of `action`, clamped to keep the window inside.
void step_world(WorldState& state, const WorldConfig& cfg, int action);

// Painter's-order rasterization: later-indexed objects occlude earlier ones;
// masks record only pixels actually visible in the window.
// frame: w*h*3 floats; masks: n_obj*w*h floats; vis: n_obj bytes.
void render_observation(const WorldState& state, const WorldConfig& cfg,
                        float* frame, float* masks, uint8_t* vis);

// Deterministic under seed. Biased random pan policy; when episode_len >= 12
// the episode is guaranteed to contain at least one object that leaves and
// re-enters the window (resampled until true).
Trajectory generate_trajectory(const WorldConfig& cfg, uint64_t seed);

// True if some object's visibility goes visible, then hidden, then visible.
bool has_occlusion_event(const Trajectory& tr);

// Chunked binary dataset, little-endian; see save for the layout. Errors
// carry the byte offset of the inconsistency.
void save_dataset(const std::vector<Trajectory>& trs, const std::string& path);
std::vector<Trajectory> load_dataset(const std::string& path);

}  // namespace oat
