#pragma once

#include <cstdint>
#include <vector>

#include "oat/nn.hpp"
#include "oat/rng.hpp"
#include "oat/tensor.hpp"
#include "oat/world.hpp"

namespace oat {

// Per-slot autoencoder over ground-truth masks. One shared encoder maps each
// masked view of the frame to a feature row; one shared decoder maps a
// feature row back to slot pixels plus a mask logit map. Slot 0 is the
// background slot.
struct CodecConfig {
  int window_w = 24, window_h = 24;
  int k_slots = 7;  // background plus one per object
  int feat = 16;
  int enc_hidden = 128;  // two hidden layers
  int dec_hidden = 128;  // one hidden layer
  double sigma_bg = 0.09;
  double sigma_fg = 0.11;
  double empty_frac = 0.005;  // slot "present" needs this fraction of pixels

  int pixels() const { return window_w * window_h; }
  double empty_threshold() const { return empty_frac * pixels(); }
  void validate() const;  // throws std::invalid_argument
};

struct SlotDecode {
  Tensor pixels;       // [K, 3P], sigmoid outputs in (0,1)
  Tensor mask_logits;  // [K, P], unbounded
};

class SlotCodec {
 public:
  // Attaches to params already present in the store (by name), otherwise
  // creates freshly initialized ones.
  SlotCodec(ParamStore& ps, const CodecConfig& cfg, Rng& rng);

  // Rows share the encoder weights and slot k sees only frame*mask_k and
  // mask_k, so nothing about slot order can leak into a row's features.
  // frame: 3P floats (interleaved rgb); masks: K*P floats, background first.
  Tensor encode(Tape& t, const float* frame,
                const std::vector<float>& masks) const;

  // Accepts any row count (memory rows decode the same way as slot rows).
  SlotDecode decode(Tape& t, const Tensor& z) const;

  // Per-pixel softmax over the K mask logits, then the weighted sum of slot
  // pixels. Weights sum to one per pixel.
  Tensor compose(const SlotDecode& d) const;  // [P, 3]

  // Negative log-likelihood of the frame under the per-pixel mixture: mask
  // softmax weights times per-slot diagonal Gaussians, summed over pixels.
  // Row 0 uses sigma_bg, the rest sigma_fg.
  Tensor mixture_loss(Tape& t, const SlotDecode& d, const float* frame) const;

  const CodecConfig& config() const { return cfg_; }

 private:
  ParamStore* ps_;
  CodecConfig cfg_;
  Mlp enc_, dec_;
};

// K*P mask stack for one step: row 0 is the background (pixels no object
// covers), then the object masks in trajectory order.
std::vector<float> slot_mask_stack(const Trajectory& tr, int step);

// flags[k] is true iff mask k covers strictly fewer than `threshold` pixels;
// a mask exactly at the threshold counts as occupied.
std::vector<uint8_t> empty_slot_flags(const float* masks, int k, int p,
                                      double threshold);

// Independent slot permutation per step, deterministic under the rng's seed.
// perms[t][i] is the source slot placed at position i.
std::vector<std::vector<int>> slot_shuffle(int steps, int k, const Rng& root);

}  // namespace oat
