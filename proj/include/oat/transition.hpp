#pragma once

#include <string>
#include <vector>

#include "oat/nn.hpp"
#include "oat/rng.hpp"
#include "oat/tensor.hpp"

namespace oat {

// Slot-wise dynamics. Every core applies identical weights to each slot row;
// cross-slot interaction happens only inside self-attention, so permuting
// slot rows permutes every output bitwise.

enum class CoreVariant { kSlotLstm, kTransformer, kTransformerSlotLstm };

const char* core_variant_name(CoreVariant v);
CoreVariant core_variant_from_name(const std::string& s);  // throws on junk

struct CoreConfig {
  CoreVariant variant = CoreVariant::kTransformerSlotLstm;
  int feat = 16;        // F: slot feature width
  int action = 5;       // A: one-hot action width
  int h_rec = 64;       // SlotLSTM width
  int d_model = 64;     // transformer width
  int heads = 4;
  int layers = 2;
  int ffn_hidden = 64;
  bool memory_input = false;  // also feed the memory row to the core

  void validate() const;  // throws std::invalid_argument
};

// Per-slot recurrent state; undefined tensors for cores without one.
struct HiddenState {
  Tensor h, c;
};

// One self-attention + feedforward block, post-normalized, no positional
// input of any kind: slot index is identity, not position.
struct TransformerBlock {
  Linear q, k, v, o, ff1, ff2;
  int ln1_g = -1, ln1_b = -1, ln2_g = -1, ln2_b = -1;
  int heads = 1;

  static TransformerBlock make_or_attach(ParamStore& ps, const std::string& name,
                                         int d, int heads, int ffn_hidden,
                                         Rng& rng);
  // attn_out, when given, receives the per-head attention weight matrices.
  Tensor apply(Tape& t, const ParamStore& ps, const Tensor& x,
               std::vector<Tensor>* attn_out = nullptr) const;
};

// LSTM cell shared across slot rows. One bias vector (inside wx) serves all
// gates; a second bias on the recurrent path would be redundant.
struct SlotLstm {
  Linear wx;   // [in, 4H] gate order i, f, g, o
  int wh = -1;  // [H, 4H]
  int h_rec = 0;

  static SlotLstm make_or_attach(ParamStore& ps, const std::string& name,
                                 int in, int h_rec, Rng& rng);
  // x [M,in], h/c [M,H] -> (out h', new state)
  std::pair<Tensor, HiddenState> step(Tape& t, const ParamStore& ps,
                                      const Tensor& x,
                                      const HiddenState& s) const;
};

struct TransitionStep {
  Tensor z_next;  // z_in + dz
  Tensor m_next;  // m + dm
  Tensor dz, dm;  // [M,F] deltas
  HiddenState state;
};

class TransitionCore {
 public:
  TransitionCore(ParamStore& ps, const CoreConfig& cfg, Rng& rng);

  // Zero state for LSTM-family cores; undefined tensors otherwise.
  HiddenState initial_state(Tape& t, int rows) const;

  // One dynamics step. The same arithmetic serves the encode phase (z_in is
  // a hard-aligned observation) and the unroll phase (z_in is the previous
  // prediction); only the caller's routing differs. The output layer starts
  // at zero, so an untrained core is the identity on z and m.
  TransitionStep step(Tape& t, const Tensor& z_in, const Tensor& action,
                      const HiddenState& s, const Tensor& m) const;

  const CoreConfig& config() const { return cfg_; }

 private:
  ParamStore* ps_;
  CoreConfig cfg_;
  Linear in_proj_;  // only for transformer-family cores
  std::vector<TransformerBlock> blocks_;
  SlotLstm lstm_;
  Linear head_;  // zero-initialized, width 2F
};

// Sum over steps of the squared L2 gap between predictions and aligned
// targets; batch averaging is the caller's concern.
Tensor transition_loss(const std::vector<Tensor>& z_d,
                       const std::vector<Tensor>& z_a);

}  // namespace oat
