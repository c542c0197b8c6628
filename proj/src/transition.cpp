#include "oat/transition.hpp"

#include <cmath>
#include <stdexcept>

#include "oat/errors.hpp"

namespace oat {

const char* core_variant_name(CoreVariant v) {
  switch (v) {
    case CoreVariant::kSlotLstm:
      return "slot-lstm";
    case CoreVariant::kTransformer:
      return "transformer";
    case CoreVariant::kTransformerSlotLstm:
      return "transformer-slot-lstm";
  }
  return "?";
}

CoreVariant core_variant_from_name(const std::string& s) {
  if (s == "slot-lstm") return CoreVariant::kSlotLstm;
  if (s == "transformer") return CoreVariant::kTransformer;
  if (s == "transformer-slot-lstm") return CoreVariant::kTransformerSlotLstm;
  throw UsageError("unknown core variant '" + s +
                   "' (expected slot-lstm, transformer, or transformer-slot-lstm)");
}

void CoreConfig::validate() const {
  if (feat < 1 || action < 1) throw std::invalid_argument("feat/action must be >= 1");
  if (h_rec < 1 || d_model < 1 || ffn_hidden < 1)
    throw std::invalid_argument("core widths must be >= 1");
  if (heads < 1 || layers < 1)
    throw std::invalid_argument("heads/layers must be >= 1");
  if (d_model % heads != 0)
    throw std::invalid_argument("d_model must divide evenly into heads");
}

static void check_all_finite(const Tensor& x, const char* what) {
  const double* v = x.tape()->val(x.id());
  const int n = x.rows() * x.cols();
  for (int i = 0; i < n; ++i)
    if (!std::isfinite(v[i])) throw NumericError(std::string(what) + ": non-finite input");
}

TransformerBlock TransformerBlock::make_or_attach(ParamStore& ps,
                                                  const std::string& name, int d,
                                                  int heads, int ffn_hidden,
                                                  Rng& rng) {
  TransformerBlock b;
  b.heads = heads;
  b.q = make_or_attach_linear(ps, name + ".q", d, d, rng);
  b.k = make_or_attach_linear(ps, name + ".k", d, d, rng);
  b.v = make_or_attach_linear(ps, name + ".v", d, d, rng);
  b.o = make_or_attach_linear(ps, name + ".o", d, d, rng);
  b.ff1 = make_or_attach_linear(ps, name + ".ff1", d, ffn_hidden, rng);
  b.ff2 = make_or_attach_linear(ps, name + ".ff2", ffn_hidden, d, rng);
  auto norm_param = [&](const std::string& n, double fill) {
    int id = ps.find(n);
    if (id < 0) id = ps.add(n, 1, d, std::vector<double>(d, fill));
    return id;
  };
  b.ln1_g = norm_param(name + ".ln1.g", 1.0);
  b.ln1_b = norm_param(name + ".ln1.b", 0.0);
  b.ln2_g = norm_param(name + ".ln2.g", 1.0);
  b.ln2_b = norm_param(name + ".ln2.b", 0.0);
  return b;
}

Tensor TransformerBlock::apply(Tape& t, const ParamStore& ps, const Tensor& x,
                               std::vector<Tensor>* attn_out) const {
  check_all_finite(x, "transformer_block");
  const int d = x.cols();
  const int dh = d / heads;
  Tensor qm = q.apply(t, ps, x);
  Tensor km = k.apply(t, ps, x);
  Tensor vm = v.apply(t, ps, x);
  std::vector<Tensor> mixed;
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(qm, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(km, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(vm, h * dh, (h + 1) * dh);
    Tensor w = softmax_rows(scale(matmul_nt(qh, kh), 1.0 / std::sqrt(dh)));
    if (attn_out) attn_out->push_back(w);
    // mix_rows keeps a slot-order-free accumulation, so a row permutation of
    // the block input permutes this product bitwise.
    mixed.push_back(mix_rows(w, vh));
  }
  Tensor att = o.apply(t, ps, concat_cols(mixed));
  Tensor mid = layer_norm_rows(add(x, att), ps.leaf(t, ln1_g), ps.leaf(t, ln1_b));
  Tensor ff = ff2.apply(t, ps, relu(ff1.apply(t, ps, mid)));
  return layer_norm_rows(add(mid, ff), ps.leaf(t, ln2_g), ps.leaf(t, ln2_b));
}

SlotLstm SlotLstm::make_or_attach(ParamStore& ps, const std::string& name,
                                  int in, int h_rec, Rng& rng) {
  SlotLstm l;
  l.h_rec = h_rec;
  l.wx = make_or_attach_linear(ps, name + ".x", in, 4 * h_rec, rng);
  l.wh = ps.find(name + ".h.w");
  if (l.wh < 0) {
    const double s = 1.0 / std::sqrt(static_cast<double>(h_rec));
    std::vector<double> w(static_cast<size_t>(h_rec) * 4 * h_rec);
    for (auto& x : w) x = rng.uniform(-s, s);
    l.wh = ps.add(name + ".h.w", h_rec, 4 * h_rec, std::move(w));
  }
  return l;
}

std::pair<Tensor, HiddenState> SlotLstm::step(Tape& t, const ParamStore& ps,
                                              const Tensor& x,
                                              const HiddenState& s) const {
  if (!s.h.defined() || !s.c.defined())
    throw std::invalid_argument("slot lstm needs an initialized state");
  if (s.h.rows() != x.rows() || s.h.cols() != h_rec)
    throw std::invalid_argument("slot lstm state shape mismatch");
  Tensor gates = add(wx.apply(t, ps, x), matmul(s.h, ps.leaf(t, wh)));
  const int hr = h_rec;
  Tensor gi = sigmoid(slice_cols(gates, 0, hr));
  Tensor gf = sigmoid(slice_cols(gates, hr, 2 * hr));
  Tensor gg = oat::tanh(slice_cols(gates, 2 * hr, 3 * hr));
  Tensor go = sigmoid(slice_cols(gates, 3 * hr, 4 * hr));
  Tensor c = add(mul(gf, s.c), mul(gi, gg));
  Tensor h = mul(go, oat::tanh(c));
  return {h, HiddenState{h, c}};
}

TransitionCore::TransitionCore(ParamStore& ps, const CoreConfig& cfg, Rng& rng)
    : ps_(&ps), cfg_(cfg) {
  cfg_.validate();
  const int in_w = cfg_.feat + cfg_.action + (cfg_.memory_input ? cfg_.feat : 0);
  const bool has_tf = cfg_.variant != CoreVariant::kSlotLstm;
  const bool has_lstm = cfg_.variant != CoreVariant::kTransformer;
  int w = in_w;
  if (has_tf) {
    in_proj_ = make_or_attach_linear(ps, "core.in", in_w, cfg_.d_model, rng);
    for (int i = 0; i < cfg_.layers; ++i)
      blocks_.push_back(TransformerBlock::make_or_attach(
          ps, "core.t" + std::to_string(i), cfg_.d_model, cfg_.heads,
          cfg_.ffn_hidden, rng));
    w = cfg_.d_model;
  }
  if (has_lstm) {
    lstm_ = SlotLstm::make_or_attach(ps, "core.lstm", w, cfg_.h_rec, rng);
    w = cfg_.h_rec;
  }
  head_ = make_or_attach_linear(ps, "core.head", w, 2 * cfg_.feat, rng, 0.0);
}

HiddenState TransitionCore::initial_state(Tape& t, int rows) const {
  if (cfg_.variant == CoreVariant::kTransformer) return {};
  return {t.zeros(rows, cfg_.h_rec), t.zeros(rows, cfg_.h_rec)};
}

TransitionStep TransitionCore::step(Tape& t, const Tensor& z_in,
                                    const Tensor& action, const HiddenState& s,
                                    const Tensor& m) const {
  if (z_in.cols() != cfg_.feat || m.cols() != cfg_.feat ||
      m.rows() != z_in.rows())
    throw DataError("transition step: slot shapes disagree with config");
  if (action.rows() != 1 || action.cols() != cfg_.action)
    throw DataError("transition step: action width " +
                    std::to_string(action.cols()) + ", expected " +
                    std::to_string(cfg_.action));
  check_all_finite(z_in, "transition step");
  const int rows = z_in.rows();

  std::vector<Tensor> parts{z_in, broadcast_row(action, rows)};
  if (cfg_.memory_input) parts.push_back(m);
  Tensor x = concat_cols(parts);

  if (cfg_.variant != CoreVariant::kSlotLstm) {
    x = in_proj_.apply(t, *ps_, x);
    for (const auto& b : blocks_) x = b.apply(t, *ps_, x);
  }
  HiddenState next;
  if (cfg_.variant != CoreVariant::kTransformer) {
    auto [out, st] = lstm_.step(t, *ps_, x, s);
    x = out;
    next = st;
  }
  Tensor deltas = head_.apply(t, *ps_, x);  // [M, 2F]
  Tensor dz = slice_cols(deltas, 0, cfg_.feat);
  Tensor dm = slice_cols(deltas, cfg_.feat, 2 * cfg_.feat);
  return {add(z_in, dz), add(m, dm), dz, dm, next};
}

Tensor transition_loss(const std::vector<Tensor>& z_d,
                       const std::vector<Tensor>& z_a) {
  if (z_d.size() != z_a.size())
    throw std::invalid_argument("transition_loss: sequence lengths differ");
  if (z_d.empty()) throw std::invalid_argument("transition_loss: empty sequence");
  Tape& t = *z_d[0].tape();
  Tensor total = t.scalar_const(0.0);
  for (size_t i = 0; i < z_d.size(); ++i) {
    Tensor diff = sub(z_d[i], z_a[i]);
    total = add(total, sum(mul(diff, diff)));
  }
  return total;
}

}  // namespace oat
