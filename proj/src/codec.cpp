#include "oat/codec.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "oat/errors.hpp"

namespace oat {

void CodecConfig::validate() const {
  if (window_w <= 0 || window_h <= 0)
    throw std::invalid_argument("window dimensions must be positive");
  if (k_slots < 1) throw std::invalid_argument("k_slots must be >= 1");
  if (feat < 1) throw std::invalid_argument("feat must be >= 1");
  if (enc_hidden < 1 || dec_hidden < 1)
    throw std::invalid_argument("hidden widths must be >= 1");
  if (!(sigma_bg > 0.0) || !(sigma_fg > 0.0))
    throw std::invalid_argument("mixture sigmas must be > 0");
  if (empty_frac < 0.0 || empty_frac > 1.0)
    throw std::invalid_argument("empty_frac must lie in [0,1]");
}

SlotCodec::SlotCodec(ParamStore& ps, const CodecConfig& cfg, Rng& rng)
    : ps_(&ps), cfg_(cfg) {
  cfg_.validate();
  const int p = cfg_.pixels();
  enc_ = make_or_attach_mlp(
      ps, "codec.enc", {4 * p, cfg_.enc_hidden, cfg_.enc_hidden, cfg_.feat},
      rng);
  dec_ = make_or_attach_mlp(ps, "codec.dec",
                            {cfg_.feat, cfg_.dec_hidden, 4 * p}, rng);
}

Tensor SlotCodec::encode(Tape& t, const float* frame,
                         const std::vector<float>& masks) const {
  const int k = cfg_.k_slots, p = cfg_.pixels();
  if (static_cast<int>(masks.size()) != k * p)
    throw DataError("encode: mask stack has " + std::to_string(masks.size()) +
                    " values, expected " + std::to_string(k) + " slots * " +
                    std::to_string(p) + " pixels");
  std::vector<double> in(static_cast<size_t>(k) * 4 * p);
  for (int s = 0; s < k; ++s) {
    double* row = in.data() + static_cast<size_t>(s) * 4 * p;
    const float* m = masks.data() + static_cast<size_t>(s) * p;
    for (int i = 0; i < p; ++i) {
      row[3 * i] = static_cast<double>(frame[3 * i]) * m[i];
      row[3 * i + 1] = static_cast<double>(frame[3 * i + 1]) * m[i];
      row[3 * i + 2] = static_cast<double>(frame[3 * i + 2]) * m[i];
      row[3 * p + i] = m[i];
    }
  }
  return enc_.apply(t, *ps_, t.constant(k, 4 * p, std::move(in)));
}

SlotDecode SlotCodec::decode(Tape& t, const Tensor& z) const {
  const int p = cfg_.pixels();
  if (z.cols() != cfg_.feat)
    throw DataError("decode: features have width " + std::to_string(z.cols()) +
                    ", expected " + std::to_string(cfg_.feat));
  const double* zv = z.tape()->val(z.id());
  for (int i = 0; i < z.rows() * z.cols(); ++i)
    if (!std::isfinite(zv[i]))
      throw NumericError("decode: non-finite feature value at index " +
                         std::to_string(i));
  Tensor out = dec_.apply(t, *ps_, z);
  return {sigmoid(slice_cols(out, 0, 3 * p)), slice_cols(out, 3 * p, 4 * p)};
}

Tensor SlotCodec::compose(const SlotDecode& d) const {
  Tensor w = softmax_rows(transpose(d.mask_logits));  // [P, K]
  return compose_mix(w, d.pixels, 3);
}

Tensor SlotCodec::mixture_loss(Tape& t, const SlotDecode& d,
                               const float* frame) const {
  const int k = d.pixels.rows(), p = cfg_.pixels();
  if (d.mask_logits.rows() != k || d.mask_logits.cols() != p ||
      d.pixels.cols() != 3 * p)
    throw DataError("mixture_loss: decoded shapes disagree with config");
  std::vector<double> fv(static_cast<size_t>(3) * p);
  for (int i = 0; i < 3 * p; ++i) fv[i] = frame[i];
  Tensor fc = t.constant(1, 3 * p, std::move(fv));

  // Per slot s and pixel: log N(frame | pixels_s, sigma_s I) =
  //   -rsq / (2 sigma_s^2) - (3/2) log(2 pi sigma_s^2).
  Tensor rsq = pixel_sq_err(d.pixels, fc, 3);  // [K, P]
  Tensor ll = scale_rows(scale_rows(rsq, 0, 1, -0.5 / (cfg_.sigma_bg * cfg_.sigma_bg)),
                         1, k, -0.5 / (cfg_.sigma_fg * cfg_.sigma_fg));
  std::vector<double> cv(static_cast<size_t>(k) * p);
  const double two_pi = 2.0 * M_PI;
  for (int s = 0; s < k; ++s) {
    const double sig = s == 0 ? cfg_.sigma_bg : cfg_.sigma_fg;
    const double c = -1.5 * std::log(two_pi * sig * sig);
    std::fill_n(cv.data() + static_cast<size_t>(s) * p, p, c);
  }
  ll = add(ll, t.constant(k, p, std::move(cv)));

  Tensor lw = log_softmax_rows(transpose(d.mask_logits));   // [P, K]
  Tensor lse = logsumexp_rows(add(lw, transpose(ll)));      // [P, 1]
  return scale(sum(lse), -1.0);
}

std::vector<float> slot_mask_stack(const Trajectory& tr, int step) {
  const int p = tr.w * tr.h;
  std::vector<float> out(static_cast<size_t>(tr.n_obj + 1) * p, 0.0f);
  for (int i = 0; i < p; ++i) out[i] = 1.0f;
  for (int o = 0; o < tr.n_obj; ++o) {
    const float* m = tr.mask(step, o);
    float* dst = out.data() + static_cast<size_t>(o + 1) * p;
    for (int i = 0; i < p; ++i) {
      dst[i] = m[i];
      out[i] -= m[i];  // object masks are disjoint, so this stays in {0,1}
    }
  }
  return out;
}

std::vector<uint8_t> empty_slot_flags(const float* masks, int k, int p,
                                      double threshold) {
  std::vector<uint8_t> flags(k);
  for (int s = 0; s < k; ++s) {
    double mass = 0.0;
    const float* m = masks + static_cast<size_t>(s) * p;
    for (int i = 0; i < p; ++i) mass += m[i];
    flags[s] = mass < threshold ? 1 : 0;
  }
  return flags;
}

std::vector<std::vector<int>> slot_shuffle(int steps, int k, const Rng& root) {
  std::vector<std::vector<int>> perms(steps);
  for (int t = 0; t < steps; ++t) {
    perms[t].resize(k);
    std::iota(perms[t].begin(), perms[t].end(), 0);
    Rng r = root.stream("shuffle", static_cast<uint64_t>(t));
    r.shuffle(perms[t]);
  }
  return perms;
}

}  // namespace oat
