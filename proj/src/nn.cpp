#include "oat/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "oat/errors.hpp"

namespace oat {

int ParamStore::add(const std::string& name, int r, int c, std::vector<double> v) {
  if (by_name_.count(name)) throw std::invalid_argument("duplicate param: " + name);
  if (v.size() != static_cast<size_t>(r) * c)
    throw std::invalid_argument("param size mismatch: " + name);
  entries_.push_back(Entry{name, r, c, std::move(v)});
  int id = static_cast<int>(entries_.size()) - 1;
  by_name_.emplace(name, id);
  return id;
}

int ParamStore::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? -1 : it->second;
}

Tensor ParamStore::leaf(Tape& t, int id) const {
  const Entry& e = entries_.at(id);
  return t.param(e.r, e.c, e.v.data(), id);
}

Adam::Adam(ParamStore& ps, AdamConfig cfg) : ps_(&ps), cfg_(cfg) { sync_new_params(); }

void Adam::sync_new_params() {
  const int n = ps_->count();
  m_.resize(n);
  v_.resize(n);
  for (int i = 0; i < n; ++i) {
    const size_t sz = ps_->values(i).size();
    if (m_[i].size() != sz) m_[i].assign(sz, 0.0);
    if (v_[i].size() != sz) v_[i].assign(sz, 0.0);
  }
}

double Adam::step(std::unordered_map<int, std::vector<double>>& grads) {
  const int n = ps_->count();
  double sq = 0.0;
  for (int id = 0; id < n; ++id) {
    auto it = grads.find(id);
    if (it == grads.end()) continue;
    for (double g : it->second) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  double scale = 1.0;
  if (cfg_.clip > 0.0 && norm > cfg_.clip) scale = cfg_.clip / norm;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (int id = 0; id < n; ++id) {
    auto it = grads.find(id);
    std::vector<double>& th = ps_->values(id);
    std::vector<double>& mm = m_[id];
    std::vector<double>& vv = v_[id];
    for (size_t i = 0; i < th.size(); ++i) {
      const double g = (it == grads.end() ? 0.0 : it->second[i]) * scale;
      mm[i] = cfg_.beta1 * mm[i] + (1.0 - cfg_.beta1) * g;
      vv[i] = cfg_.beta2 * vv[i] + (1.0 - cfg_.beta2) * g * g;
      const double mh = mm[i] / bc1;
      const double vh = vv[i] / bc2;
      th[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
  return norm;
}

Linear Linear::make(ParamStore& ps, const std::string& name, int in, int out,
                    Rng& rng, double init_scale) {
  double s = init_scale < 0.0 ? 1.0 / std::sqrt(static_cast<double>(in)) : init_scale;
  std::vector<double> w(static_cast<size_t>(in) * out);
  for (auto& x : w) x = rng.uniform(-s, s);
  Linear l;
  l.w = ps.add(name + ".w", in, out, std::move(w));
  l.b = ps.add(name + ".b", 1, out, std::vector<double>(out, 0.0));
  return l;
}

Tensor Linear::apply(Tape& t, const ParamStore& ps, const Tensor& x) const {
  Tensor y = matmul(x, ps.leaf(t, w));
  return add(y, broadcast_row(ps.leaf(t, b), y.rows()));
}

Mlp Mlp::make(ParamStore& ps, const std::string& name,
              const std::vector<int>& dims, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("mlp needs >= 2 dims");
  Mlp m;
  for (size_t i = 0; i + 1 < dims.size(); ++i)
    m.layers.push_back(Linear::make(ps, name + ".l" + std::to_string(i), dims[i],
                                    dims[i + 1], rng));
  return m;
}

Tensor Mlp::apply(Tape& t, const ParamStore& ps, Tensor x) const {
  for (size_t i = 0; i < layers.size(); ++i) {
    x = layers[i].apply(t, ps, x);
    if (i + 1 < layers.size()) x = relu(x);
  }
  return x;
}

Linear make_or_attach_linear(ParamStore& ps, const std::string& name, int in,
                             int out, Rng& rng, double init_scale) {
  int wid = ps.find(name + ".w");
  if (wid < 0) return Linear::make(ps, name, in, out, rng, init_scale);
  Linear l;
  l.w = wid;
  l.b = ps.find(name + ".b");
  if (l.b < 0) throw DataError("param " + name + ".b missing from store");
  if (ps.rows(l.w) != in || ps.cols(l.w) != out || ps.cols(l.b) != out)
    throw DataError("param " + name + " has shape [" +
                    std::to_string(ps.rows(l.w)) + "," +
                    std::to_string(ps.cols(l.w)) + "], expected [" +
                    std::to_string(in) + "," + std::to_string(out) + "]");
  return l;
}

Mlp make_or_attach_mlp(ParamStore& ps, const std::string& name,
                       const std::vector<int>& dims, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("mlp needs >= 2 dims");
  Mlp m;
  for (size_t i = 0; i + 1 < dims.size(); ++i)
    m.layers.push_back(make_or_attach_linear(
        ps, name + ".l" + std::to_string(i), dims[i], dims[i + 1], rng));
  return m;
}

void accumulate_grads(std::unordered_map<int, std::vector<double>>& out,
                      const std::unordered_map<int, std::vector<double>>& in) {
  for (const auto& [pid, g] : in) {
    auto it = out.find(pid);
    if (it == out.end()) {
      out.emplace(pid, g);
    } else {
      std::vector<double>& acc = it->second;
      for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    }
  }
}

}  // namespace oat
