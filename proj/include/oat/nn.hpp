#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "oat/rng.hpp"
#include "oat/tensor.hpp"

namespace oat {

// Named parameter registry. Ids are dense and stable; value buffers never
// move once added, so tapes may borrow pointers for their lifetime.
class ParamStore {
 public:
  int add(const std::string& name, int r, int c, std::vector<double> v);
  int find(const std::string& name) const;  // -1 if absent
  Tensor leaf(Tape& t, int id) const;

  int count() const { return static_cast<int>(entries_.size()); }
  const std::string& name(int id) const { return entries_[id].name; }
  int rows(int id) const { return entries_[id].r; }
  int cols(int id) const { return entries_[id].c; }
  std::vector<double>& values(int id) { return entries_[id].v; }
  const std::vector<double>& values(int id) const { return entries_[id].v; }

 private:
  struct Entry {
    std::string name;
    int r, c;
    std::vector<double> v;
  };
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> by_name_;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 5.0;  // global grad-norm ceiling; <= 0 disables
};

class Adam {
 public:
  Adam(ParamStore& ps, AdamConfig cfg);

  // Applies one update from gradients keyed by param id; missing ids count
  // as zero. Returns the pre-clip global gradient norm.
  double step(std::unordered_map<int, std::vector<double>>& grads);

  int64_t steps_done() const { return t_; }
  void set_steps_done(int64_t t) { t_ = t; }
  std::vector<double>& m(int id) { return m_[id]; }
  std::vector<double>& v(int id) { return v_[id]; }
  void sync_new_params();  // size moment buffers after late adds

 private:
  ParamStore* ps_;
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// y = x W + b; W [in,out], b [1,out] broadcast over rows.
struct Linear {
  int w = -1, b = -1;

  // init_scale < 0: uniform(-1/sqrt(in), 1/sqrt(in)); 0: zeros (identity-at-
  // init output heads); > 0: uniform(-s, s).
  static Linear make(ParamStore& ps, const std::string& name, int in, int out,
                     Rng& rng, double init_scale = -1.0);
  Tensor apply(Tape& t, const ParamStore& ps, const Tensor& x) const;
};

// Dense layers with relu between, linear output.
struct Mlp {
  std::vector<Linear> layers;

  static Mlp make(ParamStore& ps, const std::string& name,
                  const std::vector<int>& dims, Rng& rng);
  Tensor apply(Tape& t, const ParamStore& ps, Tensor x) const;
};

// Fixed-order accumulation of gradient maps: out[pid] += in[pid].
void accumulate_grads(std::unordered_map<int, std::vector<double>>& out,
                      const std::unordered_map<int, std::vector<double>>& in);

// Reuse params by name when the store already holds them (checkpoint reload),
// otherwise create fresh ones. Shape mismatches on reuse are data errors.
Linear make_or_attach_linear(ParamStore& ps, const std::string& name, int in,
                             int out, Rng& rng, double init_scale = -1.0);
Mlp make_or_attach_mlp(ParamStore& ps, const std::string& name,
                       const std::vector<int>& dims, Rng& rng);

}  // namespace oat
