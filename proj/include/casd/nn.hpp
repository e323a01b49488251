#pragma once

#include <cstdio>
#include <fstream>
#include <unordered_map>

#include "casd/ops.hpp"

namespace casd {

enum class Init { Normal002, Zero, One };

// Ordered name -> parameter map. Registration order is the iteration order,
// so initialization from a seed is reproducible bit for bit.
template <typename T>
struct ParameterStore {
  std::vector<std::pair<std::string, Tensor<T>>> items;
  std::unordered_map<std::string, size_t> index;
  uint64_t rng_seed = 0;
  Rng rng{0};

  explicit ParameterStore(uint64_t seed = 0) : rng_seed(seed), rng(seed) {}

  Tensor<T>& add(const std::string& name, Shape shape, Init init, bool trainable = true) {
    if (index.count(name)) fail("parameter '" + name + "' registered twice");
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    switch (init) {
      case Init::Normal002:
        for (auto& v : *t.data) v = T(rng.normal(0.0, 0.02));
        break;
      case Init::Zero:
        break;
      case Init::One:
        std::fill(t.data->begin(), t.data->end(), T(1));
        break;
    }
    t.set_requires_grad(trainable);
    index[name] = items.size();
    items.emplace_back(name, std::move(t));
    return items.back().second;
  }

  bool has(const std::string& name) const { return index.count(name) != 0; }

  Tensor<T>& operator[](const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) fail("unknown parameter '" + name + "'");
    return items[it->second].second;
  }

  void zero_grads() {
    for (auto& [n, t] : items) t.zero_grad();
  }

  int64_t count() const {
    int64_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }
};

// ---- Adam ----

// beta1 = 0.5 (GAN-style), beta2 = 0.999. Grads are zeroed after the update.
template <typename T>
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-5;
  int64_t step_count = 0;
  std::vector<std::vector<T>> m, v;

  void step(ParameterStore<T>& params) {
    if (m.empty()) {
      m.resize(params.items.size());
      v.resize(params.items.size());
      for (size_t i = 0; i < params.items.size(); ++i) {
        m[i].assign(size_t(params.items[i].second.numel()), T(0));
        v[i].assign(size_t(params.items[i].second.numel()), T(0));
      }
    }
    ++step_count;
    double bc1 = 1.0 - std::pow(beta1, double(step_count));
    double bc2 = 1.0 - std::pow(beta2, double(step_count));
    for (size_t i = 0; i < params.items.size(); ++i) {
      Tensor<T>& p = params.items[i].second;
      if (!p.grad) fail("adam: parameter '" + params.items[i].first + "' has no gradient");
      T* w = p.ptr();
      T* g = p.grad->data();
      T* mi = m[i].data();
      T* vi = v[i].data();
      for (int64_t j = 0; j < p.numel(); ++j) {
        if (!std::isfinite(double(g[j])))
          fail("adam: non-finite gradient in '" + params.items[i].first + "'");
        mi[j] = T(beta1) * mi[j] + T(1 - beta1) * g[j];
        vi[j] = T(beta2) * vi[j] + T(1 - beta2) * g[j] * g[j];
        double mhat = double(mi[j]) / bc1;
        double vhat = double(vi[j]) / bc2;
        w[j] = T(double(w[j]) - lr * mhat / (std::sqrt(vhat) + eps));
        g[j] = T(0);
      }
    }
  }
};

// ---- checkpoint io ----
// magic "CASD", u32 version, then per-parameter records:
//   u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//   u32 rank, u64 extents, raw little-endian values.

namespace ckpt {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8), (unsigned char)(v >> 16),
                        (unsigned char)(v >> 24)};
  os.write((const char*)b, 4);
}
inline void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
  os.write((const char*)b, 8);
}
inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read((char*)b, 4);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}
inline uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read((char*)b, 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
  return v;
}

template <typename S>
void put_values(std::ostream& os, const std::vector<S>& vals) {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8);
  // serialize little-endian regardless of host order
  for (S v : vals) {
    if constexpr (sizeof(S) == 4) {
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(os, bits);
    } else {
      uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_u64(os, bits);
    }
  }
}

}  // namespace ckpt

template <typename T>
void save_checkpoint(const ParameterStore<T>& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("cannot write checkpoint '" + path + "'");
  os.write("CASD", 4);
  ckpt::put_u32(os, 1u);
  for (const auto& [name, t] : params.items) {
    ckpt::put_u32(os, uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    os.put(sizeof(T) == 4 ? char(0) : char(1));
    ckpt::put_u32(os, uint32_t(t.shape.size()));
    for (int d : t.shape) ckpt::put_u64(os, uint64_t(d));
    ckpt::put_values(os, *t.data);
  }
  if (!os) fail("write failure on checkpoint '" + path + "'");
}

template <typename T>
void load_checkpoint(ParameterStore<T>& params, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open checkpoint '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CASD", 4) != 0) fail("'" + path + "' is not a checkpoint file");
  uint32_t version = ckpt::get_u32(is);
  if (version != 1u) fail("unsupported checkpoint version " + std::to_string(version));
  size_t loaded = 0;
  while (true) {
    uint32_t nlen = ckpt::get_u32(is);
    if (is.eof() || !is) break;
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    int dtype = is.get();
    uint32_t rank = ckpt::get_u32(is);
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = int(ckpt::get_u64(is));
    int64_t n = numel_of(shape);
    std::vector<double> vals(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      if (dtype == 0) {
        uint32_t bits = ckpt::get_u32(is);
        float f;
        std::memcpy(&f, &bits, 4);
        vals[size_t(i)] = f;
      } else {
        uint64_t bits = ckpt::get_u64(is);
        double f;
        std::memcpy(&f, &bits, 8);
        vals[size_t(i)] = f;
      }
    }
    if (!is) fail("truncated checkpoint '" + path + "'");
    if (!params.has(name)) fail("checkpoint parameter '" + name + "' not present in this model");
    Tensor<T>& t = params[name];
    if (t.shape != shape)
      fail("checkpoint parameter '" + name + "' has shape " + shape_str(shape) + ", model expects " +
           shape_str(t.shape));
    for (int64_t i = 0; i < n; ++i) (*t.data)[size_t(i)] = T(vals[size_t(i)]);
    ++loaded;
  }
  if (loaded != params.items.size())
    fail("checkpoint '" + path + "' holds " + std::to_string(loaded) + " parameters, model expects " +
         std::to_string(params.items.size()));
}

// ---- layers ----

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  int stride = 1;

  Conv2dLayer() = default;
  Conv2dLayer(ParameterStore<T>& ps, const std::string& name, int kh, int kw, int cin, int cout,
              int stride_, bool trainable = true)
      : stride(stride_) {
    w = ps.add(name + ".w", {kh, kw, cin, cout}, Init::Normal002, trainable);
    b = ps.add(name + ".b", {cout}, Init::Zero, trainable);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::conv2d(x, w, b, stride); }
};

template <typename T>
struct LinearLayer {
  Tensor<T> w, b;

  LinearLayer() = default;
  LinearLayer(ParameterStore<T>& ps, const std::string& name, int in, int out, bool bias = true) {
    w = ps.add(name + ".w", {in, out}, Init::Normal002);
    if (bias) b = ps.add(name + ".b", {out}, Init::Zero);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, w, b); }
};

// ---- normalization primitives ----

namespace norm {

// statistics over `axes`, normalized to zero mean / unit variance
template <typename T>
Tensor<T> standardize(const Tensor<T>& x, const std::vector<int>& axes, T eps) {
  using namespace ops;
  Tensor<T> mu = reduce_mean(x, axes, true);
  Tensor<T> xm = sub(x, mu);
  Tensor<T> var = reduce_mean(mul(xm, xm), axes, true);
  return div(xm, sqrt_op(add_scalar(var, eps)));
}

}  // namespace norm

// per-(sample, channel) spatial statistics on (B,H,W,C); eps = 1e-5
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  if (x.rank() == 4) return norm::standardize(x, {1, 2}, eps);
  if (x.rank() == 3) return norm::standardize(x, {1}, eps);  // tokens: per channel over the set
  fail("instance_norm: expected rank 3 or 4, got " + shape_str(x.shape));
}

// per-sample statistics over all remaining axes
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  if (x.rank() == 4) return norm::standardize(x, {1, 2, 3}, eps);
  if (x.rank() == 3) return norm::standardize(x, {2}, eps);  // tokens: per token over channels
  fail("layer_norm: expected rank 3 or 4, got " + shape_str(x.shape));
}

// instance norm with a learnable per-channel affine
template <typename T>
struct InstanceNorm {
  Tensor<T> gamma, beta;

  InstanceNorm() = default;
  InstanceNorm(ParameterStore<T>& ps, const std::string& name, int channels, bool trainable = true) {
    gamma = ps.add(name + ".g", {channels}, Init::One, trainable);
    beta = ps.add(name + ".b", {channels}, Init::Zero, trainable);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    using namespace ops;
    Shape bs(x.rank(), 1);
    bs.back() = gamma.shape[0];
    return add(mul(instance_norm(x), reshape(gamma, bs)), reshape(beta, bs));
  }
};

// layer norm with a learnable per-channel affine (decoder "LN" layers)
template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& ps, const std::string& name, int channels) {
    gamma = ps.add(name + ".g", {channels}, Init::One);
    beta = ps.add(name + ".b", {channels}, Init::Zero);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    using namespace ops;
    Shape bs(x.rank(), 1);
    bs.back() = gamma.shape[0];
    return add(mul(layer_norm(x), reshape(gamma, bs)), reshape(beta, bs));
  }
};

// Gated blend of layer and instance normalization used inside attention
// blocks: rho * LN(x) + (1 - rho) * IN(x), each branch with its own affine.
// rho = sigmoid(logit), logit starts at 0 so the blend starts balanced.
template <typename T>
struct SwLin {
  Tensor<T> rho_logit;
  Tensor<T> g_ln, b_ln, g_in, b_in;

  SwLin() = default;
  SwLin(ParameterStore<T>& ps, const std::string& name, int channels, bool trainable = true) {
    rho_logit = ps.add(name + ".rho", {1}, Init::Zero, trainable);
    g_ln = ps.add(name + ".ln.g", {channels}, Init::One, trainable);
    b_ln = ps.add(name + ".ln.b", {channels}, Init::Zero, trainable);
    g_in = ps.add(name + ".in.g", {channels}, Init::One, trainable);
    b_in = ps.add(name + ".in.b", {channels}, Init::Zero, trainable);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    using namespace ops;
    Shape bs(x.rank(), 1);
    bs.back() = g_ln.shape[0];
    Tensor<T> ln = add(mul(layer_norm(x), reshape(g_ln, bs)), reshape(b_ln, bs));
    Tensor<T> in = add(mul(instance_norm(x), reshape(g_in, bs)), reshape(b_in, bs));
    Tensor<T> rho = sigmoid(rho_logit);
    Shape rs(x.rank(), 1);
    Tensor<T> r = reshape(rho, rs);
    return add(mul(r, ln), mul(add_scalar(neg(r), T(1)), in));
  }
};

// adaptive instance norm: parameter-free IN scaled/shifted by style-derived
// per-channel (gamma, beta); gamma/beta are (B,C)
template <typename T>
Tensor<T> adain(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  using namespace ops;
  if (x.rank() != 4) fail("adain: expected (B,H,W,C), got " + shape_str(x.shape));
  int B = x.shape[0], C = x.shape[3];
  if (gamma.shape != Shape{B, C} || beta.shape != Shape{B, C})
    fail("adain: modulation must be (B,C) = (" + std::to_string(B) + "," + std::to_string(C) +
         "), got " + shape_str(gamma.shape));
  Tensor<T> g = reshape(gamma, {B, 1, 1, C});
  Tensor<T> b = reshape(beta, {B, 1, 1, C});
  return add(mul(instance_norm(x), g), b);
}

}  // namespace casd
