#pragma once

#include <cmath>
#include <complex>
#include <numbers>

#include "bfly/tensor.hpp"

namespace bfly {

// ---------------------------------------------------------------------------
// Permutation
// ---------------------------------------------------------------------------

// map[i] is the source index for output slot i: out[i] = in[map[i]].
struct Permutation {
  std::vector<index_t> map;

  index_t size() const { return static_cast<index_t>(map.size()); }

  static Permutation identity(index_t n) {
    Permutation p;
    p.map.resize(static_cast<std::size_t>(n));
    for (index_t i = 0; i < n; ++i) p.map[static_cast<std::size_t>(i)] = i;
    return p;
  }

  static Permutation random(index_t n, Rng& rng) {
    Permutation p = identity(n);
    for (index_t i = n - 1; i > 0; --i) {
      const index_t j = static_cast<index_t>(rng.bounded(static_cast<std::uint64_t>(i + 1)));
      std::swap(p.map[static_cast<std::size_t>(i)], p.map[static_cast<std::size_t>(j)]);
    }
    return p;
  }

  bool is_bijection() const {
    std::vector<bool> seen(map.size(), false);
    for (const index_t s : map) {
      if (s < 0 || s >= size() || seen[static_cast<std::size_t>(s)]) return false;
      seen[static_cast<std::size_t>(s)] = true;
    }
    return true;
  }

  Permutation inverse() const {
    Permutation inv;
    inv.map.resize(map.size());
    for (index_t i = 0; i < size(); ++i) inv.map[static_cast<std::size_t>(map[static_cast<std::size_t>(i)])] = i;
    return inv;
  }

  template <typename T>
  void apply(std::span<const T> in, std::span<T> out) const {
    for (index_t i = 0; i < size(); ++i)
      out[static_cast<std::size_t>(i)] = in[static_cast<std::size_t>(map[static_cast<std::size_t>(i)])];
  }

  template <typename T>
  Matrix<T> to_matrix() const {
    Matrix<T> p(size(), size());
    for (index_t i = 0; i < size(); ++i) p(i, map[static_cast<std::size_t>(i)]) = T{1};
    return p;
  }
};

// map[i] == i with its log2(n) bits reversed; this is the permutation produced
// by recursively splitting even and odd indices.
Permutation bit_reversal_permutation(index_t n);

// ---------------------------------------------------------------------------
// Butterfly layer
// ---------------------------------------------------------------------------

// One mixing pass at a fixed stride. coeffs holds n/2 records (a, b, c, d),
// one per index pair (i, i + stride), flattened as 4 consecutive scalars.
// Pairs are enumerated base-major: base in steps of 2*stride, offset 0..stride.
template <typename T>
struct ButterflyLevel {
  index_t stride = 1;
  std::vector<T> coeffs;
};

// n = 2^k; the operator is (product of the k levels, increasing stride) times
// the permutation, i.e. apply() permutes first and then runs the levels.
template <typename T>
struct ButterflyLayer {
  index_t n = 1;
  std::vector<ButterflyLevel<T>> levels;
  Permutation perm;
  std::vector<T> bias;  // empty or length n

  // learnable mixing coefficients; 2 * n * log2(n), bias excluded
  index_t param_count() const {
    index_t c = 0;
    for (const auto& lvl : levels) c += static_cast<index_t>(lvl.coeffs.size());
    return c;
  }
};

enum class ButterflyInit { Identity, Givens, UniformScaled };

// Identity: (1,0,0,1) pairs, identity permutation.
// Givens: per-pair rotation (cos t, sin t, -sin t, cos t), t ~ U[0, 2pi),
//         identity permutation; the reconstructed operator is orthogonal.
// UniformScaled: coeffs ~ U(-1/sqrt(2), 1/sqrt(2)), bit-reversal permutation.
template <typename T>
ButterflyLayer<T> butterfly_new(index_t n, ButterflyInit init, Rng& rng);

// y = levels(perm(x)) + bias, k in-place passes of 2x2 pair mixing.
// Counter: 4 multiplies per pair, 2*n*log2(n) per vector in total.
template <typename T>
Matrix<T> butterfly_apply(const ButterflyLayer<T>& layer, const Matrix<T>& x_batch);

template <typename T>
std::vector<T> butterfly_apply(const ButterflyLayer<T>& layer, const std::vector<T>& x);

// Per-level activations captured by butterfly_forward for the backward pass.
// level_inputs[l] is the batch fed into level l (l == 0 is post-permutation).
template <typename T>
struct ButterflyCache {
  std::vector<Matrix<T>> level_inputs;
};

template <typename T>
Matrix<T> butterfly_forward(const ButterflyLayer<T>& layer, const Matrix<T>& x_batch,
                            ButterflyCache<T>& cache);

template <typename T>
struct ButterflyGrads {
  std::vector<std::vector<T>> level_coeffs;  // mirrors layer.levels[l].coeffs
  Matrix<T> input;                           // dL/dx, batch-shaped
  std::vector<T> bias;                       // empty if the layer has no bias
};

// Analytic gradients. Per pair at each level: da = sum dy_i*x_i, db = sum
// dy_i*x_j, dc = sum dy_j*x_i, dd = sum dy_j*x_j with x the cached level
// input; the input gradient runs the transposed pairs and finally the inverse
// permutation. Batch reduction order is fixed (ascending chunk, ascending row).
template <typename T>
ButterflyGrads<T> butterfly_backward(const ButterflyLayer<T>& layer, const ButterflyCache<T>& cache,
                                     const Matrix<T>& upstream);

// T_N = (B_k ... B_1) * P as an explicit dense matrix, built from per-level
// factor matrices multiplied with the core matmul. This is the oracle route:
// it shares no code with the streaming apply.
template <typename T>
Matrix<T> dense_reconstruct(const ButterflyLayer<T>& layer);

template <typename T>
Matrix<T> level_matrix(const ButterflyLevel<T>& level, index_t n);

// ---------------------------------------------------------------------------
// FFT specialization
// ---------------------------------------------------------------------------

enum class FftDirection { Forward, Inverse };

// Butterfly layer computing the unnormalized DFT: bit-reversal permutation and
// per-pair twiddles (1, w, 1, -w), w = exp(-2*pi*i*offset / (2*stride)).
// Inverse uses conjugate twiddles; inverse(forward(x)) == n * x.
ButterflyLayer<std::complex<double>> fft_configure(index_t n,
                                                   FftDirection dir = FftDirection::Forward);

// ---------------------------------------------------------------------------
// implementation (templates)
// ---------------------------------------------------------------------------

namespace detail {

// Shared pair walk: fn(pair_index, i, j) over all n/2 pairs of one level.
template <class Fn>
inline void for_each_pair(index_t n, index_t stride, Fn&& fn) {
  index_t p = 0;
  for (index_t base = 0; base < n; base += 2 * stride)
    for (index_t off = 0; off < stride; ++off, ++p) fn(p, base + off, base + off + stride);
}

template <typename T>
void require_pow2(index_t n, const char* who) {
  if (!is_pow2(n))
    throw std::invalid_argument(std::string(who) + ": size must be a power of two, got " +
                                std::to_string(n));
}

}  // namespace detail

template <typename T>
ButterflyLayer<T> butterfly_new(index_t n, ButterflyInit init, Rng& rng) {
  detail::require_pow2<T>(n, "butterfly_new");
  ButterflyLayer<T> layer;
  layer.n = n;
  layer.perm =
      init == ButterflyInit::UniformScaled ? bit_reversal_permutation(n) : Permutation::identity(n);
  const int k = log2_int(n);
  layer.levels.resize(static_cast<std::size_t>(k));
  for (int l = 0; l < k; ++l) {
    auto& lvl = layer.levels[static_cast<std::size_t>(l)];
    lvl.stride = index_t{1} << l;
    lvl.coeffs.resize(static_cast<std::size_t>(2 * n));
    detail::for_each_pair(n, lvl.stride, [&](index_t p, index_t, index_t) {
      T* rec = lvl.coeffs.data() + 4 * p;
      switch (init) {
        case ButterflyInit::Identity:
          rec[0] = T{1};
          rec[1] = T{0};
          rec[2] = T{0};
          rec[3] = T{1};
          break;
        case ButterflyInit::Givens: {
          const double t = rng.uniform(0.0, 2.0 * M_PI);
          rec[0] = static_cast<T>(std::cos(t));
          rec[1] = static_cast<T>(std::sin(t));
          rec[2] = static_cast<T>(-std::sin(t));
          rec[3] = static_cast<T>(std::cos(t));
          break;
        }
        case ButterflyInit::UniformScaled: {
          const double s = 1.0 / std::sqrt(2.0);
          for (int q = 0; q < 4; ++q) rec[q] = static_cast<T>(rng.uniform(-s, s));
          break;
        }
      }
    });
  }
  return layer;
}

namespace detail {

// One sample: permute into y, then run the level passes in place.
template <typename T>
inline void apply_one(const ButterflyLayer<T>& layer, std::span<const T> x, std::span<T> y) {
  layer.perm.apply(x, y);
  for (const auto& lvl : layer.levels) {
    for_each_pair(layer.n, lvl.stride, [&](index_t p, index_t i, index_t j) {
      const T* rec = lvl.coeffs.data() + 4 * p;
      const T xi = y[static_cast<std::size_t>(i)];
      const T xj = y[static_cast<std::size_t>(j)];
      y[static_cast<std::size_t>(i)] = rec[0] * xi + rec[1] * xj;
      y[static_cast<std::size_t>(j)] = rec[2] * xi + rec[3] * xj;
    });
  }
  if (!layer.bias.empty())
    for (index_t i = 0; i < layer.n; ++i) y[static_cast<std::size_t>(i)] += layer.bias[static_cast<std::size_t>(i)];
}

}  // namespace detail

template <typename T>
Matrix<T> butterfly_apply(const ButterflyLayer<T>& layer, const Matrix<T>& x_batch) {
  if (x_batch.cols != layer.n)
    throw std::invalid_argument("butterfly_apply: vector length " + std::to_string(x_batch.cols) +
                                " != layer size " + std::to_string(layer.n));
  Matrix<T> y(x_batch.rows, layer.n);
  parallel_for(x_batch.rows, [&](index_t r0, index_t r1) {
    for (index_t s = r0; s < r1; ++s) detail::apply_one(layer, x_batch.row(s), y.row(s));
  });
  flops::add(static_cast<std::uint64_t>(x_batch.rows) * 2ull *
             static_cast<std::uint64_t>(layer.n) * static_cast<std::uint64_t>(layer.levels.size()));
  return y;
}

template <typename T>
std::vector<T> butterfly_apply(const ButterflyLayer<T>& layer, const std::vector<T>& x) {
  Matrix<T> xb(1, static_cast<index_t>(x.size()));
  xb.data = x;
  return butterfly_apply(layer, xb).data;
}

template <typename T>
Matrix<T> butterfly_forward(const ButterflyLayer<T>& layer, const Matrix<T>& x_batch,
                            ButterflyCache<T>& cache) {
  if (x_batch.cols != layer.n)
    throw std::invalid_argument("butterfly_forward: vector length " + std::to_string(x_batch.cols) +
                                " != layer size " + std::to_string(layer.n));
  const index_t batch = x_batch.rows;
  cache.level_inputs.assign(layer.levels.size(), Matrix<T>());
  Matrix<T> cur(batch, layer.n);
  for (index_t s = 0; s < batch; ++s) layer.perm.apply(x_batch.row(s), cur.row(s));
  for (std::size_t l = 0; l < layer.levels.size(); ++l) {
    cache.level_inputs[l] = cur;
    const auto& lvl = layer.levels[l];
    for (index_t s = 0; s < batch; ++s) {
      auto row = cur.row(s);
      detail::for_each_pair(layer.n, lvl.stride, [&](index_t p, index_t i, index_t j) {
        const T* rec = lvl.coeffs.data() + 4 * p;
        const T xi = row[static_cast<std::size_t>(i)];
        const T xj = row[static_cast<std::size_t>(j)];
        row[static_cast<std::size_t>(i)] = rec[0] * xi + rec[1] * xj;
        row[static_cast<std::size_t>(j)] = rec[2] * xi + rec[3] * xj;
      });
    }
  }
  if (!layer.bias.empty())
    for (index_t s = 0; s < batch; ++s) {
      auto row = cur.row(s);
      for (index_t i = 0; i < layer.n; ++i) row[static_cast<std::size_t>(i)] += layer.bias[static_cast<std::size_t>(i)];
    }
  flops::add(static_cast<std::uint64_t>(batch) * 2ull * static_cast<std::uint64_t>(layer.n) *
             static_cast<std::uint64_t>(layer.levels.size()));
  return cur;
}

template <typename T>
ButterflyGrads<T> butterfly_backward(const ButterflyLayer<T>& layer, const ButterflyCache<T>& cache,
                                     const Matrix<T>& upstream) {
  if (upstream.cols != layer.n)
    throw std::invalid_argument("butterfly_backward: upstream width " +
                                std::to_string(upstream.cols) + " != layer size " +
                                std::to_string(layer.n));
  if (cache.level_inputs.size() != layer.levels.size())
    throw std::invalid_argument("butterfly_backward: cache does not match layer (run butterfly_forward first)");
  for (const auto& li : cache.level_inputs)
    if (li.rows != upstream.rows)
      throw std::invalid_argument("butterfly_backward: cached batch size does not match upstream");

  const index_t batch = upstream.rows;
  ButterflyGrads<T> g;
  g.level_coeffs.resize(layer.levels.size());
  for (std::size_t l = 0; l < layer.levels.size(); ++l)
    g.level_coeffs[l].assign(layer.levels[l].coeffs.size(), T{});
  if (!layer.bias.empty()) {
    g.bias.assign(static_cast<std::size_t>(layer.n), T{});
    for (index_t s = 0; s < batch; ++s)
      for (index_t i = 0; i < layer.n; ++i) g.bias[static_cast<std::size_t>(i)] += upstream(s, i);
  }

  Matrix<T> d = upstream;
  for (std::size_t li = layer.levels.size(); li-- > 0;) {
    const auto& lvl = layer.levels[li];
    const Matrix<T>& xin = cache.level_inputs[li];
    auto& cg = g.level_coeffs[li];
    for (index_t s = 0; s < batch; ++s) {
      auto drow = d.row(s);
      const auto xrow = xin.row(s);
      detail::for_each_pair(layer.n, lvl.stride, [&](index_t p, index_t i, index_t j) {
        const T* rec = lvl.coeffs.data() + 4 * p;
        const T dyi = drow[static_cast<std::size_t>(i)];
        const T dyj = drow[static_cast<std::size_t>(j)];
        const T xi = xrow[static_cast<std::size_t>(i)];
        const T xj = xrow[static_cast<std::size_t>(j)];
        T* grec = cg.data() + 4 * p;
        grec[0] += dyi * xi;
        grec[1] += dyi * xj;
        grec[2] += dyj * xi;
        grec[3] += dyj * xj;
        drow[static_cast<std::size_t>(i)] = rec[0] * dyi + rec[2] * dyj;
        drow[static_cast<std::size_t>(j)] = rec[1] * dyi + rec[3] * dyj;
      });
    }
  }

  // undo the input permutation: forward read in[map[i]] into slot i
  g.input = Matrix<T>(batch, layer.n);
  for (index_t s = 0; s < batch; ++s) {
    const auto drow = d.row(s);
    auto out = g.input.row(s);
    for (index_t i = 0; i < layer.n; ++i)
      out[static_cast<std::size_t>(layer.perm.map[static_cast<std::size_t>(i)])] =
          drow[static_cast<std::size_t>(i)];
  }
  return g;
}

template <typename T>
Matrix<T> level_matrix(const ButterflyLevel<T>& level, index_t n) {
  Matrix<T> m(n, n);
  detail::for_each_pair(n, level.stride, [&](index_t p, index_t i, index_t j) {
    const T* rec = level.coeffs.data() + 4 * p;
    m(i, i) = rec[0];
    m(i, j) = rec[1];
    m(j, i) = rec[2];
    m(j, j) = rec[3];
  });
  return m;
}

template <typename T>
Matrix<T> dense_reconstruct(const ButterflyLayer<T>& layer) {
  Matrix<T> acc = layer.perm.template to_matrix<T>();
  for (const auto& lvl : layer.levels) acc = matmul(level_matrix(lvl, layer.n), acc);
  return acc;
}

}  // namespace bfly
