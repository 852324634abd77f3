#pragma once

#include "bfly/tensor.hpp"

namespace bfly {

// ---------------------------------------------------------------------------
// Flat block butterfly mask
// ---------------------------------------------------------------------------

// Support of the flattened block butterfly on an m x m block grid (m = n/b):
// the diagonal plus one XOR band per retained stride,
//   {(i, i)} u {(i, i XOR 2^t) : 0 <= t < levels},
// which equals the union of the block-level butterfly factor supports when
// levels == log2(m). Stored sorted by (block_row, block_col).
struct BlockButterflyMask {
  index_t n = 0;
  index_t block = 0;
  index_t grid = 0;  // m = n / block, power of two
  int levels = 0;    // XOR bands retained, 0..log2(m)
  std::vector<std::pair<index_t, index_t>> support;

  index_t scalar_nnz() const {
    return static_cast<index_t>(support.size()) * block * block;
  }
};

// levels == -1 keeps all log2(m) bands. Throws when block does not divide n,
// n/block is not a power of two, or levels is out of range.
BlockButterflyMask build_mask(index_t n, index_t block, int levels = -1);

// ---------------------------------------------------------------------------
// Pixelfly layer: sparse values on the mask support plus a low-rank term
// ---------------------------------------------------------------------------

// sparse_values holds one b x b row-major block per support entry, in support
// order. low_rank_u is n x r and low_rank_v is r x n; r == 0 leaves them empty.
template <typename T>
struct PixelflyLayer {
  index_t n = 0;
  BlockButterflyMask mask;
  std::vector<T> sparse_values;
  Matrix<T> low_rank_u;
  Matrix<T> low_rank_v;
  std::vector<T> bias;  // empty or length n

  index_t rank() const { return low_rank_u.empty() ? 0 : low_rank_u.cols; }

  // mask nnz + 2*n*r, bias excluded
  index_t param_count() const {
    return mask.scalar_nnz() + 2 * n * rank();
  }
};

enum class PixelflyInit { Zero, Uniform };

// Uniform: sparse values ~ U(-1/sqrt(fan), 1/sqrt(fan)) with fan the per-row
// scalar nnz, U and V ~ U(-1/sqrt(n), 1/sqrt(n)).
template <typename T>
PixelflyLayer<T> pixelfly_new(index_t n, index_t block, index_t rank, PixelflyInit init, Rng& rng,
                              int levels = -1);

// y = S x + U (V x) + bias; the sparse multiply walks support blocks with a
// dense b x b block-times-subvector kernel.
template <typename T>
Matrix<T> pixelfly_apply(const PixelflyLayer<T>& layer, const Matrix<T>& x_batch);

template <typename T>
std::vector<T> pixelfly_apply(const PixelflyLayer<T>& layer, const std::vector<T>& x);

template <typename T>
struct PixelflyCache {
  Matrix<T> x;  // layer input
  Matrix<T> z;  // V x, empty when rank == 0
};

template <typename T>
Matrix<T> pixelfly_forward(const PixelflyLayer<T>& layer, const Matrix<T>& x_batch,
                           PixelflyCache<T>& cache);

template <typename T>
struct PixelflyGrads {
  std::vector<T> sparse_values;  // same support layout as the layer
  Matrix<T> low_rank_u;
  Matrix<T> low_rank_v;
  std::vector<T> bias;
  Matrix<T> input;
};

// dS restricted to the mask support; dU = dy (Vx)^T and dV = (U^T dy) x^T
// summed over the batch in ascending order; dx = S^T dy + V^T (U^T dy).
template <typename T>
PixelflyGrads<T> pixelfly_backward(const PixelflyLayer<T>& layer, const PixelflyCache<T>& cache,
                                   const Matrix<T>& upstream);

// S + U V as a dense n x n matrix (oracle route for apply).
template <typename T>
Matrix<T> dense_reconstruct_pixelfly(const PixelflyLayer<T>& layer);

// ---------------------------------------------------------------------------
// implementation (templates)
// ---------------------------------------------------------------------------

template <typename T>
PixelflyLayer<T> pixelfly_new(index_t n, index_t block, index_t rank, PixelflyInit init, Rng& rng,
                              int levels) {
  if (rank < 0 || rank > n)
    throw std::invalid_argument("pixelfly_new: rank must be in [0, n], got " +
                                std::to_string(rank));
  PixelflyLayer<T> layer;
  layer.n = n;
  layer.mask = build_mask(n, block, levels);
  layer.sparse_values.assign(static_cast<std::size_t>(layer.mask.scalar_nnz()), T{});
  if (init == PixelflyInit::Uniform) {
    const double fan = static_cast<double>(block) * (1 + layer.mask.levels);
    const double s = 1.0 / std::sqrt(fan);
    for (auto& v : layer.sparse_values) v = static_cast<T>(rng.uniform(-s, s));
  }
  if (rank > 0) {
    layer.low_rank_u = Matrix<T>(n, rank);
    layer.low_rank_v = Matrix<T>(rank, n);
    const double s = 1.0 / std::sqrt(static_cast<double>(n));
    if (init == PixelflyInit::Uniform) {
      for (auto& v : layer.low_rank_u.data) v = static_cast<T>(rng.uniform(-s, s));
      for (auto& v : layer.low_rank_v.data) v = static_cast<T>(rng.uniform(-s, s));
    }
  }
  return layer;
}

namespace detail {

template <typename T>
void pixelfly_sparse_apply_one(const PixelflyLayer<T>& layer, std::span<const T> x,
                               std::span<T> y) {
  const index_t b = layer.mask.block;
  for (std::size_t k = 0; k < layer.mask.support.size(); ++k) {
    const auto [bi, bj] = layer.mask.support[k];
    const T* vals = layer.sparse_values.data() + k * static_cast<std::size_t>(b) * static_cast<std::size_t>(b);
    const T* xseg = x.data() + bj * b;
    T* yseg = y.data() + bi * b;
    for (index_t r = 0; r < b; ++r) {
      T acc{};
      const T* vrow = vals + r * b;
      for (index_t c = 0; c < b; ++c) acc += vrow[c] * xseg[c];
      yseg[r] += acc;
    }
  }
}

// transposed block walk for the input gradient: dx += S^T dy
template <typename T>
void pixelfly_sparse_apply_transposed_one(const PixelflyLayer<T>& layer, std::span<const T> dy,
                                          std::span<T> dx) {
  const index_t b = layer.mask.block;
  for (std::size_t k = 0; k < layer.mask.support.size(); ++k) {
    const auto [bi, bj] = layer.mask.support[k];
    const T* vals = layer.sparse_values.data() + k * static_cast<std::size_t>(b) * static_cast<std::size_t>(b);
    const T* dseg = dy.data() + bi * b;
    T* xseg = dx.data() + bj * b;
    for (index_t r = 0; r < b; ++r) {
      const T d = dseg[r];
      const T* vrow = vals + r * b;
      for (index_t c = 0; c < b; ++c) xseg[c] += vrow[c] * d;
    }
  }
}

}  // namespace detail

template <typename T>
Matrix<T> pixelfly_forward(const PixelflyLayer<T>& layer, const Matrix<T>& x_batch,
                           PixelflyCache<T>& cache) {
  if (x_batch.cols != layer.n)
    throw std::invalid_argument("pixelfly: vector length " + std::to_string(x_batch.cols) +
                                " != layer size " + std::to_string(layer.n));
  const index_t batch = x_batch.rows;
  const index_t r = layer.rank();
  cache.x = x_batch;
  Matrix<T> y(batch, layer.n);
  parallel_for(batch, [&](index_t s0, index_t s1) {
    for (index_t s = s0; s < s1; ++s)
      detail::pixelfly_sparse_apply_one(layer, x_batch.row(s), y.row(s));
  });
  if (r > 0) {
    // z = x V^T row-wise == V x per sample
    cache.z = Matrix<T>(batch, r);
    parallel_for(batch, [&](index_t s0, index_t s1) {
      for (index_t s = s0; s < s1; ++s) {
        const auto x = x_batch.row(s);
        auto z = cache.z.row(s);
        for (index_t q = 0; q < r; ++q) {
          T acc{};
          const T* vrow = layer.low_rank_v.data.data() + static_cast<std::size_t>(q) * layer.n;
          for (index_t c = 0; c < layer.n; ++c) acc += vrow[c] * x[static_cast<std::size_t>(c)];
          z[static_cast<std::size_t>(q)] = acc;
        }
        auto yrow = y.row(s);
        for (index_t i = 0; i < layer.n; ++i) {
          T acc{};
          const T* urow = layer.low_rank_u.data.data() + static_cast<std::size_t>(i) * r;
          for (index_t q = 0; q < r; ++q) acc += urow[q] * z[static_cast<std::size_t>(q)];
          yrow[static_cast<std::size_t>(i)] += acc;
        }
      }
    });
  } else {
    cache.z = Matrix<T>();
  }
  if (!layer.bias.empty())
    for (index_t s = 0; s < batch; ++s) {
      auto row = y.row(s);
      for (index_t i = 0; i < layer.n; ++i) row[static_cast<std::size_t>(i)] += layer.bias[static_cast<std::size_t>(i)];
    }
  flops::add(static_cast<std::uint64_t>(batch) *
             (2ull * static_cast<std::uint64_t>(layer.mask.scalar_nnz()) +
              4ull * static_cast<std::uint64_t>(layer.n) * static_cast<std::uint64_t>(r)));
  return y;
}

template <typename T>
Matrix<T> pixelfly_apply(const PixelflyLayer<T>& layer, const Matrix<T>& x_batch) {
  PixelflyCache<T> cache;
  return pixelfly_forward(layer, x_batch, cache);
}

template <typename T>
std::vector<T> pixelfly_apply(const PixelflyLayer<T>& layer, const std::vector<T>& x) {
  Matrix<T> xb(1, static_cast<index_t>(x.size()));
  xb.data = x;
  return pixelfly_apply(layer, xb).data;
}

template <typename T>
PixelflyGrads<T> pixelfly_backward(const PixelflyLayer<T>& layer, const PixelflyCache<T>& cache,
                                   const Matrix<T>& upstream) {
  if (cache.x.empty() || cache.x.rows != upstream.rows || upstream.cols != layer.n)
    throw std::invalid_argument("pixelfly_backward: cache/upstream shape mismatch (run pixelfly_forward first)");
  const index_t batch = upstream.rows;
  const index_t b = layer.mask.block;
  const index_t r = layer.rank();

  PixelflyGrads<T> g;
  g.sparse_values.assign(layer.sparse_values.size(), T{});
  g.input = Matrix<T>(batch, layer.n);
  if (!layer.bias.empty()) g.bias.assign(static_cast<std::size_t>(layer.n), T{});

  for (index_t s = 0; s < batch; ++s) {
    const auto dy = upstream.row(s);
    const auto x = cache.x.row(s);
    // sparse grads and transposed input contribution
    for (std::size_t k = 0; k < layer.mask.support.size(); ++k) {
      const auto [bi, bj] = layer.mask.support[k];
      T* gvals = g.sparse_values.data() + k * static_cast<std::size_t>(b) * static_cast<std::size_t>(b);
      const T* dseg = dy.data() + bi * b;
      const T* xseg = x.data() + bj * b;
      for (index_t rr = 0; rr < b; ++rr) {
        const T d = dseg[rr];
        T* grow = gvals + rr * b;
        for (index_t c = 0; c < b; ++c) grow[c] += d * xseg[c];
      }
    }
    detail::pixelfly_sparse_apply_transposed_one(layer, dy, g.input.row(s));
    if (!layer.bias.empty())
      for (index_t i = 0; i < layer.n; ++i) g.bias[static_cast<std::size_t>(i)] += dy[static_cast<std::size_t>(i)];
  }

  if (r > 0) {
    g.low_rank_u = Matrix<T>(layer.n, r);
    g.low_rank_v = Matrix<T>(r, layer.n);
    Matrix<T> dz(batch, r);  // U^T dy per sample
    for (index_t s = 0; s < batch; ++s) {
      const auto dy = upstream.row(s);
      auto dzrow = dz.row(s);
      for (index_t q = 0; q < r; ++q) {
        T acc{};
        for (index_t i = 0; i < layer.n; ++i) acc += layer.low_rank_u(i, q) * dy[static_cast<std::size_t>(i)];
        dzrow[static_cast<std::size_t>(q)] = acc;
      }
    }
    for (index_t s = 0; s < batch; ++s) {
      const auto dy = upstream.row(s);
      const auto z = cache.z.row(s);
      const auto x = cache.x.row(s);
      const auto dzrow = dz.row(s);
      for (index_t i = 0; i < layer.n; ++i)
        for (index_t q = 0; q < r; ++q) g.low_rank_u(i, q) += dy[static_cast<std::size_t>(i)] * z[static_cast<std::size_t>(q)];
      for (index_t q = 0; q < r; ++q)
        for (index_t c = 0; c < layer.n; ++c)
          g.low_rank_v(q, c) += dzrow[static_cast<std::size_t>(q)] * x[static_cast<std::size_t>(c)];
      auto gin = g.input.row(s);
      for (index_t c = 0; c < layer.n; ++c) {
        T acc{};
        for (index_t q = 0; q < r; ++q) acc += layer.low_rank_v(q, c) * dzrow[static_cast<std::size_t>(q)];
        gin[static_cast<std::size_t>(c)] += acc;
      }
    }
  }
  return g;
}

template <typename T>
Matrix<T> dense_reconstruct_pixelfly(const PixelflyLayer<T>& layer) {
  Matrix<T> s(layer.n, layer.n);
  const index_t b = layer.mask.block;
  for (std::size_t k = 0; k < layer.mask.support.size(); ++k) {
    const auto [bi, bj] = layer.mask.support[k];
    const T* vals = layer.sparse_values.data() + k * static_cast<std::size_t>(b) * static_cast<std::size_t>(b);
    for (index_t r = 0; r < b; ++r)
      for (index_t c = 0; c < b; ++c) s(bi * b + r, bj * b + c) = vals[r * b + c];
  }
  if (layer.rank() > 0) {
    const Matrix<T> uv = matmul(layer.low_rank_u, layer.low_rank_v);
    for (std::size_t i = 0; i < s.data.size(); ++i) s.data[i] += uv.data[i];
  }
  return s;
}

}  // namespace bfly
