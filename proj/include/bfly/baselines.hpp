#pragma once

#include "bfly/butterfly.hpp"
#include "bfly/tensor.hpp"

namespace bfly {

// The comparison layers: dense linear, low-rank, circulant (applied as a
// circular convolution through the FFT butterfly), and Fastfood (diagonals,
// a fixed permutation and two Walsh-Hadamard transforms). All follow the same
// shape conventions as the structured layers: batches are row-major, one
// sample per row, and every layer takes an optional output bias.

// ---------------------------------------------------------------------------
// Dense linear
// ---------------------------------------------------------------------------

template <typename T>
struct DenseLinearLayer {
  Matrix<T> weight;     // out x in
  std::vector<T> bias;  // empty or length out

  index_t out_dim() const { return weight.rows; }
  index_t in_dim() const { return weight.cols; }
  index_t param_count() const {
    return weight.rows * weight.cols + static_cast<index_t>(bias.size());
  }
};

template <typename T>
DenseLinearLayer<T> dense_new(index_t out, index_t in, Rng& rng, bool with_bias = true) {
  DenseLinearLayer<T> layer;
  layer.weight = Matrix<T>(out, in);
  const double s = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& v : layer.weight.data) v = static_cast<T>(rng.uniform(-s, s));
  if (with_bias) {
    layer.bias.resize(static_cast<std::size_t>(out));
    for (auto& v : layer.bias) v = static_cast<T>(rng.uniform(-s, s));
  }
  return layer;
}

template <typename T>
struct DenseCache {
  Matrix<T> x;
};

template <typename T>
Matrix<T> dense_forward(const DenseLinearLayer<T>& layer, const Matrix<T>& x, DenseCache<T>& cache) {
  if (x.cols != layer.in_dim())
    throw std::invalid_argument("dense_forward: input width " + std::to_string(x.cols) +
                                " != layer input " + std::to_string(layer.in_dim()));
  cache.x = x;
  Matrix<T> y(x.rows, layer.out_dim());
  parallel_for(x.rows, [&](index_t s0, index_t s1) {
    for (index_t s = s0; s < s1; ++s) {
      const auto xr = x.row(s);
      auto yr = y.row(s);
      for (index_t i = 0; i < layer.out_dim(); ++i) {
        T acc{};
        const T* wrow = layer.weight.data.data() + static_cast<std::size_t>(i) * layer.in_dim();
        for (index_t k = 0; k < layer.in_dim(); ++k) acc += wrow[k] * xr[static_cast<std::size_t>(k)];
        yr[static_cast<std::size_t>(i)] = layer.bias.empty() ? acc : acc + layer.bias[static_cast<std::size_t>(i)];
      }
    }
  });
  flops::add(static_cast<std::uint64_t>(x.rows) * 2ull * static_cast<std::uint64_t>(layer.out_dim()) *
             static_cast<std::uint64_t>(layer.in_dim()));
  return y;
}

template <typename T>
Matrix<T> dense_apply(const DenseLinearLayer<T>& layer, const Matrix<T>& x) {
  DenseCache<T> cache;
  return dense_forward(layer, x, cache);
}

template <typename T>
struct DenseGrads {
  Matrix<T> weight;
  std::vector<T> bias;
  Matrix<T> input;
};

template <typename T>
DenseGrads<T> dense_backward(const DenseLinearLayer<T>& layer, const DenseCache<T>& cache,
                             const Matrix<T>& upstream) {
  if (cache.x.empty() || cache.x.rows != upstream.rows || upstream.cols != layer.out_dim())
    throw std::invalid_argument("dense_backward: cache/upstream shape mismatch");
  DenseGrads<T> g;
  g.weight = matmul(transpose(upstream), cache.x);  // dW = sum dy x^T
  g.input = matmul(upstream, layer.weight);         // dx = W^T dy, row-wise
  if (!layer.bias.empty()) {
    g.bias.assign(static_cast<std::size_t>(layer.out_dim()), T{});
    for (index_t s = 0; s < upstream.rows; ++s)
      for (index_t i = 0; i < layer.out_dim(); ++i) g.bias[static_cast<std::size_t>(i)] += upstream(s, i);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Low-rank
// ---------------------------------------------------------------------------

template <typename T>
struct LowRankLayer {
  Matrix<T> u;          // out x r (empty when r == 0)
  Matrix<T> v;          // r x in
  std::vector<T> bias;  // empty or length out
  index_t out = 0;
  index_t in = 0;

  index_t rank() const { return u.empty() ? 0 : u.cols; }
  index_t param_count() const {
    return rank() * (in + out) + static_cast<index_t>(bias.size());
  }
};

template <typename T>
LowRankLayer<T> lowrank_new(index_t out, index_t in, index_t rank, Rng& rng, bool with_bias = true) {
  if (rank < 0 || rank > std::min(in, out))
    throw std::invalid_argument("lowrank_new: rank " + std::to_string(rank) +
                                " out of range for " + shape_str(out, in));
  LowRankLayer<T> layer;
  layer.out = out;
  layer.in = in;
  const double s = 1.0 / std::sqrt(static_cast<double>(in));
  if (rank > 0) {
    layer.u = Matrix<T>(out, rank);
    layer.v = Matrix<T>(rank, in);
    for (auto& x : layer.u.data) x = static_cast<T>(rng.uniform(-s, s));
    for (auto& x : layer.v.data) x = static_cast<T>(rng.uniform(-s, s));
  }
  if (with_bias) {
    layer.bias.resize(static_cast<std::size_t>(out));
    for (auto& x : layer.bias) x = static_cast<T>(rng.uniform(-s, s));
  }
  return layer;
}

template <typename T>
struct LowRankCache {
  Matrix<T> x;
  Matrix<T> z;  // V x
};

template <typename T>
Matrix<T> lowrank_forward(const LowRankLayer<T>& layer, const Matrix<T>& x, LowRankCache<T>& cache) {
  if (x.cols != layer.in)
    throw std::invalid_argument("lowrank_forward: input width " + std::to_string(x.cols) +
                                " != layer input " + std::to_string(layer.in));
  cache.x = x;
  Matrix<T> y(x.rows, layer.out);
  const index_t r = layer.rank();
  if (r > 0) {
    cache.z = matmul(x, transpose(layer.v));  // row s: V x_s
    Matrix<T> uy = matmul(cache.z, transpose(layer.u));
    y = std::move(uy);
  } else {
    cache.z = Matrix<T>();
  }
  if (!layer.bias.empty())
    for (index_t s = 0; s < y.rows; ++s)
      for (index_t i = 0; i < layer.out; ++i) y(s, i) += layer.bias[static_cast<std::size_t>(i)];
  return y;
}

template <typename T>
Matrix<T> lowrank_apply(const LowRankLayer<T>& layer, const Matrix<T>& x) {
  LowRankCache<T> cache;
  return lowrank_forward(layer, x, cache);
}

template <typename T>
struct LowRankGrads {
  Matrix<T> u, v;
  std::vector<T> bias;
  Matrix<T> input;
};

template <typename T>
LowRankGrads<T> lowrank_backward(const LowRankLayer<T>& layer, const LowRankCache<T>& cache,
                                 const Matrix<T>& upstream) {
  if (cache.x.empty() || cache.x.rows != upstream.rows || upstream.cols != layer.out)
    throw std::invalid_argument("lowrank_backward: cache/upstream shape mismatch");
  LowRankGrads<T> g;
  g.input = Matrix<T>(upstream.rows, layer.in);
  if (layer.rank() > 0) {
    g.u = matmul(transpose(upstream), cache.z);      // dU = sum dy z^T
    const Matrix<T> dz = matmul(upstream, layer.u);  // row s: U^T dy_s
    g.v = matmul(transpose(dz), cache.x);            // dV = sum dz x^T
    g.input = matmul(dz, layer.v);                   // dx = V^T dz
  }
  if (!layer.bias.empty()) {
    g.bias.assign(static_cast<std::size_t>(layer.out), T{});
    for (index_t s = 0; s < upstream.rows; ++s)
      for (index_t i = 0; i < layer.out; ++i) g.bias[static_cast<std::size_t>(i)] += upstream(s, i);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Circulant
// ---------------------------------------------------------------------------

// y = c (*) x, computed as ifft(fft(c) . fft(x)) / n when n is a power of two
// (the transforms run through the FFT butterfly configuration), and as the
// direct O(n^2) circular convolution otherwise. Complex arithmetic is always
// f64; the imaginary residue of the inverse transform is checked against
// kCirculantImagTol and discarded.
template <typename T>
struct CirculantLayer {
  std::vector<T> c;     // first column of the circulant
  std::vector<T> bias;  // empty or length n
  ButterflyLayer<std::complex<double>> fft_fwd;  // empty levels when n not pow2
  ButterflyLayer<std::complex<double>> fft_inv;

  index_t dim() const { return static_cast<index_t>(c.size()); }
  bool fft_path() const { return is_pow2(dim()) && dim() > 1; }
  index_t param_count() const { return dim() + static_cast<index_t>(bias.size()); }
};

inline constexpr double kCirculantImagTol = 1e-9;

template <typename T>
CirculantLayer<T> circulant_new(index_t n, Rng& rng, bool with_bias = true) {
  CirculantLayer<T> layer;
  layer.c.resize(static_cast<std::size_t>(n));
  const double s = 1.0 / std::sqrt(static_cast<double>(n));
  for (auto& v : layer.c) v = static_cast<T>(rng.uniform(-s, s));
  if (with_bias) {
    layer.bias.resize(static_cast<std::size_t>(n));
    for (auto& v : layer.bias) v = static_cast<T>(rng.uniform(-s, s));
  }
  if (is_pow2(n) && n > 1) {
    layer.fft_fwd = fft_configure(n, FftDirection::Forward);
    layer.fft_inv = fft_configure(n, FftDirection::Inverse);
  }
  return layer;
}

template <typename T>
struct CirculantCache {
  Matrix<T> x;
  std::vector<ComplexVector> x_spectra;  // fft(x_s), fft path only
  ComplexVector c_spectrum;              // fft(c)
};

namespace detail {

template <typename T>
ComplexVector to_complex(std::span<const T> x) {
  ComplexVector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = {static_cast<double>(x[i]), 0.0};
  return out;
}

// real part with the imaginary-residue assertion
template <typename T>
void take_real_checked(const ComplexVector& v, std::span<T> out, double scale) {
  double max_im = 0.0, max_re = 0.0;
  for (const auto& z : v) {
    max_im = std::max(max_im, std::abs(z.imag()));
    max_re = std::max(max_re, std::abs(z.real()));
  }
  if (max_im > kCirculantImagTol * std::max(1.0, max_re))
    throw std::logic_error("circulant: imaginary residue " + std::to_string(max_im) +
                           " exceeds tolerance");
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(v[i].real() * scale);
}

}  // namespace detail

template <typename T>
Matrix<T> circulant_forward(const CirculantLayer<T>& layer, const Matrix<T>& x,
                            CirculantCache<T>& cache) {
  const index_t n = layer.dim();
  if (x.cols != n)
    throw std::invalid_argument("circulant_forward: input width " + std::to_string(x.cols) +
                                " != layer size " + std::to_string(n));
  cache.x = x;
  cache.x_spectra.clear();
  Matrix<T> y(x.rows, n);
  if (layer.fft_path()) {
    cache.c_spectrum = butterfly_apply(layer.fft_fwd, detail::to_complex(std::span<const T>(layer.c)));
    cache.x_spectra.resize(static_cast<std::size_t>(x.rows));
    for (index_t s = 0; s < x.rows; ++s) {
      auto xs = butterfly_apply(layer.fft_fwd, detail::to_complex<T>(x.row(s)));
      ComplexVector prod(xs.size());
      for (std::size_t i = 0; i < xs.size(); ++i) prod[i] = xs[i] * cache.c_spectrum[i];
      cache.x_spectra[static_cast<std::size_t>(s)] = std::move(xs);
      const auto conv = butterfly_apply(layer.fft_inv, prod);
      detail::take_real_checked(conv, y.row(s), 1.0 / static_cast<double>(n));
    }
  } else {
    for (index_t s = 0; s < x.rows; ++s) {
      const auto xs = x.row(s);
      auto ys = y.row(s);
      for (index_t i = 0; i < n; ++i) {
        T acc{};
        for (index_t j = 0; j < n; ++j)
          acc += layer.c[static_cast<std::size_t>((i - j + n) % n)] * xs[static_cast<std::size_t>(j)];
        ys[static_cast<std::size_t>(i)] = acc;
      }
    }
  }
  if (!layer.bias.empty())
    for (index_t s = 0; s < x.rows; ++s)
      for (index_t i = 0; i < n; ++i) y(s, i) += layer.bias[static_cast<std::size_t>(i)];
  return y;
}

template <typename T>
Matrix<T> circulant_apply(const CirculantLayer<T>& layer, const Matrix<T>& x) {
  CirculantCache<T> cache;
  return circulant_forward(layer, x, cache);
}

// explicit circulant matrix, the oracle route: M[i][j] = c[(i - j) mod n]
template <typename T>
Matrix<T> circulant_matrix(const CirculantLayer<T>& layer) {
  const index_t n = layer.dim();
  Matrix<T> m(n, n);
  for (index_t i = 0; i < n; ++i)
    for (index_t j = 0; j < n; ++j) m(i, j) = layer.c[static_cast<std::size_t>((i - j + n) % n)];
  return m;
}

template <typename T>
struct CirculantGrads {
  std::vector<T> c;
  std::vector<T> bias;
  Matrix<T> input;
};

template <typename T>
CirculantGrads<T> circulant_backward(const CirculantLayer<T>& layer, const CirculantCache<T>& cache,
                                     const Matrix<T>& upstream) {
  const index_t n = layer.dim();
  if (cache.x.empty() || cache.x.rows != upstream.rows || upstream.cols != n)
    throw std::invalid_argument("circulant_backward: cache/upstream shape mismatch");
  CirculantGrads<T> g;
  g.c.assign(static_cast<std::size_t>(n), T{});
  g.input = Matrix<T>(upstream.rows, n);
  if (layer.fft_path()) {
    // correlation theorem: dc = ifft(fft(dy) conj(fft(x))) / n, dx likewise with c
    ComplexVector dc_acc(static_cast<std::size_t>(n), {0.0, 0.0});
    for (index_t s = 0; s < upstream.rows; ++s) {
      const auto dys = butterfly_apply(layer.fft_fwd, detail::to_complex<T>(upstream.row(s)));
      ComplexVector for_c(dys.size()), for_x(dys.size());
      const auto& xs = cache.x_spectra[static_cast<std::size_t>(s)];
      for (std::size_t i = 0; i < dys.size(); ++i) {
        for_c[i] = dys[i] * std::conj(xs[i]);
        for_x[i] = dys[i] * std::conj(cache.c_spectrum[i]);
      }
      for (std::size_t i = 0; i < dys.size(); ++i) dc_acc[i] += for_c[i];
      const auto dx = butterfly_apply(layer.fft_inv, for_x);
      detail::take_real_checked(dx, g.input.row(s), 1.0 / static_cast<double>(n));
    }
    const auto dc = butterfly_apply(layer.fft_inv, dc_acc);
    detail::take_real_checked(dc, std::span<T>(g.c), 1.0 / static_cast<double>(n));
  } else {
    for (index_t s = 0; s < upstream.rows; ++s) {
      const auto dys = upstream.row(s);
      const auto xs = cache.x.row(s);
      auto dxs = g.input.row(s);
      for (index_t k = 0; k < n; ++k) {
        T acc{};
        for (index_t i = 0; i < n; ++i)
          acc += dys[static_cast<std::size_t>(i)] * xs[static_cast<std::size_t>((i - k + n) % n)];
        g.c[static_cast<std::size_t>(k)] += acc;
      }
      for (index_t j = 0; j < n; ++j) {
        T acc{};
        for (index_t i = 0; i < n; ++i)
          acc += layer.c[static_cast<std::size_t>((i - j + n) % n)] * dys[static_cast<std::size_t>(i)];
        dxs[static_cast<std::size_t>(j)] = acc;
      }
    }
  }
  if (!layer.bias.empty()) {
    g.bias.assign(static_cast<std::size_t>(n), T{});
    for (index_t s = 0; s < upstream.rows; ++s)
      for (index_t i = 0; i < n; ++i) g.bias[static_cast<std::size_t>(i)] += upstream(s, i);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Walsh-Hadamard transform and Fastfood
// ---------------------------------------------------------------------------

// Unnormalized in-place WHT: log2(n) butterfly-style passes of (u+v, u-v).
// H(H(x)) == n * x.
template <typename T>
void walsh_hadamard_inplace(std::span<T> x) {
  const index_t n = static_cast<index_t>(x.size());
  if (!is_pow2(n))
    throw std::invalid_argument("walsh_hadamard: length must be a power of two, got " +
                                std::to_string(n));
  for (index_t stride = 1; stride < n; stride *= 2) {
    for (index_t base = 0; base < n; base += 2 * stride)
      for (index_t off = 0; off < stride; ++off) {
        const std::size_t i = static_cast<std::size_t>(base + off);
        const std::size_t j = i + static_cast<std::size_t>(stride);
        const T u = x[i];
        const T v = x[j];
        x[i] = u + v;
        x[j] = u - v;
      }
    flops::add(static_cast<std::uint64_t>(n));
  }
}

template <typename T>
std::vector<T> walsh_hadamard(const std::vector<T>& x) {
  std::vector<T> y = x;
  walsh_hadamard_inplace(std::span<T>(y));
  return y;
}

// y = (1/sqrt(n)) * S H G Pi H B x with learnable diagonals s, g, b and a
// fixed random permutation Pi.
template <typename T>
struct FastfoodLayer {
  std::vector<T> scale;  // S
  std::vector<T> gauss;  // G
  std::vector<T> sign;   // B, +-1 at init
  Permutation perm;      // fixed, not learnable
  std::vector<T> bias;   // empty or length n

  index_t dim() const { return static_cast<index_t>(scale.size()); }
  index_t param_count() const { return 3 * dim() + static_cast<index_t>(bias.size()); }
};

template <typename T>
FastfoodLayer<T> fastfood_new(index_t n, Rng& rng, bool with_bias = true) {
  if (!is_pow2(n))
    throw std::invalid_argument("fastfood_new: size must be a power of two, got " +
                                std::to_string(n));
  FastfoodLayer<T> layer;
  layer.scale.resize(static_cast<std::size_t>(n));
  layer.gauss.resize(static_cast<std::size_t>(n));
  layer.sign.resize(static_cast<std::size_t>(n));
  // scale starts at 1/sqrt(n) so the composed transform keeps unit variance
  const double s0 = 1.0 / std::sqrt(static_cast<double>(n));
  for (auto& v : layer.scale) v = static_cast<T>(s0);
  for (auto& v : layer.gauss) v = static_cast<T>(rng.normal());
  for (auto& v : layer.sign) v = rng.uniform() < 0.5 ? T{-1} : T{1};
  layer.perm = Permutation::random(n, rng);
  if (with_bias) {
    layer.bias.resize(static_cast<std::size_t>(n));
    for (auto& v : layer.bias) v = static_cast<T>(rng.uniform(-s0, s0));
  }
  return layer;
}

template <typename T>
struct FastfoodCache {
  Matrix<T> x;
  Matrix<T> v3;  // after the permutation
  Matrix<T> v5;  // after the second WHT
};

template <typename T>
Matrix<T> fastfood_forward(const FastfoodLayer<T>& layer, const Matrix<T>& x,
                           FastfoodCache<T>& cache) {
  const index_t n = layer.dim();
  if (x.cols != n)
    throw std::invalid_argument("fastfood_forward: input width " + std::to_string(x.cols) +
                                " != layer size " + std::to_string(n));
  const index_t batch = x.rows;
  cache.x = x;
  cache.v3 = Matrix<T>(batch, n);
  cache.v5 = Matrix<T>(batch, n);
  Matrix<T> y(batch, n);
  const T inv_sqrt_n = static_cast<T>(1.0 / std::sqrt(static_cast<double>(n)));
  std::vector<T> buf(static_cast<std::size_t>(n));
  for (index_t s = 0; s < batch; ++s) {
    const auto xs = x.row(s);
    for (index_t i = 0; i < n; ++i)
      buf[static_cast<std::size_t>(i)] = layer.sign[static_cast<std::size_t>(i)] * xs[static_cast<std::size_t>(i)];
    walsh_hadamard_inplace(std::span<T>(buf));
    auto v3 = cache.v3.row(s);
    layer.perm.apply(std::span<const T>(buf), v3);
    for (index_t i = 0; i < n; ++i)
      buf[static_cast<std::size_t>(i)] = layer.gauss[static_cast<std::size_t>(i)] * v3[static_cast<std::size_t>(i)];
    walsh_hadamard_inplace(std::span<T>(buf));
    auto v5 = cache.v5.row(s);
    std::copy(buf.begin(), buf.end(), v5.begin());
    auto ys = y.row(s);
    for (index_t i = 0; i < n; ++i) {
      T val = inv_sqrt_n * layer.scale[static_cast<std::size_t>(i)] * buf[static_cast<std::size_t>(i)];
      if (!layer.bias.empty()) val += layer.bias[static_cast<std::size_t>(i)];
      ys[static_cast<std::size_t>(i)] = val;
    }
  }
  return y;
}

template <typename T>
Matrix<T> fastfood_apply(const FastfoodLayer<T>& layer, const Matrix<T>& x) {
  FastfoodCache<T> cache;
  return fastfood_forward(layer, x, cache);
}

template <typename T>
struct FastfoodGrads {
  std::vector<T> scale, gauss, sign;
  std::vector<T> bias;
  Matrix<T> input;
};

template <typename T>
FastfoodGrads<T> fastfood_backward(const FastfoodLayer<T>& layer, const FastfoodCache<T>& cache,
                                   const Matrix<T>& upstream) {
  const index_t n = layer.dim();
  if (cache.x.empty() || cache.x.rows != upstream.rows || upstream.cols != n)
    throw std::invalid_argument("fastfood_backward: cache/upstream shape mismatch");
  const index_t batch = upstream.rows;
  FastfoodGrads<T> g;
  g.scale.assign(static_cast<std::size_t>(n), T{});
  g.gauss.assign(static_cast<std::size_t>(n), T{});
  g.sign.assign(static_cast<std::size_t>(n), T{});
  if (!layer.bias.empty()) g.bias.assign(static_cast<std::size_t>(n), T{});
  g.input = Matrix<T>(batch, n);
  const T inv_sqrt_n = static_cast<T>(1.0 / std::sqrt(static_cast<double>(n)));
  std::vector<T> d(static_cast<std::size_t>(n)), dv3(static_cast<std::size_t>(n));
  for (index_t s = 0; s < batch; ++s) {
    const auto dy = upstream.row(s);
    const auto xs = cache.x.row(s);
    const auto v3 = cache.v3.row(s);
    const auto v5 = cache.v5.row(s);
    for (index_t i = 0; i < n; ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      g.scale[ii] += inv_sqrt_n * dy[ii] * v5[ii];
      if (!g.bias.empty()) g.bias[ii] += dy[ii];
      d[ii] = inv_sqrt_n * layer.scale[ii] * dy[ii];  // dv5
    }
    walsh_hadamard_inplace(std::span<T>(d));  // dv4 (H is symmetric)
    for (index_t i = 0; i < n; ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      g.gauss[ii] += d[ii] * v3[ii];
      dv3[ii] = layer.gauss[ii] * d[ii];
    }
    // v3[i] = v2[map[i]] -> dv2[map[i]] = dv3[i]
    for (index_t i = 0; i < n; ++i)
      d[static_cast<std::size_t>(layer.perm.map[static_cast<std::size_t>(i)])] = dv3[static_cast<std::size_t>(i)];
    walsh_hadamard_inplace(std::span<T>(d));  // dv1
    auto dx = g.input.row(s);
    for (index_t i = 0; i < n; ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      g.sign[ii] += d[ii] * xs[ii];
      dx[ii] = layer.sign[ii] * d[ii];
    }
  }
  return g;
}

}  // namespace bfly
