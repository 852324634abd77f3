#include "bfly/butterfly.hpp"

namespace bfly {

Permutation bit_reversal_permutation(index_t n) {
  if (!is_pow2(n))
    throw std::invalid_argument("bit_reversal_permutation: size must be a power of two, got " +
                                std::to_string(n));
  const int bits = log2_int(n);
  Permutation p;
  p.map.resize(static_cast<std::size_t>(n));
  for (index_t i = 0; i < n; ++i) {
    index_t r = 0;
    for (int b = 0; b < bits; ++b)
      if (i & (index_t{1} << b)) r |= index_t{1} << (bits - 1 - b);
    p.map[static_cast<std::size_t>(i)] = r;
  }
  return p;
}

ButterflyLayer<std::complex<double>> fft_configure(index_t n, FftDirection dir) {
  if (!is_pow2(n))
    throw std::invalid_argument("fft_configure: size must be a power of two, got " +
                                std::to_string(n));
  using C = std::complex<double>;
  ButterflyLayer<C> layer;
  layer.n = n;
  layer.perm = bit_reversal_permutation(n);
  const int k = log2_int(n);
  const double sign = dir == FftDirection::Forward ? -1.0 : 1.0;
  layer.levels.resize(static_cast<std::size_t>(k));
  for (int l = 0; l < k; ++l) {
    auto& lvl = layer.levels[static_cast<std::size_t>(l)];
    lvl.stride = index_t{1} << l;
    lvl.coeffs.resize(static_cast<std::size_t>(2 * n));
    detail::for_each_pair(n, lvl.stride, [&](index_t p, index_t i, index_t j) {
      // pair offset within its block selects the twiddle exponent
      const index_t off = i - (i & ~(2 * lvl.stride - 1));
      const double angle = sign * M_PI * static_cast<double>(off) / static_cast<double>(lvl.stride);
      const C w = std::polar(1.0, angle);
      C* rec = lvl.coeffs.data() + 4 * p;
      rec[0] = C{1.0, 0.0};
      rec[1] = w;
      rec[2] = C{1.0, 0.0};
      rec[3] = -w;
      (void)j;
    });
  }
  return layer;
}

}  // namespace bfly
