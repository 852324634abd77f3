#include "bfly/verify.hpp"
#include <set>

#include "bfly/butterfly.hpp"

namespace bfly {

ComplexVector naive_dft(const ComplexVector& x, bool inverse) {
  const std::size_t n = x.size();
  ComplexVector out(n);
  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> acc{0.0, 0.0};
    for (std::size_t j = 0; j < n; ++j) {
      const double angle =
          sign * 2.0 * M_PI * static_cast<double>(j) * static_cast<double>(k) / static_cast<double>(n);
      acc += x[j] * std::polar(1.0, angle);
    }
    out[k] = acc;
  }
  return out;
}

std::vector<std::pair<index_t, index_t>> butterfly_factor_support_union(index_t m) {
  if (!is_pow2(m))
    throw std::invalid_argument("butterfly_factor_support_union: m must be a power of two");
  std::set<std::pair<index_t, index_t>> support;
  for (index_t i = 0; i < m; ++i) support.emplace(i, i);
  for (index_t stride = 1; stride < m; stride *= 2) {
    // a factor at this stride has per-pair support {(i,i),(i,j),(j,i),(j,j)}
    for (index_t base = 0; base < m; base += 2 * stride)
      for (index_t off = 0; off < stride; ++off) {
        const index_t i = base + off;
        const index_t j = base + off + stride;
        support.emplace(i, i);
        support.emplace(i, j);
        support.emplace(j, i);
        support.emplace(j, j);
      }
  }
  return {support.begin(), support.end()};
}

}  // namespace bfly
