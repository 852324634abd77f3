#include "bfly/pixelfly.hpp"

#include <algorithm>

namespace bfly {

BlockButterflyMask build_mask(index_t n, index_t block, int levels) {
  if (n < 1 || block < 1 || n % block != 0)
    throw std::invalid_argument("build_mask: block size " + std::to_string(block) +
                                " must divide n = " + std::to_string(n));
  const index_t m = n / block;
  if (!is_pow2(m))
    throw std::invalid_argument("build_mask: grid n/block = " + std::to_string(m) +
                                " must be a power of two (n = " + std::to_string(n) +
                                ", block = " + std::to_string(block) + ")");
  const int max_levels = log2_int(m);
  if (levels == -1) levels = max_levels;
  if (levels < 0 || levels > max_levels)
    throw std::invalid_argument("build_mask: levels = " + std::to_string(levels) +
                                " out of range [0, " + std::to_string(max_levels) + "]");

  BlockButterflyMask mask;
  mask.n = n;
  mask.block = block;
  mask.grid = m;
  mask.levels = levels;
  mask.support.reserve(static_cast<std::size_t>(m) * (1 + levels));
  for (index_t i = 0; i < m; ++i) {
    mask.support.emplace_back(i, i);
    for (int t = 0; t < levels; ++t) mask.support.emplace_back(i, i ^ (index_t{1} << t));
  }
  std::sort(mask.support.begin(), mask.support.end());
  return mask;
}

}  // namespace bfly
