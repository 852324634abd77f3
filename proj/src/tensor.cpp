#include "bfly/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace bfly {

namespace {
int g_threads = 1;
}

void set_threads(int n) { g_threads = std::max(1, n); }
int threads() { return g_threads; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller; u1 kept away from 0 so log() is finite.
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

CsrMatrix<double> random_sparse(index_t rows, index_t cols, double sparsity, Rng& rng) {
  if (rows < 1 || cols < 1) throw std::invalid_argument("random_sparse: empty shape");
  if (sparsity < 0.0 || sparsity >= 1.0)
    throw std::invalid_argument("random_sparse: sparsity must be in [0, 1), got " +
                                std::to_string(sparsity));
  const index_t total = rows * cols;
  const index_t nnz = std::llround((1.0 - sparsity) * static_cast<double>(total));

  // Flat cell indices sampled without replacement. For very sparse targets a
  // rejection set is cheaper than materializing all rows*cols candidates.
  std::vector<index_t> cells;
  cells.reserve(static_cast<std::size_t>(nnz));
  if (nnz * 4 < total) {
    std::unordered_set<index_t> seen;
    seen.reserve(static_cast<std::size_t>(nnz) * 2);
    while (static_cast<index_t>(cells.size()) < nnz) {
      const index_t cell = static_cast<index_t>(rng.bounded(static_cast<std::uint64_t>(total)));
      if (seen.insert(cell).second) cells.push_back(cell);
    }
  } else {
    std::vector<index_t> pool(static_cast<std::size_t>(total));
    for (index_t i = 0; i < total; ++i) pool[static_cast<std::size_t>(i)] = i;
    for (index_t i = 0; i < nnz; ++i) {
      const index_t j =
          i + static_cast<index_t>(rng.bounded(static_cast<std::uint64_t>(total - i)));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
      cells.push_back(pool[static_cast<std::size_t>(i)]);
    }
  }
  std::sort(cells.begin(), cells.end());

  CsrMatrix<double> s;
  s.rows = rows;
  s.cols = cols;
  s.row_ptr.assign(static_cast<std::size_t>(rows) + 1, 0);
  s.col_idx.reserve(static_cast<std::size_t>(nnz));
  s.values.reserve(static_cast<std::size_t>(nnz));
  index_t row = 0;
  for (const index_t cell : cells) {
    const index_t r = cell / cols;
    while (row < r) s.row_ptr[static_cast<std::size_t>(++row)] = s.nnz();
    s.col_idx.push_back(cell % cols);
    s.values.push_back(rng.uniform(-1.0, 1.0));
  }
  while (row < rows) s.row_ptr[static_cast<std::size_t>(++row)] = s.nnz();
  return s;
}

}  // namespace bfly
