#pragma once

#include <atomic>
#include <complex>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace bfly {

using index_t = std::int64_t;

// ---------------------------------------------------------------------------
// Global knobs
// ---------------------------------------------------------------------------

// Worker count used by the row/batch-parallel kernels. 1 = fully serial.
// Parallel partitioning is over output rows (or batch elements) only, so the
// per-element summation order is identical for every thread count.
void set_threads(int n);
int threads();

// Scalar-operation counter. Each kernel increments it with its own documented
// convention: matmul/matvec count a multiply-accumulate as 2, butterfly passes
// count multiplies only (4 per index pair). Counts are process-global.
namespace flops {

inline std::atomic<std::uint64_t> g_count{0};

inline void reset() { g_count.store(0, std::memory_order_relaxed); }
inline std::uint64_t count() { return g_count.load(std::memory_order_relaxed); }
inline void add(std::uint64_t n) { g_count.fetch_add(n, std::memory_order_relaxed); }

}  // namespace flops

// Runs fn(begin, end) over contiguous chunks of [0, n) on threads() workers.
template <class Fn>
void parallel_for(index_t n, Fn&& fn) {
  const int nt = threads();
  if (nt <= 1 || n < 2) {
    fn(index_t{0}, n);
    return;
  }
  const int workers = static_cast<int>(std::min<index_t>(nt, n));
  const index_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    const index_t begin = w * chunk;
    const index_t end = std::min<index_t>(begin + chunk, n);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

// Deterministic 64-bit generator: std::mt19937_64 raw output with our own
// uniform/normal mappings, so the full draw sequence is identical across
// platforms for a given seed (std distributions are not portable).
// Reference sequence for seed 42: first three next_u64() values are
// 13930160852258120406, 11788048577503494824, 13874630024467741450.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // [0, 1) with 53-bit resolution
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n); plain modulo, bias is negligible for the ranges used here
  std::uint64_t bounded(std::uint64_t n) { return next_u64() % n; }

  // standard normal via Box-Muller, one spare cached
  double normal();

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Dense matrix / vectors
// ---------------------------------------------------------------------------

// Row-major dense matrix. A default-constructed Matrix (0x0) stands for
// "absent" (e.g. a rank-0 low-rank term); sized matrices are always >= 1x1.
template <typename T>
struct Matrix {
  index_t rows = 0;
  index_t cols = 0;
  std::vector<T> data;  // rows * cols, row-major

  Matrix() = default;
  Matrix(index_t r, index_t c, T fill = T{}) : rows(r), cols(c) {
    if (r < 1 || c < 1)
      throw std::invalid_argument("Matrix: dimensions must be >= 1, got " +
                                  std::to_string(r) + "x" + std::to_string(c));
    data.assign(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill);
  }

  static Matrix identity(index_t n) {
    Matrix m(n, n);
    for (index_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  bool empty() const { return rows == 0; }

  T& operator()(index_t i, index_t j) { return data[static_cast<std::size_t>(i) * cols + j]; }
  const T& operator()(index_t i, index_t j) const {
    return data[static_cast<std::size_t>(i) * cols + j];
  }

  std::span<T> row(index_t i) { return {data.data() + static_cast<std::size_t>(i) * cols,
                                        static_cast<std::size_t>(cols)}; }
  std::span<const T> row(index_t i) const {
    return {data.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
  }
};

using MatD = Matrix<double>;
using MatF = Matrix<float>;

using ComplexVector = std::vector<std::complex<double>>;

inline std::string shape_str(index_t r, index_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols, a.rows);
  for (index_t i = 0; i < a.rows; ++i)
    for (index_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

// c[i][j] = sum_k a[i][k] * b[k][j], k ascending for every element, so the
// result is bit-identical across runs and thread counts. Counter: 2*m*n*k.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols != b.rows)
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.rows, a.cols) + " * " +
                                shape_str(b.rows, b.cols));
  Matrix<T> c(a.rows, b.cols);
  parallel_for(a.rows, [&](index_t r0, index_t r1) {
    for (index_t i = r0; i < r1; ++i) {
      T* crow = c.data.data() + static_cast<std::size_t>(i) * c.cols;
      for (index_t k = 0; k < a.cols; ++k) {
        const T aik = a(i, k);
        const T* brow = b.data.data() + static_cast<std::size_t>(k) * b.cols;
        for (index_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
      }
    }
  });
  flops::add(2ull * static_cast<std::uint64_t>(a.rows) * static_cast<std::uint64_t>(a.cols) *
             static_cast<std::uint64_t>(b.cols));
  return c;
}

// y[i] = sum_k a[i][k] * x[k]. Counter: multiply-accumulate as 2 flops.
template <typename T>
std::vector<T> matvec(const Matrix<T>& a, std::span<const T> x) {
  if (a.cols != static_cast<index_t>(x.size()))
    throw std::invalid_argument("matvec: shape mismatch " + shape_str(a.rows, a.cols) +
                                " * vector of length " + std::to_string(x.size()));
  std::vector<T> y(static_cast<std::size_t>(a.rows));
  for (index_t i = 0; i < a.rows; ++i) {
    T acc{};
    const T* arow = a.data.data() + static_cast<std::size_t>(i) * a.cols;
    for (index_t k = 0; k < a.cols; ++k) acc += arow[k] * x[static_cast<std::size_t>(k)];
    y[static_cast<std::size_t>(i)] = acc;
  }
  flops::add(2ull * static_cast<std::uint64_t>(a.rows) * static_cast<std::uint64_t>(a.cols));
  return y;
}

template <typename T>
std::vector<T> matvec(const Matrix<T>& a, const std::vector<T>& x) {
  return matvec(a, std::span<const T>(x));
}

// ---------------------------------------------------------------------------
// CSR sparse matrix
// ---------------------------------------------------------------------------

template <typename T>
struct CsrMatrix {
  index_t rows = 0;
  index_t cols = 0;
  std::vector<index_t> row_ptr;  // rows + 1, non-decreasing, row_ptr[0] == 0
  std::vector<index_t> col_idx;  // strictly increasing within each row
  std::vector<T> values;

  index_t nnz() const { return static_cast<index_t>(col_idx.size()); }

  // throws if any structural invariant is broken
  void validate() const {
    if (rows < 1 || cols < 1) throw std::invalid_argument("CsrMatrix: empty shape");
    if (static_cast<index_t>(row_ptr.size()) != rows + 1)
      throw std::invalid_argument("CsrMatrix: row_ptr length != rows+1");
    if (row_ptr.front() != 0 || row_ptr.back() != nnz())
      throw std::invalid_argument("CsrMatrix: row_ptr endpoints invalid");
    if (values.size() != col_idx.size())
      throw std::invalid_argument("CsrMatrix: values/col_idx length mismatch");
    for (index_t i = 0; i < rows; ++i) {
      if (row_ptr[i] > row_ptr[i + 1]) throw std::invalid_argument("CsrMatrix: row_ptr decreasing");
      for (index_t p = row_ptr[i]; p < row_ptr[i + 1]; ++p) {
        if (col_idx[p] < 0 || col_idx[p] >= cols)
          throw std::invalid_argument("CsrMatrix: column index out of range");
        if (p > row_ptr[i] && col_idx[p] <= col_idx[p - 1])
          throw std::invalid_argument("CsrMatrix: columns not strictly increasing in row " +
                                      std::to_string(i));
      }
    }
  }
};

using CsrD = CsrMatrix<double>;

// Entries with |value| <= zero_tol are dropped.
template <typename T>
CsrMatrix<T> csr_from_dense(const Matrix<T>& a, double zero_tol) {
  if (zero_tol < 0) throw std::invalid_argument("csr_from_dense: zero_tol must be >= 0");
  CsrMatrix<T> s;
  s.rows = a.rows;
  s.cols = a.cols;
  s.row_ptr.reserve(static_cast<std::size_t>(a.rows) + 1);
  s.row_ptr.push_back(0);
  for (index_t i = 0; i < a.rows; ++i) {
    for (index_t j = 0; j < a.cols; ++j) {
      const T v = a(i, j);
      if (std::abs(v) > zero_tol) {
        s.col_idx.push_back(j);
        s.values.push_back(v);
      }
    }
    s.row_ptr.push_back(s.nnz());
  }
  return s;
}

template <typename T>
Matrix<T> csr_to_dense(const CsrMatrix<T>& s) {
  Matrix<T> a(s.rows, s.cols);
  for (index_t i = 0; i < s.rows; ++i)
    for (index_t p = s.row_ptr[i]; p < s.row_ptr[i + 1]; ++p) a(i, s.col_idx[p]) = s.values[p];
  return a;
}

// c = a * b with a sparse. Within a row, stored columns are visited in
// ascending order, so summation order is fixed. Counter: 2 * nnz * b.cols.
template <typename T>
Matrix<T> csr_spmm(const CsrMatrix<T>& a, const Matrix<T>& b) {
  if (a.cols != b.rows)
    throw std::invalid_argument("csr_spmm: shape mismatch " + shape_str(a.rows, a.cols) + " * " +
                                shape_str(b.rows, b.cols));
  Matrix<T> c(a.rows, b.cols);
  parallel_for(a.rows, [&](index_t r0, index_t r1) {
    for (index_t i = r0; i < r1; ++i) {
      T* crow = c.data.data() + static_cast<std::size_t>(i) * c.cols;
      for (index_t p = a.row_ptr[i]; p < a.row_ptr[i + 1]; ++p) {
        const T v = a.values[p];
        const T* brow = b.data.data() + static_cast<std::size_t>(a.col_idx[p]) * b.cols;
        for (index_t j = 0; j < b.cols; ++j) crow[j] += v * brow[j];
      }
    }
  });
  flops::add(2ull * static_cast<std::uint64_t>(a.nnz()) * static_cast<std::uint64_t>(b.cols));
  return c;
}

// nnz == round((1 - sparsity) * rows * cols) exactly, positions sampled
// without replacement, values uniform in [-1, 1].
CsrMatrix<double> random_sparse(index_t rows, index_t cols, double sparsity, Rng& rng);

// ---------------------------------------------------------------------------
// Small helpers shared across modules
// ---------------------------------------------------------------------------

inline bool is_pow2(index_t n) { return n >= 1 && (n & (n - 1)) == 0; }

inline int log2_int(index_t n) {
  int k = 0;
  while ((index_t{1} << k) < n) ++k;
  return k;
}

inline index_t next_pow2(index_t n) {
  index_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace bfly
