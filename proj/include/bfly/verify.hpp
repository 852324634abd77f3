#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "bfly/tensor.hpp"

namespace bfly {

// Oracle-side helpers. Everything here is an independent route: the naive DFT
// sum, central finite differences, brute-force support enumeration. None of it
// shares code with the kernels it is used to check.

// X[k] = sum_j x[j] * exp(sign * 2*pi*i * j*k / N), sign = -1 forward.
ComplexVector naive_dft(const ComplexVector& x, bool inverse = false);

// Union of the m x m butterfly factor supports plus the diagonal, built
// constructively from the per-level pair structure (not the XOR formula).
// Sorted ascending; this is the reference for the flat block butterfly mask.
std::vector<std::pair<index_t, index_t>> butterfly_factor_support_union(index_t m);

inline double rel_err(double got, double want) {
  const double denom = std::max({std::abs(got), std::abs(want), 1e-8});
  return std::abs(got - want) / denom;
}

// infinity-norm relative error of a against reference b
template <typename T>
double max_rel_err(std::span<const T> a, std::span<const T> b) {
  double ref = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) ref = std::max(ref, static_cast<double>(std::abs(b[i])));
  for (std::size_t i = 0; i < a.size(); ++i)
    diff = std::max(diff, static_cast<double>(std::abs(a[i] - b[i])));
  return diff / std::max(ref, 1e-300);
}

template <typename T>
double max_rel_err(const std::vector<T>& a, const std::vector<T>& b) {
  return max_rel_err(std::span<const T>(a), std::span<const T>(b));
}

template <typename T>
double max_rel_err(const Matrix<T>& a, const Matrix<T>& b) {
  return max_rel_err(std::span<const T>(a.data), std::span<const T>(b.data));
}

// Central finite differences over a parameter span: loss() is re-evaluated
// with each parameter nudged by +-step; the analytic gradient must match
// entrywise. Returns the max relative error over all parameters.
template <class LossFn>
double fd_max_rel_err(std::span<double> params, std::span<const double> analytic, LossFn&& loss,
                      double step = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + step;
    const double lp = loss();
    params[i] = saved - step;
    const double lm = loss();
    params[i] = saved;
    const double fd = (lp - lm) / (2.0 * step);
    worst = std::max(worst, rel_err(analytic[i], fd));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Named verification suites (the `verify` CLI command)
// ---------------------------------------------------------------------------

struct SuiteResult {
  std::string name;
  bool pass = false;
  double max_err = 0.0;
  std::string detail;
};

const std::vector<std::string>& verify_suite_names();

// Runs one suite; throws std::invalid_argument for an unknown name.
SuiteResult run_verify_suite(const std::string& name, std::uint64_t seed);

std::vector<SuiteResult> run_all_verify_suites(std::uint64_t seed);

}  // namespace bfly
