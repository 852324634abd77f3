#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bfly/baselines.hpp"
#include "bfly/verify.hpp"

using namespace bfly;

namespace {

Matrix<double> random_batch(index_t rows, index_t n, Rng& rng) {
  Matrix<double> m(rows, n);
  for (auto& v : m.data) v = rng.uniform(-1.0, 1.0);
  return m;
}

// shared finite-difference run: loss = sum(upstream .* forward(x))
template <class Layer, class ForwardFn, class Params, class Analytic>
void check_fd(Layer& layer, ForwardFn&& fwd, Matrix<double>& x, const Matrix<double>& gmat,
              Params params, Analytic analytic) {
  auto loss = [&] {
    const auto y = fwd(layer, x);
    double l = 0.0;
    for (std::size_t i = 0; i < y.data.size(); ++i) l += y.data[i] * gmat.data[i];
    return l;
  };
  CHECK(fd_max_rel_err(params, analytic, loss) <= 1e-5);
}

}  // namespace

TEST_CASE("dense identity weight passes input through") {
  Rng rng(1);
  auto layer = dense_new<double>(4, 4, rng, true);
  layer.weight = MatD::identity(4);
  std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
  const auto x = random_batch(3, 4, rng);
  CHECK(dense_apply(layer, x).data == x.data);
}

TEST_CASE("dense param count 1024 -> 1024 with bias") {
  Rng rng(2);
  const auto layer = dense_new<double>(1024, 1024, rng, true);
  CHECK(layer.param_count() == 1049600);
}

TEST_CASE("dense gradients match finite differences") {
  Rng rng(3);
  auto layer = dense_new<double>(16, 16, rng, true);
  auto x = random_batch(3, 16, rng);
  const auto gmat = random_batch(3, 16, rng);
  DenseCache<double> cache;
  (void)dense_forward(layer, x, cache);
  const auto g = dense_backward(layer, cache, gmat);
  const auto fwd = [](const DenseLinearLayer<double>& l, const Matrix<double>& in) {
    return dense_apply(l, in);
  };
  check_fd(layer, fwd, x, gmat, std::span<double>(layer.weight.data),
           std::span<const double>(g.weight.data));
  check_fd(layer, fwd, x, gmat, std::span<double>(layer.bias), std::span<const double>(g.bias));
  check_fd(layer, fwd, x, gmat, std::span<double>(x.data), std::span<const double>(g.input.data));
}

TEST_CASE("lowrank rank 0 is the zero operator plus bias") {
  Rng rng(4);
  const auto layer = lowrank_new<double>(8, 8, 0, rng, true);
  CHECK(layer.param_count() == 8);
  const auto y = lowrank_apply(layer, random_batch(2, 8, rng));
  for (index_t s = 0; s < 2; ++s)
    for (index_t i = 0; i < 8; ++i) CHECK(y(s, i) == layer.bias[static_cast<std::size_t>(i)]);
}

TEST_CASE("lowrank equals dense with W = UV") {
  Rng rng(5);
  const auto layer = lowrank_new<double>(12, 10, 3, rng, false);
  DenseLinearLayer<double> dense;
  dense.weight = matmul(layer.u, layer.v);
  const auto x = random_batch(4, 10, rng);
  CHECK(max_rel_err(lowrank_apply(layer, x), dense_apply(dense, x)) <= 1e-12);
}

TEST_CASE("lowrank parameter counts at r=6") {
  Rng rng(6);
  CHECK(lowrank_new<double>(1024, 1024, 6, rng, false).param_count() == 12288);
  CHECK(lowrank_new<double>(1024, 1024, 6, rng, true).param_count() == 13312);
  CHECK_THROWS_AS(lowrank_new<double>(8, 8, 9, rng), std::invalid_argument);
}

TEST_CASE("lowrank gradients match finite differences") {
  Rng rng(7);
  auto layer = lowrank_new<double>(16, 16, 4, rng, true);
  auto x = random_batch(2, 16, rng);
  const auto gmat = random_batch(2, 16, rng);
  LowRankCache<double> cache;
  (void)lowrank_forward(layer, x, cache);
  const auto g = lowrank_backward(layer, cache, gmat);
  const auto fwd = [](const LowRankLayer<double>& l, const Matrix<double>& in) {
    return lowrank_apply(l, in);
  };
  check_fd(layer, fwd, x, gmat, std::span<double>(layer.u.data), std::span<const double>(g.u.data));
  check_fd(layer, fwd, x, gmat, std::span<double>(layer.v.data), std::span<const double>(g.v.data));
  check_fd(layer, fwd, x, gmat, std::span<double>(x.data), std::span<const double>(g.input.data));
}

TEST_CASE("circulant impulse kernel is the identity") {
  Rng rng(8);
  auto layer = circulant_new<double>(8, rng, false);
  std::fill(layer.c.begin(), layer.c.end(), 0.0);
  layer.c[0] = 1.0;
  const auto x = random_batch(2, 8, rng);
  CHECK(max_rel_err(circulant_apply(layer, x), x) <= 1e-12);
}

TEST_CASE("circulant hand example n=4 against the explicit matrix") {
  Rng rng(9);
  auto layer = circulant_new<double>(4, rng, false);
  layer.c = {1, 0, 0, 1};
  Matrix<double> x(1, 4);
  x.data = {1, 2, 3, 4};
  const auto got = circulant_apply(layer, x);
  const auto want = matvec(circulant_matrix(layer), x.data);
  CHECK(max_rel_err(got.data, want) <= 1e-12);
  // hand check: row i sums x[i] and x[(i+1) mod 4]
  CHECK(got(0, 0) == doctest::Approx(3.0));
  CHECK(got(0, 1) == doctest::Approx(5.0));
  CHECK(got(0, 2) == doctest::Approx(7.0));
  CHECK(got(0, 3) == doctest::Approx(5.0));
}

TEST_CASE("circulant fft path matches the explicit matrix up to n=512") {
  Rng rng(10);
  for (const index_t n : {2, 16, 128, 512}) {
    const auto layer = circulant_new<double>(n, rng, false);
    REQUIRE(layer.fft_path());
    const auto x = random_batch(2, n, rng);
    const auto m = circulant_matrix(layer);
    Matrix<double> want(2, n);
    for (index_t s = 0; s < 2; ++s) {
      const auto y = matvec(m, std::vector<double>(x.row(s).begin(), x.row(s).end()));
      std::copy(y.begin(), y.end(), want.row(s).begin());
    }
    CHECK(max_rel_err(circulant_apply(layer, x), want) <= 1e-9);
  }
}

TEST_CASE("circulant direct fallback for non power of two") {
  Rng rng(11);
  const auto layer = circulant_new<double>(6, rng, false);
  CHECK(!layer.fft_path());
  const auto x = random_batch(2, 6, rng);
  const auto m = circulant_matrix(layer);
  Matrix<double> want(2, 6);
  for (index_t s = 0; s < 2; ++s) {
    const auto y = matvec(m, std::vector<double>(x.row(s).begin(), x.row(s).end()));
    std::copy(y.begin(), y.end(), want.row(s).begin());
  }
  CHECK(max_rel_err(circulant_apply(layer, x), want) <= 1e-12);
}

TEST_CASE("circulant gradients match finite differences (fft and direct)") {
  Rng rng(12);
  for (const index_t n : {16, 6}) {
    auto layer = circulant_new<double>(n, rng, true);
    auto x = random_batch(2, n, rng);
    const auto gmat = random_batch(2, n, rng);
    CirculantCache<double> cache;
    (void)circulant_forward(layer, x, cache);
    const auto g = circulant_backward(layer, cache, gmat);
    const auto fwd = [](const CirculantLayer<double>& l, const Matrix<double>& in) {
      return circulant_apply(l, in);
    };
    check_fd(layer, fwd, x, gmat, std::span<double>(layer.c), std::span<const double>(g.c));
    check_fd(layer, fwd, x, gmat, std::span<double>(layer.bias), std::span<const double>(g.bias));
    check_fd(layer, fwd, x, gmat, std::span<double>(x.data), std::span<const double>(g.input.data));
  }
}

TEST_CASE("walsh hadamard frozen values and involution") {
  CHECK(walsh_hadamard(std::vector<double>{1, 0}) == std::vector<double>{1, 1});
  CHECK(walsh_hadamard(std::vector<double>{1, 0, 0, 0}) == std::vector<double>{1, 1, 1, 1});
  CHECK_THROWS_AS(walsh_hadamard(std::vector<double>{1, 2, 3}), std::invalid_argument);

  Rng rng(13);
  std::vector<double> x(64);
  for (auto& v : x) v = rng.uniform(-1.0, 1.0);
  const auto hh = walsh_hadamard(walsh_hadamard(x));
  std::vector<double> want(x);
  for (auto& v : want) v *= 64.0;
  CHECK(max_rel_err(hh, want) <= 1e-12);
}

TEST_CASE("fastfood with unit diagonals and identity permutation scales by sqrt(n)") {
  Rng rng(14);
  for (const index_t n : {2, 16}) {
    auto layer = fastfood_new<double>(n, rng, false);
    std::fill(layer.scale.begin(), layer.scale.end(), 1.0);
    std::fill(layer.gauss.begin(), layer.gauss.end(), 1.0);
    std::fill(layer.sign.begin(), layer.sign.end(), 1.0);
    layer.perm = Permutation::identity(n);
    const auto x = random_batch(2, n, rng);
    Matrix<double> want = x;
    for (auto& v : want.data) v *= std::sqrt(static_cast<double>(n));
    CHECK(max_rel_err(fastfood_apply(layer, x), want) <= 1e-12);
  }
  CHECK_THROWS_AS(fastfood_new<double>(12, rng), std::invalid_argument);
}

TEST_CASE("fastfood parameter count") {
  Rng rng(15);
  CHECK(fastfood_new<double>(1024, rng, false).param_count() == 3072);
  CHECK(fastfood_new<double>(1024, rng, true).param_count() == 4096);
}

TEST_CASE("fastfood gradients match finite differences") {
  Rng rng(16);
  auto layer = fastfood_new<double>(16, rng, true);
  auto x = random_batch(2, 16, rng);
  const auto gmat = random_batch(2, 16, rng);
  FastfoodCache<double> cache;
  (void)fastfood_forward(layer, x, cache);
  const auto g = fastfood_backward(layer, cache, gmat);
  const auto fwd = [](const FastfoodLayer<double>& l, const Matrix<double>& in) {
    return fastfood_apply(l, in);
  };
  check_fd(layer, fwd, x, gmat, std::span<double>(layer.scale), std::span<const double>(g.scale));
  check_fd(layer, fwd, x, gmat, std::span<double>(layer.gauss), std::span<const double>(g.gauss));
  check_fd(layer, fwd, x, gmat, std::span<double>(layer.sign), std::span<const double>(g.sign));
  check_fd(layer, fwd, x, gmat, std::span<double>(layer.bias), std::span<const double>(g.bias));
  check_fd(layer, fwd, x, gmat, std::span<double>(x.data), std::span<const double>(g.input.data));
}
