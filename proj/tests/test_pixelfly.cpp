#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bfly/pixelfly.hpp"
#include "bfly/verify.hpp"

using namespace bfly;

namespace {

Matrix<double> random_batch(index_t rows, index_t n, Rng& rng) {
  Matrix<double> m(rows, n);
  for (auto& v : m.data) v = rng.uniform(-1.0, 1.0);
  return m;
}

}  // namespace

TEST_CASE("mask single-block and m=4 cases") {
  const auto m1 = build_mask(4, 4);
  CHECK(m1.support == std::vector<std::pair<index_t, index_t>>{{0, 0}});
  CHECK(m1.scalar_nnz() == 16);

  const auto m4 = build_mask(16, 4);
  CHECK(m4.grid == 4);
  CHECK(static_cast<index_t>(m4.support.size()) == 4 * (1 + 2));
  CHECK(m4.scalar_nnz() == 192);
}

TEST_CASE("mask equals the brute-force factor-support union") {
  for (index_t m = 1; m <= 256; m *= 2) {
    const auto mask = build_mask(m * 2, 2);  // b = 2, grid m
    const auto want = butterfly_factor_support_union(m);
    CHECK(mask.support == want);
    CHECK(static_cast<index_t>(mask.support.size()) == m * (1 + log2_int(m)));
  }
}

TEST_CASE("mask support is XOR-symmetric") {
  const auto mask = build_mask(64, 4);
  for (const auto& [i, j] : mask.support) {
    const bool has = std::binary_search(mask.support.begin(), mask.support.end(),
                                        std::make_pair(j, i));
    CHECK(has);
  }
}

TEST_CASE("mask validation errors name both values") {
  CHECK_THROWS_WITH_AS(build_mask(16, 3), doctest::Contains("3"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(build_mask(48, 4), doctest::Contains("12"), std::invalid_argument);
  CHECK_THROWS_AS(build_mask(16, 4, 5), std::invalid_argument);
}

TEST_CASE("truncated band count") {
  const auto mask = build_mask(64, 4, 1);  // grid 16, one band
  CHECK(static_cast<index_t>(mask.support.size()) == 16 * 2);
  CHECK(mask.levels == 1);
}

TEST_CASE("zero layer is the zero operator") {
  Rng rng(1);
  const auto layer = pixelfly_new<double>(16, 4, 0, PixelflyInit::Zero, rng);
  const auto y = pixelfly_apply(layer, random_batch(3, 16, rng));
  for (double v : y.data) CHECK(v == 0.0);
  const auto dense = dense_reconstruct_pixelfly(layer);
  for (double v : dense.data) CHECK(v == 0.0);
}

TEST_CASE("parameter count formula matches allocation") {
  Rng rng(2);
  const auto big = pixelfly_new<double>(1024, 16, 16, PixelflyInit::Zero, rng);
  CHECK(big.param_count() == 147456);
  CHECK(static_cast<index_t>(big.sparse_values.size() + big.low_rank_u.data.size() +
                             big.low_rank_v.data.size()) == big.param_count());

  for (const index_t n : {16, 64, 256}) {
    for (const index_t b : {4, 8}) {
      if (n % b != 0) continue;
      for (const index_t r : {0, 2, 8}) {
        const auto layer = pixelfly_new<double>(n, b, r, PixelflyInit::Uniform, rng);
        const index_t m = n / b;
        CHECK(layer.param_count() == b * b * m * (1 + log2_int(m)) + 2 * n * r);
        CHECK(static_cast<index_t>(layer.sparse_values.size() + layer.low_rank_u.data.size() +
                                   layer.low_rank_v.data.size()) == layer.param_count());
      }
    }
  }
  CHECK_THROWS_AS(pixelfly_new<double>(16, 4, 17, PixelflyInit::Zero, rng), std::invalid_argument);
}

TEST_CASE("constructed identity layer acts as the identity") {
  Rng rng(3);
  auto layer = pixelfly_new<double>(4, 4, 4, PixelflyInit::Zero, rng);
  for (index_t i = 0; i < 4; ++i) {
    layer.low_rank_u(i, i) = 1.0;
    layer.low_rank_v(i, i) = 1.0;
  }
  const std::vector<double> x{1, -2, 3, 0.5};
  CHECK(max_rel_err(pixelfly_apply(layer, x), x) <= 1e-15);
  CHECK(max_rel_err(dense_reconstruct_pixelfly(layer), MatD::identity(4)) <= 1e-15);
}

TEST_CASE("apply equals the densified oracle") {
  Rng rng(4);
  for (const index_t n : {16, 64, 256}) {
    for (const index_t r : {0, 3}) {
      auto layer = pixelfly_new<double>(n, 4, r, PixelflyInit::Uniform, rng);
      layer.bias.assign(static_cast<std::size_t>(n), 0.0);
      for (auto& v : layer.bias) v = rng.uniform(-1.0, 1.0);
      const auto dense = dense_reconstruct_pixelfly(layer);
      const auto x = random_batch(5, n, rng);
      const auto got = pixelfly_apply(layer, x);
      Matrix<double> want(5, n);
      for (index_t s = 0; s < 5; ++s) {
        const auto y = matvec(dense, std::vector<double>(x.row(s).begin(), x.row(s).end()));
        for (index_t i = 0; i < n; ++i) want(s, i) = y[static_cast<std::size_t>(i)] + layer.bias[static_cast<std::size_t>(i)];
      }
      CHECK(max_rel_err(got, want) <= 1e-12);
    }
  }
}

TEST_CASE("low-rank only path matches (UV) x") {
  Rng rng(5);
  auto layer = pixelfly_new<double>(32, 8, 4, PixelflyInit::Uniform, rng);
  std::fill(layer.sparse_values.begin(), layer.sparse_values.end(), 0.0);
  const auto x = random_batch(4, 32, rng);
  const auto got = pixelfly_apply(layer, x);
  const auto uv = matmul(layer.low_rank_u, layer.low_rank_v);
  Matrix<double> want(4, 32);
  for (index_t s = 0; s < 4; ++s) {
    const auto y = matvec(uv, std::vector<double>(x.row(s).begin(), x.row(s).end()));
    for (index_t i = 0; i < 32; ++i) want(s, i) = y[static_cast<std::size_t>(i)];
  }
  CHECK(max_rel_err(got, want) <= 1e-12);
}

TEST_CASE("densified sparse part has exactly the mask support") {
  Rng rng(6);
  const auto layer = pixelfly_new<double>(32, 4, 0, PixelflyInit::Uniform, rng);
  const auto dense = dense_reconstruct_pixelfly(layer);
  const index_t b = layer.mask.block;
  for (index_t i = 0; i < 32; ++i)
    for (index_t j = 0; j < 32; ++j) {
      const bool on_mask = std::binary_search(layer.mask.support.begin(), layer.mask.support.end(),
                                              std::make_pair(i / b, j / b));
      if (!on_mask) CHECK(dense(i, j) == 0.0);
    }
}

TEST_CASE("zero upstream gives zero grads") {
  Rng rng(7);
  const auto layer = pixelfly_new<double>(16, 4, 2, PixelflyInit::Uniform, rng);
  PixelflyCache<double> cache;
  (void)pixelfly_forward(layer, random_batch(3, 16, rng), cache);
  const auto g = pixelfly_backward(layer, cache, Matrix<double>(3, 16));
  for (double v : g.sparse_values) CHECK(v == 0.0);
  for (double v : g.low_rank_u.data) CHECK(v == 0.0);
  for (double v : g.low_rank_v.data) CHECK(v == 0.0);
  for (double v : g.input.data) CHECK(v == 0.0);
}

TEST_CASE("gradients match central finite differences") {
  Rng rng(8);
  const index_t n = 16;
  auto layer = pixelfly_new<double>(n, 4, 3, PixelflyInit::Uniform, rng);
  layer.bias.assign(static_cast<std::size_t>(n), 0.0);
  for (auto& v : layer.bias) v = rng.uniform(-0.5, 0.5);
  auto x = random_batch(2, n, rng);
  const auto gmat = random_batch(2, n, rng);

  PixelflyCache<double> cache;
  (void)pixelfly_forward(layer, x, cache);
  const auto grads = pixelfly_backward(layer, cache, gmat);

  auto loss = [&] {
    const auto y = pixelfly_apply(layer, x);
    double l = 0.0;
    for (std::size_t i = 0; i < y.data.size(); ++i) l += y.data[i] * gmat.data[i];
    return l;
  };

  CHECK(fd_max_rel_err(std::span<double>(layer.sparse_values),
                       std::span<const double>(grads.sparse_values), loss) <= 1e-5);
  CHECK(fd_max_rel_err(std::span<double>(layer.low_rank_u.data),
                       std::span<const double>(grads.low_rank_u.data), loss) <= 1e-5);
  CHECK(fd_max_rel_err(std::span<double>(layer.low_rank_v.data),
                       std::span<const double>(grads.low_rank_v.data), loss) <= 1e-5);
  CHECK(fd_max_rel_err(std::span<double>(layer.bias), std::span<const double>(grads.bias), loss) <=
        1e-5);
  CHECK(fd_max_rel_err(std::span<double>(x.data), std::span<const double>(grads.input.data), loss) <=
        1e-5);
}

TEST_CASE("single dense block reproduces a dense linear layer") {
  Rng rng(9);
  const index_t n = 8;
  const auto layer = pixelfly_new<double>(n, n, 0, PixelflyInit::Uniform, rng);
  REQUIRE(layer.mask.support.size() == 1);
  const auto x = random_batch(3, n, rng);
  const auto up = random_batch(3, n, rng);

  // forward: the one block is W itself
  MatD w(n, n);
  for (index_t i = 0; i < n; ++i)
    for (index_t j = 0; j < n; ++j) w(i, j) = layer.sparse_values[static_cast<std::size_t>(i * n + j)];
  PixelflyCache<double> cache;
  const auto y = pixelfly_forward(layer, x, cache);
  for (index_t s = 0; s < 3; ++s) {
    const auto want = matvec(w, std::vector<double>(x.row(s).begin(), x.row(s).end()));
    CHECK(max_rel_err(std::vector<double>(y.row(s).begin(), y.row(s).end()), want) <= 1e-13);
  }

  // backward: dW == sum_batch dy x^T, dx == W^T dy
  const auto g = pixelfly_backward(layer, cache, up);
  const MatD dw = matmul(transpose(up), x);
  CHECK(max_rel_err(std::vector<double>(g.sparse_values), dw.data) <= 1e-13);
  const MatD dx = matmul(up, w);
  CHECK(max_rel_err(g.input, dx) <= 1e-13);
}
