#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "use/grad_check.hpp"
#include "use/tensor.hpp"

using namespace use;
using Md = Matrix<double>;

namespace {

Md random_matrix(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Md m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Md mat(std::initializer_list<std::initializer_list<double>> rows) {
  Md m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (const auto& row : rows) {
    Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

void check_grad(const LossFn& f, std::vector<Md> inputs, double tol = 1e-6) {
  const auto res = grad_check(f, inputs);
  CHECK(res.max_relative_error < tol);
}

}  // namespace

TEST_CASE("matmul values and shape errors") {
  Graph<double> g;
  auto a = g.leaf(mat({{1, 2}}));
  auto b = g.leaf(mat({{3}, {5}}));
  CHECK(matmul(a, b).item() == doctest::Approx(13.0));
  auto c = g.leaf(mat({{1, 2}, {3, 4}}));
  auto id = g.constant(Md::Identity(2, 2));
  CHECK(matmul(c, id).value() == c.value());
  CHECK_THROWS_AS(matmul(a, c.graph()->leaf(Md::Zero(3, 1))), DimensionError);
}

TEST_CASE("elementwise broadcast rules") {
  Graph<double> g;
  auto a = g.leaf(mat({{1, 2}, {3, 4}}));
  auto s = g.leaf(mat({{10}}));
  CHECK((a + s).value() == mat({{11, 12}, {13, 14}}));
  CHECK(mul(a, s).value() == mat({{10, 20}, {30, 40}}));
  auto row = g.leaf(mat({{1, 1}}));
  CHECK_THROWS_AS(a + g.leaf(Md::Zero(3, 3)), DimensionError);
  (void)row;
}

TEST_CASE("sigmoid derivative at zero and stability") {
  Graph<double> g;
  auto x = g.leaf(mat({{0.0}}));
  auto y = sigmoid(x);
  CHECK(y.item() == doctest::Approx(0.5));
  g.backward(y);
  CHECK(x.grad()(0, 0) == doctest::Approx(0.25));
  Graph<double> g2(false);
  auto big = sigmoid(g2.leaf(mat({{-1000.0, 1000.0}})));
  CHECK(big.value()(0, 0) == 0.0);
  CHECK(big.value()(0, 1) == 1.0);
  CHECK(std::isfinite(big.value()(0, 0)));
}

TEST_CASE("softmax of equal logits is uniform") {
  Graph<double> g(false);
  auto p = softmax(g.leaf(Md::Constant(2, 4, 3.0)), Axis::Cols);
  CHECK((p.value().array() - 0.25).abs().maxCoeff() < 1e-15);
  auto q = softmax(g.leaf(mat({{1000, 1000}})), Axis::Cols);
  CHECK(q.value()(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("log of non-positive input is a domain error") {
  Graph<double> g;
  CHECK_THROWS_AS(log(g.leaf(mat({{0.0}}))), DomainError);
  CHECK_THROWS_AS(log(g.leaf(mat({{-1.0}}))), DomainError);
}

TEST_CASE("backward twice without reset is rejected") {
  Graph<double> g;
  auto x = g.leaf(mat({{2.0}}));
  auto y = mul(x, x);
  g.backward(y);
  CHECK(x.grad()(0, 0) == doctest::Approx(4.0));
  CHECK_THROWS_AS(g.backward(y), GraphError);
  g.reset();
  g.backward(y);
  CHECK(x.grad()(0, 0) == doctest::Approx(4.0));
}

TEST_CASE("backward needs a scalar") {
  Graph<double> g;
  auto x = g.leaf(Md::Ones(2, 2));
  CHECK_THROWS_AS(g.backward(x), DimensionError);
}

TEST_CASE("gradients of shared subexpressions accumulate") {
  Graph<double> g;
  auto x = g.leaf(mat({{3.0}}));
  auto y = x + x + mul(x, x);
  g.backward(y);
  CHECK(x.grad()(0, 0) == doctest::Approx(2.0 + 6.0));
}

TEST_CASE("mixing graphs is rejected") {
  Graph<double> g1, g2;
  auto a = g1.leaf(Md::Ones(1, 1));
  auto b = g2.leaf(Md::Ones(1, 1));
  CHECK_THROWS_AS(a + b, GraphError);
}

TEST_CASE("gather rows checks ids") {
  Graph<double> g;
  auto table = g.leaf(mat({{1, 2}, {3, 4}, {5, 6}}));
  std::vector<int> ids = {2, 0, 2};
  auto r = gather_rows(table, std::span<const int>(ids));
  CHECK(r.value() == mat({{5, 6}, {1, 2}, {5, 6}}));
  g.backward(sum(r));
  CHECK(table.grad() == mat({{1, 1}, {0, 0}, {2, 2}}));
  std::vector<int> bad = {3};
  CHECK_THROWS_AS(gather_rows(table, std::span<const int>(bad)), IndexError);
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
  std::mt19937_64 rng(3);
  Graph<double> g(false);
  auto x = g.leaf(random_matrix(4, 8, rng, 3.0));
  auto y = layer_norm(x, g.constant(Md::Ones(1, 8)), g.constant(Md::Zero(1, 8)));
  for (Index r = 0; r < 4; ++r) {
    CHECK(std::abs(y.value().row(r).mean()) < 1e-12);
    const double var = (y.value().row(r).array() - y.value().row(r).mean()).square().mean();
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("normalize rows rejects zero rows") {
  Graph<double> g;
  CHECK_THROWS_AS(normalize_rows(g.leaf(Md::Zero(1, 3))), DegenerateEmbeddingError);
}

TEST_CASE("bce with logits matches definition") {
  Graph<double> g(false);
  auto z = g.leaf(mat({{0.0, 0.0}}));
  CHECK(bce_with_logits_mean(z, mat({{1.0, 0.0}})).item() == doctest::Approx(std::log(2.0)));
  auto sat = g.leaf(mat({{40.0, -40.0}}));
  CHECK(bce_with_logits_mean(sat, mat({{1.0, 0.0}})).item() < 1e-15);
  auto extreme = g.leaf(mat({{-800.0}}));
  CHECK(bce_with_logits_mean(extreme, mat({{1.0}})).item() == doctest::Approx(800.0));
}

TEST_CASE("softmax cross entropy with exclusion") {
  Graph<double> g(false);
  auto z = g.leaf(mat({{0.0, 0.0, 0.0, 5.0}}));
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> ex(1, 4);
  ex << false, false, false, true;
  std::vector<int> t = {0};
  CHECK(softmax_cross_entropy_mean(z, std::span<const int>(t), &ex).item() == doctest::Approx(std::log(3.0)));
  std::vector<int> bad = {3};
  CHECK_THROWS_AS(softmax_cross_entropy_mean(z, std::span<const int>(bad), &ex), IndexError);
  std::vector<int> oob = {4};
  CHECK_THROWS_AS(softmax_cross_entropy_mean(z, std::span<const int>(oob)), IndexError);
}

TEST_CASE("finite-difference checks of every op") {
  std::mt19937_64 rng(11);
  const Md a = random_matrix(3, 4, rng);
  const Md b = random_matrix(4, 2, rng);
  const Md bias = random_matrix(1, 2, rng);
  const Md sq = random_matrix(3, 4, rng);
  const Md pos = (random_matrix(3, 4, rng).array().abs() + 0.5).matrix();

  SUBCASE("matmul, affine, transpose") {
    check_grad([](Graph<double>&, const std::vector<Tensor<double>>& in) {
      return sum(mul(affine(in[0], in[1], in[2]), affine(in[0], in[1], in[2])));
    }, {a, b, bias});
    check_grad([](Graph<double>&, const std::vector<Tensor<double>>& in) {
      return sum(matmul(transpose(in[0]), in[1]));
    }, {a, sq});
  }
  SUBCASE("add, sub, mul with scalar broadcast") {
    const Md s = random_matrix(1, 1, rng);
    check_grad([](Graph<double>&, const std::vector<Tensor<double>>& in) {
      return sum(mul(sub(in[0], in[2]), add(in[1], in[2])));
    }, {a, sq, s});
    check_grad([](Graph<double>&, const std::vector<Tensor<double>>& in) {
      return sum(mul(in[0], in[1]));
    }, {s, a});
  }
  SUBCASE("sigmoid, gelu, exp, log") {
    check_grad([](Graph<double>&, const std::vector<Tensor<double>>& in) {
      return sum(mul(sigmoid(in[0]), gelu(in[0])));
    }, {a});
    check_grad([](Graph<double>&, const std::vector<Tensor<double>>& in) {
      return sum(add(exp(scale(in[0], 0.3)), log(in[1])));
    }, {a, pos});
  }
  SUBCASE("reductions and softmax") {
    const Md w = random_matrix(3, 4, rng);
    for (Axis ax : {Axis::Rows, Axis::Cols, Axis::All}) {
      check_grad([ax, w](Graph<double>& g, const std::vector<Tensor<double>>& in) {
        return sum(mul(softmax(in[0], ax == Axis::All ? Axis::Cols : ax), g.constant(w))) +
               sum(mul(mean(in[0], ax), mean(in[0], ax)));
      }, {a});
    }
  }
  SUBCASE("layer norm and normalize rows") {
    const Md gain = random_matrix(1, 4, rng);
    const Md beta = random_matrix(1, 4, rng);
    const Md w = random_matrix(3, 4, rng);
    check_grad([w](Graph<double>& g, const std::vector<Tensor<double>>& in) {
      return sum(mul(layer_norm(in[0], in[1], in[2]), g.constant(w)));
    }, {a, gain, beta});
    check_grad([w](Graph<double>& g, const std::vector<Tensor<double>>& in) {
      return sum(mul(normalize_rows(in[0]), g.constant(w)));
    }, {a});
  }
  SUBCASE("gather, slice, concat") {
    const Md w = random_matrix(5, 4, rng);
    check_grad([w](Graph<double>& g, const std::vector<Tensor<double>>& in) {
      static const std::vector<int> ids = {1, 1, 0, 2, 2};
      auto rows = gather_rows(in[0], std::span<const int>(ids));
      auto joined = concat_rows(std::vector<Tensor<double>>{slice_rows(rows, 0, 2), slice_rows(rows, 2, 3)});
      auto wide = concat_cols(std::vector<Tensor<double>>{slice_cols(joined, 0, 1), slice_cols(joined, 1, 3)});
      return sum(mul(wide, g.constant(w)));
    }, {a});
  }
  SUBCASE("fused losses") {
    Md y = Md::Zero(3, 4);
    y(0, 1) = y(1, 3) = y(2, 0) = y(2, 2) = 1.0;
    check_grad([y](Graph<double>&, const std::vector<Tensor<double>>& in) {
      return bce_with_logits_mean(in[0], y);
    }, {a});
    check_grad([](Graph<double>&, const std::vector<Tensor<double>>& in) {
      static const std::vector<int> t = {0, 3, 1};
      Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> ex = Eigen::Array<bool, -1, -1>::Constant(3, 4, false);
      ex(0, 2) = true;
      return softmax_cross_entropy_mean(in[0], std::span<const int>(t), &ex);
    }, {a});
  }
}

TEST_CASE("float and double agree") {
  std::mt19937_64 rng(5);
  const Md a = random_matrix(4, 6, rng);
  Graph<double> gd(false);
  Graph<float> gf(false);
  auto yd = gelu(layer_norm(gd.leaf(a), gd.constant(Md::Ones(1, 6)), gd.constant(Md::Zero(1, 6))));
  Matrix<float> af = a.cast<float>();
  auto yf = gelu(layer_norm(gf.leaf(af), gf.constant(Matrix<float>::Ones(1, 6)), gf.constant(Matrix<float>::Zero(1, 6))));
  CHECK((yd.value() - yf.value().cast<double>()).cwiseAbs().maxCoeff() < 1e-5);
}
