#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "use/grad_check.hpp"
#include "use/retention.hpp"

using namespace use;
using Md = Matrix<double>;

namespace {

Md random_matrix(Index r, Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Md m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Md column(std::initializer_list<double> v) {
  Md m(static_cast<Index>(v.size()), 1);
  Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

// Token-by-token scalar loop, written independently of the library kernels.
Md recurrence_oracle(const Md& q, const Md& k, const Md& v, double gamma, Md state) {
  Md out(q.rows(), v.cols());
  for (Index n = 0; n < q.rows(); ++n) {
    for (Index i = 0; i < state.rows(); ++i) {
      for (Index j = 0; j < state.cols(); ++j) state(i, j) = gamma * state(i, j) + k(n, i) * v(n, j);
    }
    for (Index j = 0; j < v.cols(); ++j) {
      double acc = 0.0;
      for (Index i = 0; i < state.rows(); ++i) acc += q(n, i) * state(i, j);
      out(n, j) = acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("head decays follow 1 - 2^-(5+h)") {
  CHECK(head_decay(0) == doctest::Approx(1.0 - 1.0 / 32.0));
  CHECK(head_decay(1) == doctest::Approx(1.0 - 1.0 / 64.0));
  CHECK(head_decay(3) == doctest::Approx(1.0 - 1.0 / 256.0));
}

TEST_CASE("scalar recurrent trace") {
  const Md q = column({1, 1, 1});
  const Md k = column({1, 2, 1});
  const Md v = column({1, 1, 2});
  HeadState<double> s = HeadState<double>::zero(1, 1);
  const double expected[] = {1.0, 2.5, 3.25};
  for (Index n = 0; n < 3; ++n) {
    auto step = retention_recurrent_step<double>(q.row(n), k.row(n), v.row(n), s, 0.5);
    CHECK(step.state.s(0, 0) == doctest::Approx(expected[n]));
    CHECK(step.output(0) == doctest::Approx(expected[n]));
    s = step.state;
  }
  CHECK(retention_parallel<double>(q, k, v, 0.5) == Md(column({1.0, 2.5, 3.25})));
}

TEST_CASE("two-token parallel example") {
  const Md q = column({1, 1});
  const Md k = column({1, 1});
  const Md v = column({1, 1});
  const Md o = retention_parallel<double>(q, k, v, 0.5);
  CHECK(o(0, 0) == doctest::Approx(1.0));
  CHECK(o(1, 0) == doctest::Approx(1.5));
}

TEST_CASE("decay outside (0,1) is rejected") {
  const Md x = Md::Ones(2, 1);
  CHECK_THROWS_AS(retention_parallel<double>(x, x, x, 1.0), ConfigError);
  CHECK_THROWS_AS(retention_parallel<double>(x, x, x, 0.0), ConfigError);
  CHECK_THROWS_AS(retention_parallel<double>(x, x, x, -0.5), ConfigError);
}

TEST_CASE("empty chunk is rejected") {
  CHECK_THROWS_AS(retention_chunkwise<double>(Md(0, 2), Md(0, 2), Md(0, 2), HeadState<double>::zero(2, 2), 0.5),
                  EmptyInputError);
}

TEST_CASE("chunk split reproduces the parallel form") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> len(1, 40);
    const Index t = len(rng);
    const Md q = random_matrix(t, 4, rng), k = random_matrix(t, 4, rng), v = random_matrix(t, 3, rng);
    const double gamma = 1.0 - std::ldexp(1.0, -(5 + trial % 4));
    const Md par = retention_parallel(q, k, v, gamma);
    CHECK((par - recurrence_oracle(q, k, v, gamma, Md::Zero(4, 3))).cwiseAbs().maxCoeff() < 1e-10);
    HeadState<double> s = HeadState<double>::zero(4, 3);
    Md chunked(t, 3);
    Index start = 0;
    std::uniform_int_distribution<int> piece(1, 9);
    while (start < t) {
      const Index c = std::min<Index>(piece(rng), t - start);
      auto r = retention_chunkwise<double>(q.middleRows(start, c), k.middleRows(start, c), v.middleRows(start, c), s,
                                           gamma);
      chunked.middleRows(start, c) = r.output;
      s = r.state;
      start += c;
    }
    CHECK((par - chunked).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("carried state equals state from the prefix") {
  std::mt19937_64 rng(4);
  const Md k = random_matrix(10, 3, rng), v = random_matrix(10, 2, rng);
  const auto whole = retention_state_update<double>(k, v, HeadState<double>::zero(3, 2), 0.9);
  const auto first = retention_state_update<double>(k.topRows(4), v.topRows(4), HeadState<double>::zero(3, 2), 0.9);
  const auto second = retention_state_update<double>(k.bottomRows(6), v.bottomRows(6), first, 0.9);
  CHECK((whole.s - second.s).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("retention op gradients, with and without carried state") {
  std::mt19937_64 rng(8);
  const Md q = random_matrix(6, 3, rng), k = random_matrix(6, 3, rng), v = random_matrix(6, 2, rng);
  const Md w = random_matrix(6, 2, rng);
  const HeadState<double> carry{random_matrix(3, 2, rng)};
  for (const HeadState<double>* in : {static_cast<const HeadState<double>*>(nullptr), &carry}) {
    std::vector<Md> inputs = {q, k, v};
    const auto res = grad_check(
        [&](Graph<double>& g, const std::vector<Tensor<double>>& x) {
          return sum(mul(retention(x[0], x[1], x[2], 0.8, in), g.constant(w)));
        },
        inputs);
    CHECK(res.max_relative_error < 1e-6);
  }
}

TEST_CASE("multi-head retention threads per-head states") {
  std::mt19937_64 rng(9);
  const int heads = 2, dh = 3, d = heads * dh;
  Graph<double> g(false);
  RetentionWeights<Tensor<double>> w;
  for (int h = 0; h < heads; ++h) {
    w.wq.push_back(g.leaf(random_matrix(d, dh, rng)));
    w.wk.push_back(g.leaf(random_matrix(d, dh, rng)));
    w.wv.push_back(g.leaf(random_matrix(d, dh, rng)));
  }
  w.wo = g.leaf(random_matrix(d, d, rng));
  const RetentionConfig cfg{heads, dh, false};
  const Md x = random_matrix(12, d, rng);
  const Md whole = multi_head_retention(g.leaf(x), w, cfg, nullptr, nullptr).value();
  LayerState<double> mid;
  const Md a = multi_head_retention(g.leaf(Md(x.topRows(5))), w, cfg, nullptr, &mid).value();
  const Md b = multi_head_retention(g.leaf(Md(x.bottomRows(7))), w, cfg, &mid, nullptr).value();
  CHECK((whole.topRows(5) - a).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((whole.bottomRows(7) - b).cwiseAbs().maxCoeff() < 1e-10);
  RetentionConfig reserved = cfg;
  reserved.normalized = true;
  CHECK_THROWS_AS(multi_head_retention(g.leaf(x), w, reserved, nullptr, nullptr), ConfigError);
}

TEST_CASE("retention differs from softmax attention") {
  std::mt19937_64 rng(2);
  const Md q = random_matrix(5, 3, rng), k = random_matrix(5, 3, rng), v = random_matrix(5, 3, rng);
  CHECK((retention_parallel(q, k, v, 0.9) - causal_attention(q, k, v)).cwiseAbs().maxCoeff() > 1e-3);
}
