#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "use/grad_check.hpp"
#include "use/objectives.hpp"

using namespace use;
using Md = Matrix<double>;

namespace {

Md rows(std::initializer_list<std::initializer_list<double>> r) {
  Md m(static_cast<Index>(r.size()), static_cast<Index>(r.begin()->size()));
  Index i = 0;
  for (const auto& row : r) {
    Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

double sup_oracle(const Md& a, const Md& p, double tau) {
  const Index m = a.rows();
  Md e(2 * m, a.cols());
  e << a, p;
  auto cos = [&](Index i, Index j) { return e.row(i).dot(e.row(j)) / (e.row(i).norm() * e.row(j).norm()); };
  double total = 0.0;
  for (Index k = 0; k < 2 * m; ++k) {
    const Index partner = k < m ? k + m : k - m;
    double denom = 0.0;
    for (Index j = 0; j < 2 * m; ++j) {
      if (j != k) denom += std::exp(cos(k, j) / tau);
    }
    total += -std::log(std::exp(cos(k, partner) / tau) / denom);
  }
  return total / static_cast<double>(2 * m);
}

ModelConfig micro() {
  ModelConfig c;
  c.vocab_size = 7;
  c.num_layers = 1;
  c.num_heads = 1;
  c.hidden_size = 8;
  c.ffn_size = 8;
  c.num_predicted = 5;
  c.future_window = 4;
  c.max_seq_len = 32;
  c.chunk_len = 32;
  return c;
}

}  // namespace

TEST_CASE("fbp labels on the worked example") {
  const std::vector<int> seq = {0, 1, 0, 2, 1};
  const Md y = build_fbp_labels<double>(std::span<const int>(seq), 2, BehaviorsOfInterest::identity(3));
  CHECK(y == rows({{1, 1, 0}, {1, 0, 1}, {0, 1, 1}}));
}

TEST_CASE("fbp labels with W = T - 1 give one row of everything after position 1") {
  const std::vector<int> seq = {3, 0, 2, 2};
  const Md y = build_fbp_labels<double>(std::span<const int>(seq), 3, BehaviorsOfInterest::identity(4));
  CHECK(y == rows({{1, 0, 1, 0}}));
}

TEST_CASE("fbp labels require T > W") {
  const std::vector<int> seq = {1, 2, 3};
  CHECK_THROWS_AS(build_fbp_labels<double>(std::span<const int>(seq), 3, BehaviorsOfInterest::identity(4)),
                  LengthError);
}

TEST_CASE("specials are not behaviors of interest") {
  const auto b = BehaviorsOfInterest::all_behaviors(66);
  CHECK(b.num_columns == 64);
  CHECK(b.column(0) == kNotOfInterest);
  CHECK(b.column(1) == kNotOfInterest);
  CHECK(b.column(2) == 0);
  CHECK(b.column(65) == 63);
  const auto s = BehaviorsOfInterest::subset({5, 3}, 66);
  CHECK(s.column(5) == 0);
  CHECK(s.column(3) == 1);
  CHECK(s.column(4) == kNotOfInterest);
}

TEST_CASE("fbp labels equal set membership over random sequences") {
  std::mt19937_64 rng(1);
  const auto interest = BehaviorsOfInterest::all_behaviors(12);
  for (int trial = 0; trial < 200; ++trial) {
    const int w = 1 + static_cast<int>(rng() % 6);
    const int t = w + 1 + static_cast<int>(rng() % 20);
    std::vector<int> seq(static_cast<std::size_t>(t));
    for (auto& x : seq) x = 1 + static_cast<int>(rng() % 11);
    const Md y = build_fbp_labels<double>(std::span<const int>(seq), w, interest);
    REQUIRE(y.rows() == t - w);
    for (int i = 0; i < t - w; ++i) {
      std::set<int> present(seq.begin() + i + 1, seq.begin() + i + 1 + w);
      for (int id = 2; id < 12; ++id) CHECK(y(i, id - 2) == (present.count(id) ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("fbp loss values") {
  Graph<double> g(false);
  CHECK(fbp_loss(g.leaf(Md::Zero(1, 2)), rows({{1, 0}})).item() == doctest::Approx(std::log(2.0)));
  CHECK(fbp_loss(g.leaf(Md::Zero(3, 7)), Md::Ones(3, 7)).item() == doctest::Approx(std::log(2.0)));
  CHECK(fbp_loss(g.leaf(rows({{20, -20}})), rows({{1, 0}})).item() < 1e-8);
}

TEST_CASE("sup loss worked example") {
  Graph<double> g(false);
  const Md e = rows({{1, 0}, {0, 1}});
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
  CHECK(expected == doctest::Approx(0.5514).epsilon(1e-3));
  CHECK(sup_loss(g.leaf(e), g.leaf(e), 1.0).item() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(sup_loss(g.leaf(e), g.leaf(e), 0.01).item() < 1e-10);
}

TEST_CASE("sup loss is scale invariant and matches the brute-force oracle") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Index m = 2 + static_cast<Index>(trial % 5);
    Md a(m, 4), p(m, 4);
    for (Index i = 0; i < a.size(); ++i) {
      a.data()[i] = n(rng);
      p.data()[i] = n(rng);
    }
    Graph<double> g(false);
    const double l = sup_loss(g.leaf(a), g.leaf(p), 0.3).item();
    CHECK(l == doctest::Approx(sup_oracle(a, p, 0.3)).epsilon(1e-10));
    CHECK(sup_loss(g.leaf(Md(5.0 * a)), g.leaf(Md(5.0 * p)), 0.3).item() == doctest::Approx(l).epsilon(1e-12));
  }
}

TEST_CASE("sup loss decreases as an anchor moves toward its positive") {
  Md a = rows({{1, 0.2, 0}, {0, 1, 0.3}, {0.3, 0, 1}});
  const Md p = rows({{0.2, 1, 0}, {0.1, 0.2, 1}, {1, 0.1, 0.1}});
  double prev = 1e9;
  for (int step = 0; step <= 10; ++step) {
    Md moved = a;
    const double t = step / 10.0;
    moved.row(0) = (1 - t) * a.row(0) + t * p.row(0);
    Graph<double> g(false);
    const double l = sup_loss(g.leaf(moved), g.leaf(p), 0.5).item();
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("sup loss rejects degenerate inputs") {
  Graph<double> g(false);
  CHECK_THROWS_AS(sup_loss(g.leaf(rows({{1, 0}})), g.leaf(rows({{1, 0}})), 0.1), ConfigError);
  CHECK_THROWS_AS(sup_loss(g.leaf(rows({{1, 0}, {0, 0}})), g.leaf(rows({{1, 0}, {0, 1}})), 0.1),
                  DegenerateEmbeddingError);
  CHECK_THROWS_AS(sup_loss(g.leaf(rows({{1, 0}, {0, 1}})), g.leaf(rows({{1, 0}, {0, 1}})), 0.0), ConfigError);
}

TEST_CASE("opposite-view negatives use only the other side") {
  const Md a = rows({{1, 0}, {0, 1}});
  Graph<double> g(false);
  const double l = sup_loss(g.leaf(a), g.leaf(a), 1.0, NegativeSet::OppositeView).item();
  CHECK(l == doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0))));
}

TEST_CASE("clm loss values") {
  Graph<double> g(false);
  const std::vector<int> t = {0, 3, 2};
  CHECK(clm_loss(g.leaf(Md::Zero(3, 4)), std::span<const int>(t)).item() == doctest::Approx(std::log(4.0)));
  Md sharp = Md::Zero(3, 4);
  for (int r = 0; r < 3; ++r) sharp(r, t[static_cast<std::size_t>(r)]) = 20.0;
  CHECK(clm_loss(g.leaf(sharp), std::span<const int>(t)).item() < 1e-7);
  const std::vector<int> bad = {0, 4, 1};
  CHECK_THROWS_AS(clm_loss(g.leaf(Md::Zero(3, 4)), std::span<const int>(bad)), IndexError);
}

TEST_CASE("objective names") {
  CHECK(ObjectiveSet::parse("use") == ObjectiveSet{true, true, false});
  CHECK(ObjectiveSet::parse("use-fbp").name() == "use-fbp");
  CHECK(ObjectiveSet::parse("use-clm").clm);
  CHECK_THROWS_AS(ObjectiveSet::parse("mlm"), ConfigError);
}

TEST_CASE("combined loss wiring") {
  const ModelConfig c = micro();
  const auto params = init_parameters<double>(c, 3);
  const auto interest = BehaviorsOfInterest::all_behaviors(c.vocab_size);
  std::vector<SequencePair> batch = {
      {{1, 2, 3, 4, 5, 6, 2, 3}, {1, 6, 5, 4, 3, 2, 1, 2}},
      {{1, 3, 3, 3, 4, 4, 5, 6, 2}, {1, 2, 2, 5, 5, 6, 6, 3}},
      {{1, 5, 4, 5, 4, 5, 4}, {1, 2, 6, 2, 6, 2, 6, 2}},
  };
  Graph<double> g(false);
  const auto w = bind_weights(g, params, false);

  SUBCASE("huge temperature pins SUP to ln(2M-1)") {
    LossOptions o;
    o.tau = 1e9;
    const auto l = combined_loss(w, c, batch, interest, o);
    CHECK(l.sup == doctest::Approx(std::log(5.0)).epsilon(1e-9));
    double fbp = 0.0;
    for (const auto& [x, y] : batch) {
      for (const auto* s : {&x, &y}) {
        const auto h = forward_hidden(w, c, std::span<const int>(*s));
        const Index r = static_cast<Index>(s->size()) - c.future_window;
        fbp += fbp_loss(fbp_logits(w, slice_rows(h, 0, r)),
                        build_fbp_labels<double>(std::span<const int>(*s), c.future_window, interest))
                   .item();
      }
    }
    fbp /= 3.0;
    CHECK(l.fbp == doctest::Approx(fbp).epsilon(1e-12));
    CHECK(l.total.item() == doctest::Approx(fbp + std::log(5.0)).epsilon(1e-9));
  }
  SUBCASE("pair order does not matter") {
    const double before = combined_loss(w, c, batch, interest, LossOptions{}).total.item();
    std::swap(batch[0], batch[2]);
    CHECK(combined_loss(w, c, batch, interest, LossOptions{}).total.item() == doctest::Approx(before).epsilon(1e-12));
  }
  SUBCASE("ablations keep only their terms") {
    LossOptions o;
    o.objectives = ObjectiveSet::parse("use-fbp");
    const auto f = combined_loss(w, c, batch, interest, o);
    CHECK(f.sup == 0.0);
    CHECK(f.total.item() == doctest::Approx(f.fbp));
    o.objectives = ObjectiveSet::parse("use-sup");
    const auto s = combined_loss(w, c, batch, interest, o);
    CHECK(s.fbp == 0.0);
    CHECK(s.total.item() == doctest::Approx(s.sup));
    o.objectives = ObjectiveSet::parse("use-clm");
    const auto m = combined_loss(w, c, batch, interest, o);
    CHECK(m.fbp == 0.0);
    CHECK(m.total.item() == doctest::Approx(m.sup + m.clm));
  }
  SUBCASE("single pair is rejected when SUP is active") {
    std::vector<SequencePair> one = {batch[0]};
    CHECK_THROWS_AS(combined_loss(w, c, one, interest, LossOptions{}), ConfigError);
    LossOptions o;
    o.objectives = ObjectiveSet::parse("use-fbp");
    CHECK_NOTHROW(combined_loss(w, c, one, interest, o));
  }
}
