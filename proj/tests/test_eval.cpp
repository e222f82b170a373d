#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "use/eval.hpp"

using namespace use;

namespace {

// Brute-force AUC over all positive/negative pairs, ties counted one half.
double auc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
    }
  }
  return wins / pairs;
}

ModelConfig small_config() {
  ModelConfig c;
  c.num_layers = 1;
  c.num_heads = 2;
  c.hidden_size = 8;
  c.ffn_size = 16;
  c.max_seq_len = 64;
  c.chunk_len = 32;
  return c;
}

Dataset corpus(int users, int length, std::uint64_t seed = 2) {
  return generate_dataset(make_persona_spec(PersonaOptions{}, seed), users, length, seed);
}

}  // namespace

TEST_CASE("rank with ties broken by index") {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.1};
  CHECK(rank_of(s, 1) == 1);
  CHECK(rank_of(s, 0) == 2);
  CHECK(rank_of(s, 2) == 3);
  CHECK(rank_of(s, 3) == 4);
  CHECK_THROWS_AS(rank_of(s, 4), IndexError);
}

TEST_CASE("mean reciprocal rank") {
  const std::vector<int> r{1, 2, 4};
  CHECK(mrr(r) == doctest::Approx((1.0 + 0.5 + 0.25) / 3.0));
  CHECK_THROWS_AS(mrr(std::vector<int>{}), EvaluationError);
  CHECK_THROWS_AS(mrr(std::vector<int>{0}), EvaluationError);
}

TEST_CASE("random baseline and its spread") {
  CHECK(random_mrr_baseline(1) == 1.0);
  CHECK(random_mrr_baseline(2) == 0.75);
  for (int n : {3, 20, 100}) {
    double mean = 0.0, sq = 0.0;
    for (int k = 1; k <= n; ++k) {
      mean += 1.0 / k / n;
      sq += 1.0 / (static_cast<double>(k) * k) / n;
    }
    CHECK(random_mrr_baseline(n) == doctest::Approx(mean).epsilon(1e-14));
    CHECK(random_reciprocal_rank_sd(n) == doctest::Approx(std::sqrt(sq - mean * mean)).epsilon(1e-12));
  }
}

TEST_CASE("auc special cases") {
  const std::vector<int> y{0, 0, 1, 1};
  CHECK(auc(std::vector<double>{1, 2, 3, 4}, y) == 1.0);
  CHECK(auc(std::vector<double>{4, 3, 2, 1}, y) == 0.0);
  CHECK(auc(std::vector<double>{1, 1, 1, 1}, y) == 0.5);
  CHECK_THROWS_AS(auc(std::vector<double>{1, 2}, std::vector<int>{1, 1}), UndefinedMetricError);
  CHECK_THROWS_AS(auc(std::vector<double>{1, 2}, std::vector<int>{1}), DimensionError);
  CHECK_THROWS_AS(auc(std::vector<double>{1, 2}, std::vector<int>{1, 2}), EvaluationError);
}

TEST_CASE("auc equals pair enumeration on random tied inputs") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 199);
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = static_cast<double>(rng() % 10);  // heavy ties
      y[static_cast<std::size_t>(i)] = static_cast<int>(rng() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    CHECK(auc(s, y) == auc_pairs(s, y));
  }
}

TEST_CASE("macro auc skips single-class columns") {
  Matrix<double> s(4, 3), y(4, 3);
  s << 1, 1, 4, 2, 2, 3, 3, 3, 2, 4, 4, 1;
  y << 0, 1, 0, 0, 1, 0, 1, 1, 1, 1, 1, 1;
  int excluded = -1;
  CHECK(macro_auc(s, y, &excluded) == doctest::Approx((1.0 + 0.0) / 2.0));
  CHECK(excluded == 1);
  Matrix<double> ones = Matrix<double>::Ones(4, 3);
  CHECK_THROWS_AS(macro_auc(s, ones), UndefinedMetricError);
}

TEST_CASE("cosine similarity") {
  Embedding a(2), b(2);
  a << 1, 0;
  b << 0, 2;
  CHECK(cosine_similarity(a, a) == doctest::Approx(1.0));
  CHECK(cosine_similarity(a, b) == doctest::Approx(0.0));
  CHECK_THROWS_AS(cosine_similarity(a, Embedding::Zero(2)), DegenerateEmbeddingError);
}

TEST_CASE("retrieval task structure") {
  const Dataset d = corpus(60, 200);
  RetrievalOptions o;
  o.window_len = 32;
  o.gap = 8;
  o.n_candidates = 10;
  o.seed = 4;
  const RetrievalTask t = build_retrieval_task(d, 66, o);
  CHECK(t.instances.size() == 60);
  for (const auto& inst : t.instances) {
    REQUIRE(inst.candidates.size() == 10);
    CHECK(inst.positive_index >= 0);
    CHECK(inst.positive_index < 10);
    const auto& user = *std::find_if(d.begin(), d.end(), [&](const auto& s) { return s.user_id == inst.user_id; });
    const auto& q = t.windows[static_cast<std::size_t>(inst.query)];
    const auto& p = t.windows[static_cast<std::size_t>(inst.candidates[static_cast<std::size_t>(inst.positive_index)])];
    CHECK(q.size() == 32);
    // Both windows are slices of the user's log, at least `gap` apart.
    const auto qi = std::search(user.ids.begin(), user.ids.end(), q.begin(), q.end());
    const auto pi = std::search(user.ids.begin(), user.ids.end(), p.begin(), p.end());
    REQUIRE(qi != user.ids.end());
    REQUIRE(pi != user.ids.end());
    CHECK(std::abs(qi - pi) >= 32 + 8);
    CHECK(inst.used_fallback == (inst.hard_negatives < 9));
  }
  // Deterministic under the seed.
  const RetrievalTask again = build_retrieval_task(d, 66, o);
  CHECK(again.windows == t.windows);

  o.max_instances = 5;
  CHECK(build_retrieval_task(d, 66, o).instances.size() == 5);
  o.n_candidates = 100;
  CHECK_THROWS_AS(build_retrieval_task(d, 66, o), TaskError);
}

TEST_CASE("an identifying embedder retrieves perfectly; a random one sits at the baseline") {
  // Each user draws from its own pair of behaviors, so term frequencies identify users.
  Dataset d;
  std::mt19937_64 rng(5);
  for (int u = 0; u < 30; ++u) {
    BehaviorSequence s{static_cast<std::uint64_t>(u), {}};
    for (int i = 0; i < 200; ++i) s.ids.push_back(2 + 2 * u + static_cast<int>(rng() % 2));
    d.push_back(s);
  }
  RetrievalOptions o;
  o.window_len = 32;
  o.gap = 8;
  o.n_candidates = 20;
  const auto task = build_retrieval_task(d, 64, o);
  CHECK(run_retrieval(task, tf_embedder(64)).mrr == 1.0);

  const Dataset many = corpus(400, 120);
  o.seed = 6;
  const auto big = build_retrieval_task(many, 66, o);
  const double m = run_retrieval(big, random_embedder(16, 7)).mrr;
  const double sigma = random_reciprocal_rank_sd(20) / std::sqrt(static_cast<double>(big.instances.size()));
  CHECK(std::abs(m - random_mrr_baseline(20)) < 3.0 * sigma);
}

TEST_CASE("split sizes") {
  const auto s = split_3_1_1(100);
  CHECK(s.train == 60);
  CHECK(s.val == 20);
  CHECK(s.test == 20);
  const auto t = split_3_1_1(5);
  CHECK(t.train + t.val + t.test == 5);
  CHECK(t.train == 3);
}

TEST_CASE("probe learns a separable multi-label map") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  auto make = [&](int rows, Matrix<double>& x, Matrix<double>& y) {
    x.resize(rows, 4);
    y.resize(rows, 2);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < 4; ++j) x(i, j) = 5.0 + 3.0 * n(rng);
      y(i, 0) = x(i, 0) > 5.0 ? 1.0 : 0.0;
      y(i, 1) = x(i, 1) + x(i, 2) > 10.0 ? 1.0 : 0.0;
    }
  };
  Matrix<double> xtr, ytr, xva, yva, xte, yte;
  make(300, xtr, ytr);
  make(100, xva, yva);
  make(200, xte, yte);
  ProbeOptions po;
  po.epochs = 300;
  po.lr = 1e-2;
  const Probe p = train_probe(xtr, ytr, xva, yva, po);
  CHECK(p.best_epoch >= 1);
  CHECK(macro_auc(p.predict(xte), yte) > 0.95);
  const auto out = p.predict(xte);
  CHECK(out.minCoeff() >= 0.0);
  CHECK(out.maxCoeff() <= 1.0);
}

TEST_CASE("presence marks behaviors of interest") {
  const auto interest = BehaviorsOfInterest::all_behaviors(6);
  const std::vector<int> ids{kNewSessionId, 2, 5, 5};
  const auto y = presence(ids, interest);
  REQUIRE(y.size() == 4);
  CHECK(y(0) == 1.0);
  CHECK(y(1) == 0.0);
  CHECK(y(3) == 1.0);
}

TEST_CASE("future behavior task runs end to end") {
  const Dataset d = corpus(100, 128);
  FutureBehaviorOptions o;
  o.probe.epochs = 20;
  const auto r = future_behavior_task(d, tf_embedder(66), BehaviorsOfInterest::all_behaviors(66), o);
  CHECK(r.split.train == 60);
  CHECK(r.auc > 0.0);
  CHECK(r.auc < 1.0);
  CHECK_THROWS_AS(future_behavior_task(corpus(100, 100), tf_embedder(66), BehaviorsOfInterest::all_behaviors(66), o),
                  TaskError);
}

TEST_CASE("schedule arithmetic") {
  SimulationSchedule s{64, 32, 4};
  CHECK(s.history_len() == 256);
  CHECK(s.period_start(0) == 0);
  CHECK(s.period_len(0) == 64);
  CHECK(s.period_start(2) == 96);
  CHECK(s.seen_after(2) == 128);
  CHECK(s.required_length() == 256 + 64 + 4 * 32);
  CHECK_THROWS_AS((SimulationSchedule{0, 1, 1}.validate()), ConfigError);
}

TEST_CASE("dynamic simulation invariants") {
  SimulationOptions o;
  o.schedule = {16, 16, 4};
  o.probe.epochs = 10;
  o.reid_candidates = 5;
  const Dataset d = corpus(40, o.schedule.required_length());
  const Model<float> m(init_parameters<float>(small_config(), 3));
  const auto r = simulate_dynamic(d, m, o);
  CHECK(r.rows.size() == 16);
  CHECK(r.eval_users.size() == 20);
  for (UpdateStrategy s : kAllStrategies) CHECK(r.row(s, 0).auc == r.row(UpdateStrategy::Stateful, 0).auc);
  for (int p = 0; p < 4; ++p) {
    CHECK(std::abs(r.row(UpdateStrategy::Stateful, p).auc - r.row(UpdateStrategy::RecomputeAll, p).auc) < 1e-3);
    for (std::size_t k = 0; k < 20; ++k) {
      const auto& a = r.embeddings.at(UpdateStrategy::Stateful)[static_cast<std::size_t>(p)][k];
      const auto& b = r.embeddings.at(UpdateStrategy::RecomputeAll)[static_cast<std::size_t>(p)][k];
      CHECK((a - b).cwiseAbs().maxCoeff() < 1e-4);
    }
  }
  const auto& last = r.row(UpdateStrategy::Stateful, 3);
  CHECK(last.cumulative_seconds >= last.period_seconds);
  CHECK_THROWS_AS(r.row(UpdateStrategy::Stateful, 4), IndexError);

  o.retrain_probe_per_period = true;
  const auto per = simulate_dynamic(d, m, o);
  CHECK(per.rows.size() == 16);

  CHECK_THROWS_AS(simulate_dynamic(corpus(40, 100), m, o), DatasetError);
}

TEST_CASE("benchmark rows and memory-derived batch sizes") {
  BenchOptions o;
  o.schedule = {16, 16, 3};
  o.num_users = 4;
  o.repetitions = 2;
  const Dataset d = corpus(4, 64);
  const Model<float> m(init_parameters<float>(small_config(), 3));
  const auto rows = bench_strategies(m, d, o);
  CHECK(rows.size() == 12);
  double cumulative = 0.0;
  for (int i = 0; i < 3; ++i) {
    CHECK(rows[static_cast<std::size_t>(i)].period == i + 1);
    cumulative += rows[static_cast<std::size_t>(i)].period_seconds;
    CHECK(rows[static_cast<std::size_t>(i)].cumulative_seconds == doctest::Approx(cumulative));
    CHECK(rows[static_cast<std::size_t>(i)].batch_size >= 1);
  }
  CHECK(batch_size_for_budget(small_config(), 100, std::size_t{1} << 30) >
        batch_size_for_budget(small_config(), 1000, std::size_t{1} << 30));
  CHECK(batch_size_for_budget(small_config(), 1000000, 1) == 1);
  o.num_users = 10;
  CHECK_THROWS_AS(bench_strategies(m, d, o), DatasetError);
}
