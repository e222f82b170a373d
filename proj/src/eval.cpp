#include "use/eval.hpp"

#include <algorithm>
#include <limits>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

namespace use {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Matrix<double> stack(const std::vector<Embedding>& rows) {
  if (rows.empty()) throw EmptyInputError("no embeddings to stack");
  Matrix<double> m(static_cast<Index>(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Index>(i)) = rows[i];
  return m;
}

Matrix<double> stack_rows(const std::vector<RowVector<double>>& rows) {
  Matrix<double> m(static_cast<Index>(rows.size()), rows.empty() ? 0 : rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Index>(i)) = rows[i];
  return m;
}

Matrix<double> gaussian(Index r, Index c, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Adam over a list of matrices.
struct Adam {
  std::vector<Matrix<double>> m, v;
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  int t = 0;

  void step(std::vector<Matrix<double>*> params, const std::vector<Matrix<double>>& grads) {
    if (m.empty()) {
      for (auto* p : params) {
        m.push_back(Matrix<double>::Zero(p->rows(), p->cols()));
        v.push_back(Matrix<double>::Zero(p->rows(), p->cols()));
      }
    }
    ++t;
    const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grads[i].cwiseProduct(grads[i]);
      params[i]->array() -= lr * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + eps);
    }
  }
};

Matrix<double> standardize(const Matrix<double>& x, const RowVector<double>& mean, const RowVector<double>& scale) {
  return (x.rowwise() - mean).array().rowwise() / scale.array();
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics

int rank_of(std::span<const double> scores, int positive) {
  if (positive < 0 || positive >= static_cast<int>(scores.size())) {
    throw IndexError("positive index " + std::to_string(positive) + " outside " + std::to_string(scores.size()) +
                     " candidates");
  }
  const double s = scores[static_cast<std::size_t>(positive)];
  int rank = 1;
  for (int j = 0; j < static_cast<int>(scores.size()); ++j) {
    const double o = scores[static_cast<std::size_t>(j)];
    if (o > s || (o == s && j < positive)) ++rank;
  }
  return rank;
}

double mrr(std::span<const int> ranks) {
  if (ranks.empty()) throw EvaluationError("mrr of an empty rank list");
  double total = 0.0;
  for (int r : ranks) {
    if (r < 1) throw EvaluationError("rank " + std::to_string(r) + " is below 1");
    total += 1.0 / static_cast<double>(r);
  }
  return total / static_cast<double>(ranks.size());
}

double random_mrr_baseline(int n) {
  if (n < 1) throw EvaluationError("random baseline needs at least one candidate");
  double h = 0.0;
  for (int k = 1; k <= n; ++k) h += 1.0 / k;
  return h / n;
}

double random_reciprocal_rank_sd(int n) {
  double second = 0.0;
  for (int k = 1; k <= n; ++k) second += 1.0 / (static_cast<double>(k) * k);
  const double mean = random_mrr_baseline(n);
  return std::sqrt(second / n - mean * mean);
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0.0, neg = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      const int l = labels[order[k]];
      if (l != 0 && l != 1) throw EvaluationError("auc labels must be 0 or 1");
      if (l == 1) rank_sum += avg_rank;
    }
    i = j;
  }
  for (int l : labels) (l == 1 ? pos : neg) += 1.0;
  if (pos == 0.0 || neg == 0.0) throw UndefinedMetricError("auc needs both positive and negative labels");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double macro_auc(const Matrix<double>& scores, const Matrix<double>& labels, int* excluded) {
  if (scores.rows() != labels.rows() || scores.cols() != labels.cols()) {
    throw DimensionError("macro_auc: scores " + shape_of(scores).str() + " vs labels " + shape_of(labels).str());
  }
  double total = 0.0;
  int used = 0, skipped = 0;
  std::vector<double> s(static_cast<std::size_t>(scores.rows()));
  std::vector<int> l(static_cast<std::size_t>(scores.rows()));
  for (Index c = 0; c < scores.cols(); ++c) {
    const double positives = labels.col(c).sum();
    if (positives == 0.0 || positives == static_cast<double>(labels.rows())) {
      ++skipped;
      continue;
    }
    for (Index r = 0; r < scores.rows(); ++r) {
      s[static_cast<std::size_t>(r)] = scores(r, c);
      l[static_cast<std::size_t>(r)] = labels(r, c) > 0.5 ? 1 : 0;
    }
    total += auc(s, l);
    ++used;
  }
  if (excluded) *excluded = skipped;
  if (used == 0) throw UndefinedMetricError("macro_auc: no column has both classes");
  return total / used;
}

// ---------------------------------------------------------------------------
// Embedders

Embedder model_embedder(std::shared_ptr<const Model<float>> model) {
  return [model](std::span<const int> ids) -> Embedding {
    if (ids.size() <= static_cast<std::size_t>(model->config().max_seq_len)) {
      return model->forward_parallel(ids).cast<double>().colwise().mean();
    }
    return model->forward_stream(ids, model->initial_state()).hidden.cast<double>().colwise().mean();
  };
}

Embedder tf_embedder(int vocab_size) {
  return [vocab_size](std::span<const int> ids) -> Embedding { return tf_vector(ids, vocab_size).transpose(); };
}

Embedder random_embedder(int dim, std::uint64_t seed) {
  auto rng = std::make_shared<std::mt19937_64>(seed);
  return [rng, dim](std::span<const int>) -> Embedding {
    std::normal_distribution<double> n(0.0, 1.0);
    Embedding e(dim);
    for (Index i = 0; i < dim; ++i) e(i) = n(*rng);
    return e;
  };
}

double cosine_similarity(const Embedding& a, const Embedding& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw DegenerateEmbeddingError("cosine similarity with a zero-norm embedding");
  return a.dot(b) / (na * nb);
}

// ---------------------------------------------------------------------------
// User retrieval

int RetrievalTask::fallback_instances() const {
  return static_cast<int>(std::count_if(instances.begin(), instances.end(),
                                        [](const RetrievalInstance& i) { return i.used_fallback; }));
}

RetrievalTask build_retrieval_task(const Dataset& data, int vocab_size, const RetrievalOptions& o) {
  if (o.n_candidates < 2) throw TaskError("retrieval needs at least 2 candidates");
  if (o.window_len < 1 || o.gap < 0) throw TaskError("retrieval window must be positive and gap non-negative");
  const int need = 2 * o.window_len + o.gap;
  std::vector<const BehaviorSequence*> users;
  for (const auto& s : data) {
    if (static_cast<int>(s.ids.size()) >= need) users.push_back(&s);
  }
  if (static_cast<int>(users.size()) < o.n_candidates) {
    throw TaskError(std::to_string(users.size()) + " users have the " + std::to_string(need) +
                    " behaviors a retrieval instance needs; a pool of " + std::to_string(o.n_candidates) +
                    " requires that many users");
  }
  std::mt19937_64 rng = substream(o.seed, 0x7e7eULL);
  RetrievalTask task;
  const auto window = [&](const BehaviorSequence& s, int start) {
    task.windows.emplace_back(s.ids.begin() + start, s.ids.begin() + start + o.window_len);
    return static_cast<int>(task.windows.size() - 1);
  };
  const std::size_t n = users.size();
  std::vector<int> query(n), positive(n), distractor(n);
  std::vector<Eigen::VectorXd> distractor_tf(n);
  for (std::size_t u = 0; u < n; ++u) {
    const auto& s = *users[u];
    const int len = static_cast<int>(s.ids.size());
    // Query and positive: disjoint windows at least `gap` apart, in either order.
    const int last_a = len - 2 * o.window_len - o.gap;
    const int a = std::uniform_int_distribution<int>(0, last_a)(rng);
    const int b = std::uniform_int_distribution<int>(a + o.window_len + o.gap, len - o.window_len)(rng);
    const bool swap = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    query[u] = window(s, swap ? b : a);
    positive[u] = window(s, swap ? a : b);
    distractor[u] = window(s, std::uniform_int_distribution<int>(0, len - o.window_len)(rng));
    distractor_tf[u] = tf_vector(task.windows[static_cast<std::size_t>(distractor[u])], vocab_size);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t count = o.max_instances > 0 ? std::min<std::size_t>(n, static_cast<std::size_t>(o.max_instances)) : n;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t u = order[k];
    const Eigen::VectorXd q_tf = tf_vector(task.windows[static_cast<std::size_t>(query[u])], vocab_size);
    std::vector<std::pair<double, std::size_t>> sims;
    std::vector<std::size_t> hard;
    for (std::size_t v = 0; v < n; ++v) {
      if (v == u) continue;
      const double c = cosine(q_tf, distractor_tf[v]);
      sims.emplace_back(c, v);
      if (c > o.hard_threshold) hard.push_back(v);
    }
    RetrievalInstance inst;
    inst.user_id = users[u]->user_id;
    inst.query = query[u];
    inst.hard_negatives = static_cast<int>(hard.size());
    const std::size_t want = static_cast<std::size_t>(o.n_candidates - 1);
    std::vector<std::size_t> chosen;
    if (hard.size() >= want) {
      std::shuffle(hard.begin(), hard.end(), rng);
      chosen.assign(hard.begin(), hard.begin() + static_cast<std::ptrdiff_t>(want));
    } else {
      inst.used_fallback = true;
      std::stable_sort(sims.begin(), sims.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
      for (std::size_t i = 0; i < want; ++i) chosen.push_back(sims[i].second);
    }
    for (std::size_t v : chosen) inst.candidates.push_back(distractor[v]);
    inst.positive_index = std::uniform_int_distribution<int>(0, static_cast<int>(want))(rng);
    inst.candidates.insert(inst.candidates.begin() + inst.positive_index, positive[u]);
    task.instances.push_back(std::move(inst));
  }
  return task;
}

RetrievalResult run_retrieval(const RetrievalTask& task, const Embedder& embedder) {
  if (task.instances.empty()) throw TaskError("retrieval task has no instances");
  std::vector<std::optional<Embedding>> cache(task.windows.size());
  const auto embedding = [&](int w) -> const Embedding& {
    auto& slot = cache[static_cast<std::size_t>(w)];
    if (!slot) slot = embedder(task.windows[static_cast<std::size_t>(w)]);
    return *slot;
  };
  RetrievalResult result;
  std::vector<double> scores;
  for (const auto& inst : task.instances) {
    const Embedding q = embedding(inst.query);
    scores.clear();
    for (int c : inst.candidates) scores.push_back(cosine_similarity(q, embedding(c)));
    result.ranks.push_back(rank_of(scores, inst.positive_index));
  }
  result.mrr = mrr(result.ranks);
  return result;
}

// ---------------------------------------------------------------------------
// Probe classifier

Matrix<double> Probe::predict(const Matrix<double>& x) const {
  Graph<double> g(false);
  const auto h = gelu(affine(g.constant(standardize(x, feature_mean, feature_scale)), g.constant(w1), g.constant(b1)));
  return sigmoid(affine(h, g.constant(w2), g.constant(b2))).value();
}

Probe train_probe(const Matrix<double>& x_train, const Matrix<double>& y_train, const Matrix<double>& x_val,
                  const Matrix<double>& y_val, const ProbeOptions& o) {
  if (x_train.rows() == 0 || x_train.rows() != y_train.rows()) throw TaskError("probe: empty or mismatched training set");
  if (x_val.rows() != y_val.rows() || x_val.cols() != x_train.cols()) throw TaskError("probe: mismatched validation set");
  Probe p;
  p.feature_mean = x_train.colwise().mean();
  p.feature_scale = ((x_train.rowwise() - p.feature_mean).array().square().colwise().mean().sqrt() + 1e-8).matrix();
  const Matrix<double> x = standardize(x_train, p.feature_mean, p.feature_scale);
  std::mt19937_64 rng = substream(o.seed, 0x9b0eULL);
  const Index d = x.cols(), out = y_train.cols();
  p.w1 = gaussian(d, o.hidden, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  p.b1 = Matrix<double>::Zero(1, o.hidden);
  p.w2 = gaussian(o.hidden, out, 1.0 / std::sqrt(static_cast<double>(o.hidden)), rng);
  p.b2 = Matrix<double>::Zero(1, out);
  Adam adam;
  adam.lr = o.lr;
  Probe best = p;
  best.best_val_auc = -1.0;
  const bool has_val = x_val.rows() > 0;
  for (int epoch = 1; epoch <= o.epochs; ++epoch) {
    Graph<double> g(true);
    auto w1 = g.leaf(p.w1), b1 = g.leaf(p.b1), w2 = g.leaf(p.w2), b2 = g.leaf(p.b2);
    const auto logits = affine(gelu(affine(g.constant(x), w1, b1)), w2, b2);
    const auto loss = bce_with_logits_mean(logits, y_train);
    g.backward(loss);
    adam.step({&p.w1, &p.b1, &p.w2, &p.b2}, {w1.grad(), b1.grad(), w2.grad(), b2.grad()});
    double score = static_cast<double>(epoch);  // without validation data the last epoch wins
    if (has_val) {
      try {
        score = macro_auc(p.predict(x_val), y_val);
      } catch (const UndefinedMetricError&) {
      }
    }
    if (score > best.best_val_auc) {
      best = p;
      best.best_epoch = epoch;
      best.best_val_auc = score;
    }
  }
  return best;
}

SplitSizes split_3_1_1(std::size_t n) {
  SplitSizes s;
  s.train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * 0.6));
  s.val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * 0.2));
  s.val = std::min(s.val, n - s.train);
  s.test = n - s.train - s.val;
  return s;
}

RowVector<double> presence(std::span<const int> ids, const BehaviorsOfInterest& interest) {
  RowVector<double> y = RowVector<double>::Zero(interest.num_columns);
  for (int id : ids) {
    const int c = interest.column(id);
    if (c != kNotOfInterest) y(c) = 1.0;
  }
  return y;
}

FutureBehaviorResult future_behavior_task(const Dataset& data, const Embedder& embedder,
                                          const BehaviorsOfInterest& interest, const FutureBehaviorOptions& o) {
  if (o.context_len < 1 || o.horizon < 1) throw TaskError("context and horizon must be positive");
  std::vector<const BehaviorSequence*> users;
  for (const auto& s : data) {
    if (static_cast<int>(s.ids.size()) >= o.context_len + o.horizon) users.push_back(&s);
  }
  if (users.size() < 5) throw TaskError("future-behavior task needs at least 5 users long enough for context + horizon");
  std::mt19937_64 rng = substream(o.seed, 0xfb7ULL);
  std::shuffle(users.begin(), users.end(), rng);
  std::vector<Embedding> xs;
  std::vector<RowVector<double>> ys;
  for (const auto* u : users) {
    const std::span<const int> ids(u->ids);
    xs.push_back(embedder(ids.subspan(0, static_cast<std::size_t>(o.context_len))));
    ys.push_back(presence(ids.subspan(static_cast<std::size_t>(o.context_len), static_cast<std::size_t>(o.horizon)),
                          interest));
  }
  const Matrix<double> x = stack(xs), y = stack_rows(ys);
  FutureBehaviorResult r;
  r.split = split_3_1_1(users.size());
  const auto tr = static_cast<Index>(r.split.train), va = static_cast<Index>(r.split.val),
             te = static_cast<Index>(r.split.test);
  const Probe probe = train_probe(x.topRows(tr), y.topRows(tr), x.middleRows(tr, va), y.middleRows(tr, va), o.probe);
  r.auc = macro_auc(probe.predict(x.bottomRows(te)), y.bottomRows(te), &r.excluded_behaviors);
  return r;
}

// ---------------------------------------------------------------------------
// Dynamic simulation

void SimulationSchedule::validate() const {
  if (initial < 1 || increment < 1 || periods < 1) {
    throw ConfigError("simulation schedule needs c0 >= 1, c >= 1 and P >= 1");
  }
}

const SimulationRow& SimulationResult::row(UpdateStrategy s, int period) const {
  for (const auto& r : rows) {
    if (r.strategy == s && r.period == period) return r;
  }
  throw IndexError("no simulation row for " + std::string(strategy_name(s)) + " period " + std::to_string(period));
}

SimulationResult simulate_dynamic(const Dataset& data, const Model<float>& model, const SimulationOptions& o) {
  const SimulationSchedule& sch = o.schedule;
  sch.validate();
  if (o.strategies.empty()) throw ConfigError("simulation needs at least one strategy");
  if (!(o.probe_user_fraction > 0.0 && o.probe_user_fraction < 1.0)) {
    throw ConfigError("probe_user_fraction must lie in (0, 1)");
  }
  for (const auto& s : data) {
    if (static_cast<int>(s.ids.size()) < sch.required_length()) {
      throw DatasetError("user " + std::to_string(s.user_id) + " has " + std::to_string(s.ids.size()) +
                         " behaviors; the schedule exhausts data at " + std::to_string(sch.required_length()));
    }
  }
  const auto interest = BehaviorsOfInterest::all_behaviors(model.config().vocab_size);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng = substream(o.seed, 0x51aULL);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_probe = static_cast<std::size_t>(std::llround(o.probe_user_fraction * static_cast<double>(data.size())));
  if (n_probe < 5 || data.size() - n_probe < 2) throw DatasetError("simulation needs at least 5 probe users and 2 evaluation users");
  std::vector<const BehaviorSequence*> probe_users, eval_users;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_probe ? probe_users : eval_users).push_back(&data[order[i]]);

  const auto segment = [&](const BehaviorSequence& s) {
    return std::span<const int>(s.ids).subspan(static_cast<std::size_t>(sch.history_len()));
  };
  const auto period_labels = [&](const std::vector<const BehaviorSequence*>& users, int p) {
    std::vector<RowVector<double>> ys;
    for (const auto* u : users) {
      ys.push_back(presence(segment(*u).subspan(static_cast<std::size_t>(sch.seen_after(p)),
                                                static_cast<std::size_t>(sch.increment)),
                            interest));
    }
    return stack_rows(ys);
  };

  SimulationResult result;
  for (const auto* u : eval_users) result.eval_users.push_back(u->user_id);

  // Re-identification references: one pass over each user's held-back history.
  std::vector<Embedding> reference;
  for (const auto* u : eval_users) {
    reference.push_back(update_recompute_all(std::span<const int>(u->ids).subspan(0, static_cast<std::size_t>(sch.history_len())), model));
  }
  const std::size_t n_eval = eval_users.size();
  const std::size_t pool = std::min<std::size_t>(static_cast<std::size_t>(std::max(o.reid_candidates, 2)), n_eval);
  std::vector<std::vector<std::size_t>> reid_candidates(n_eval);
  std::vector<int> reid_positive(n_eval);
  for (std::size_t k = 0; k < n_eval; ++k) {
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < n_eval; ++j) {
      if (j != k) others.push_back(j);
    }
    std::shuffle(others.begin(), others.end(), rng);
    others.resize(pool - 1);
    reid_positive[k] = std::uniform_int_distribution<int>(0, static_cast<int>(pool - 1))(rng);
    others.insert(others.begin() + reid_positive[k], k);
    reid_candidates[k] = std::move(others);
  }

  // Embeddings of all users under each strategy and period, with timings.
  const auto run_strategy = [&](UpdateStrategy strategy, const std::vector<const BehaviorSequence*>& users,
                                std::vector<double>* timings) {
    std::vector<std::vector<Embedding>> table(static_cast<std::size_t>(sch.periods));
    std::vector<UserState> states;
    for (const auto* u : users) states.push_back(init_user(u->user_id, model));
    for (int p = 0; p < sch.periods; ++p) {
      const auto t0 = Clock::now();
      for (std::size_t i = 0; i < users.size(); ++i) {
        const auto seg = segment(*users[i]);
        const auto fresh = seg.subspan(static_cast<std::size_t>(sch.period_start(p)), static_cast<std::size_t>(sch.period_len(p)));
        Embedding e;
        switch (strategy) {
          case UpdateStrategy::Stateful: {
            auto r = update_stateful(states[i], fresh, model);
            states[i] = std::move(r.state);
            e = std::move(r.embedding);
            break;
          }
          case UpdateStrategy::RecentOnly: e = update_recent_only(fresh, model); break;
          case UpdateStrategy::PoolEmbeddings: {
            auto r = update_pool(states[i], fresh, model, o.pool_weighting);
            states[i] = std::move(r.state);
            e = std::move(r.embedding);
            break;
          }
          case UpdateStrategy::RecomputeAll:
            e = update_recompute_all(seg.subspan(0, static_cast<std::size_t>(sch.seen_after(p))), model);
            break;
        }
        table[static_cast<std::size_t>(p)].push_back(std::move(e));
      }
      if (timings) timings->push_back(seconds_since(t0));
    }
    return table;
  };

  const auto split_probe = [&](const Matrix<double>& x, const Matrix<double>& y) {
    const Index n = x.rows();
    const Index val = std::max<Index>(1, n / 5);
    return train_probe(x.topRows(n - val), y.topRows(n - val), x.bottomRows(val), y.bottomRows(val), o.probe);
  };

  const UpdateStrategy reference_strategy = o.strategies.front();
  std::optional<Probe> shared_probe;
  std::map<UpdateStrategy, std::vector<std::vector<Embedding>>> probe_tables;
  for (UpdateStrategy s : o.strategies) {
    if (o.retrain_probe_per_period || s == reference_strategy) probe_tables[s] = run_strategy(s, probe_users, nullptr);
  }
  if (!o.retrain_probe_per_period) {
    shared_probe = split_probe(stack(probe_tables[reference_strategy][0]), period_labels(probe_users, 0));
  }

  for (UpdateStrategy s : o.strategies) {
    std::vector<double> timings;
    auto table = run_strategy(s, eval_users, &timings);
    double cumulative = 0.0;
    for (int p = 0; p < sch.periods; ++p) {
      const auto& emb = table[static_cast<std::size_t>(p)];
      const Probe probe = shared_probe ? *shared_probe
                                       : split_probe(stack(probe_tables[s][static_cast<std::size_t>(p)]),
                                                     period_labels(probe_users, p));
      SimulationRow row;
      row.strategy = s;
      row.period = p;
      int excluded = 0;
      row.auc = macro_auc(probe.predict(stack(emb)), period_labels(eval_users, p), &excluded);
      result.excluded_behaviors = std::max(result.excluded_behaviors, excluded);
      std::vector<int> ranks;
      std::vector<double> scores;
      for (std::size_t k = 0; k < n_eval; ++k) {
        scores.clear();
        for (std::size_t c : reid_candidates[k]) scores.push_back(cosine_similarity(emb[k], reference[c]));
        ranks.push_back(rank_of(scores, reid_positive[k]));
      }
      row.reid_mrr = mrr(ranks);
      row.period_seconds = timings[static_cast<std::size_t>(p)];
      cumulative += row.period_seconds;
      row.cumulative_seconds = cumulative;
      result.rows.push_back(row);
    }
    result.embeddings[s] = std::move(table);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Update-cost benchmark

int batch_size_for_budget(const ModelConfig& c, std::size_t tokens, std::size_t budget_bytes) {
  // Activations kept per token: residual stream, q/k/v/out projections, and
  // the feed-forward intermediate, per layer, in 32-bit floats.
  const std::size_t per_token = static_cast<std::size_t>(c.num_layers) *
                                (5 * static_cast<std::size_t>(c.hidden_size) + static_cast<std::size_t>(c.ffn_size)) *
                                sizeof(float);
  const std::size_t per_user = std::max<std::size_t>(1, tokens * per_token);
  return static_cast<int>(std::max<std::size_t>(1, budget_bytes / per_user));
}

std::vector<BenchRow> bench_strategies(const Model<float>& model, const Dataset& data, const BenchOptions& o) {
  const SimulationSchedule& sch = o.schedule;
  sch.validate();
  if (o.repetitions < 1) throw ConfigError("benchmark needs at least one repetition");
  const int need = sch.seen_after(sch.periods - 1);
  std::vector<const BehaviorSequence*> users;
  for (const auto& s : data) {
    if (static_cast<int>(s.ids.size()) >= need && static_cast<int>(users.size()) < o.num_users) users.push_back(&s);
  }
  if (static_cast<int>(users.size()) < o.num_users) {
    throw DatasetError("benchmark needs " + std::to_string(o.num_users) + " users with " + std::to_string(need) +
                       " behaviors, found " + std::to_string(users.size()));
  }
  // One kernel at every history length; a single parallel pass at max_seq_len
  // costs more than chunkwise just past it.
  RecomputeOptions chunked;
  chunked.force_chunkwise = true;

  // Untimed warm-up pass: records every period's input states.
  const std::size_t ns = o.strategies.size(), np = static_cast<std::size_t>(sch.periods);
  std::vector<std::vector<std::vector<UserState>>> before(ns, std::vector<std::vector<UserState>>(np));
  std::vector<std::vector<int>> batch_sizes(ns, std::vector<int>(np));
  const auto run_period = [&](std::size_t si, int p, std::vector<UserState>* next) {
    const UpdateStrategy s = o.strategies[si];
    const auto& committed = before[si][static_cast<std::size_t>(p)];
    const int batch = batch_sizes[si][static_cast<std::size_t>(p)];
    for (std::size_t start = 0; start < users.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t end = std::min(users.size(), start + static_cast<std::size_t>(batch));
      for (std::size_t i = start; i < end; ++i) {
        const std::span<const int> ids(users[i]->ids);
        const auto fresh = ids.subspan(static_cast<std::size_t>(sch.period_start(p)), static_cast<std::size_t>(sch.period_len(p)));
        switch (s) {
          case UpdateStrategy::Stateful: {
            auto r = update_stateful(committed[i], fresh, model);
            if (next) (*next)[i] = std::move(r.state);
            break;
          }
          case UpdateStrategy::RecentOnly: update_recent_only(fresh, model); break;
          case UpdateStrategy::PoolEmbeddings: {
            auto r = update_pool(committed[i], fresh, model);
            if (next) (*next)[i] = std::move(r.state);
            break;
          }
          case UpdateStrategy::RecomputeAll:
            update_recompute_all(ids.subspan(0, static_cast<std::size_t>(sch.seen_after(p))), model, chunked);
            break;
        }
      }
    }
  };
  for (std::size_t si = 0; si < ns; ++si) {
    const UpdateStrategy s = o.strategies[si];
    std::vector<UserState> state;
    for (const auto* u : users) state.push_back(init_user(u->user_id, model));
    for (int p = 0; p < sch.periods; ++p) {
      const std::size_t tokens = static_cast<std::size_t>(
          s == UpdateStrategy::RecomputeAll ? sch.seen_after(p) : sch.period_len(p));
      batch_sizes[si][static_cast<std::size_t>(p)] = batch_size_for_budget(model.config(), tokens, o.memory_budget_bytes);
      before[si][static_cast<std::size_t>(p)] = state;
      std::vector<UserState> next = state;
      run_period(si, p, &next);
      if (s == UpdateStrategy::Stateful || s == UpdateStrategy::PoolEmbeddings) state = std::move(next);
    }
  }

  // Each round sweeps all strategies and periods, so a slow spell on a shared
  // machine spreads over many cells instead of one; the fastest round counts.
  std::vector<std::vector<double>> best(ns, std::vector<double>(np, std::numeric_limits<double>::infinity()));
  for (int r = 0; r < o.repetitions; ++r) {
    for (std::size_t si = 0; si < ns; ++si) {
      for (int p = 0; p < sch.periods; ++p) {
        const auto t0 = Clock::now();
        run_period(si, p, nullptr);
        double& b = best[si][static_cast<std::size_t>(p)];
        b = std::min(b, seconds_since(t0));
      }
    }
  }
  std::vector<BenchRow> rows;
  for (std::size_t si = 0; si < ns; ++si) {
    double cumulative = 0.0;
    for (int p = 0; p < sch.periods; ++p) {
      BenchRow row;
      row.strategy = o.strategies[si];
      row.period = p + 1;
      row.period_seconds = best[si][static_cast<std::size_t>(p)];
      cumulative += row.period_seconds;
      row.cumulative_seconds = cumulative;
      row.batch_size = batch_sizes[si][static_cast<std::size_t>(p)];
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace use
