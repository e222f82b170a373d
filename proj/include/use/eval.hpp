#pragma once

// Ranking and classification metrics, the user-retrieval and future-behavior
// probe tasks, the period-by-period dynamic simulation, and the update-cost
// benchmark.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "use/data.hpp"
#include "use/objectives.hpp"
#include "use/state_store.hpp"

namespace use {

// ---------------------------------------------------------------------------
// Metrics

// 1-based rank of candidate `positive`; candidates scoring equal to it are
// ordered by index.
int rank_of(std::span<const double> scores, int positive);
double mrr(std::span<const int> ranks);
// Expected MRR of a uniformly random ranking of n candidates: H(n) / n.
double random_mrr_baseline(int n);
// Standard deviation of the reciprocal rank under uniformly random ranking.
double random_reciprocal_rank_sd(int n);

// Rank-sum AUC with average ranks for ties (a tie counts one half).
double auc(std::span<const double> scores, std::span<const int> labels);

// Macro average over columns where both classes occur; columns with a single
// class are skipped and counted in *excluded.
double macro_auc(const Matrix<double>& scores, const Matrix<double>& labels, int* excluded = nullptr);

// ---------------------------------------------------------------------------
// Embedders

using Embedder = std::function<Embedding(std::span<const int>)>;

Embedder model_embedder(std::shared_ptr<const Model<float>> model);
Embedder tf_embedder(int vocab_size);
// Independent Gaussian vectors, ignoring the input.
Embedder random_embedder(int dim, std::uint64_t seed);

double cosine_similarity(const Embedding& a, const Embedding& b);

// ---------------------------------------------------------------------------
// User retrieval

struct RetrievalOptions {
  int window_len = 64;
  int gap = 16;  // minimum distance between the query and positive windows
  int n_candidates = 20;
  double hard_threshold = 0.8;  // TF cosine with the query above which a negative counts as hard
  int max_instances = 0;        // 0 = one per eligible user
  std::uint64_t seed = 0;
};

struct RetrievalInstance {
  std::uint64_t user_id = 0;
  int query = 0;                // index into RetrievalTask::windows
  std::vector<int> candidates;  // indices into RetrievalTask::windows
  int positive_index = 0;       // position of the positive within candidates
  int hard_negatives = 0;       // negatives above the threshold
  bool used_fallback = false;   // true when top-similarity negatives filled the pool
};

// Windows are stored once and shared between instances.
struct RetrievalTask {
  std::vector<std::vector<int>> windows;
  std::vector<RetrievalInstance> instances;
  int fallback_instances() const;
};

RetrievalTask build_retrieval_task(const Dataset& data, int vocab_size, const RetrievalOptions& options);

struct RetrievalResult {
  double mrr = 0.0;
  std::vector<int> ranks;
};

RetrievalResult run_retrieval(const RetrievalTask& task, const Embedder& embedder);

// ---------------------------------------------------------------------------
// Probe classifier

struct ProbeOptions {
  int hidden = 64;
  int epochs = 200;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

// One hidden layer (GELU) over standardized features, multi-label sigmoid
// outputs.
struct Probe {
  RowVector<double> feature_mean, feature_scale;
  Matrix<double> w1, b1, w2, b2;
  int best_epoch = 0;
  double best_val_auc = 0.0;

  Matrix<double> predict(const Matrix<double>& x) const;
};

// Full-batch Adam on mean BCE; keeps the epoch with the best validation
// macro AUC.
Probe train_probe(const Matrix<double>& x_train, const Matrix<double>& y_train, const Matrix<double>& x_val,
                  const Matrix<double>& y_val, const ProbeOptions& options);

struct SplitSizes {
  std::size_t train = 0, val = 0, test = 0;
};
// 3:1:1 up to rounding.
SplitSizes split_3_1_1(std::size_t n);

struct FutureBehaviorOptions {
  int context_len = 64;
  int horizon = 64;
  ProbeOptions probe;
  std::uint64_t seed = 0;
};

struct FutureBehaviorResult {
  double auc = 0.0;
  int excluded_behaviors = 0;
  SplitSizes split;
};

FutureBehaviorResult future_behavior_task(const Dataset& data, const Embedder& embedder,
                                          const BehaviorsOfInterest& interest, const FutureBehaviorOptions& options);

// Presence of each behavior of interest anywhere in ids.
RowVector<double> presence(std::span<const int> ids, const BehaviorsOfInterest& interest);

// ---------------------------------------------------------------------------
// Dynamic simulation

struct SimulationSchedule {
  int initial = 64;    // c0: behaviors in period 0
  int increment = 64;  // c: behaviors added per later period
  int periods = 8;     // P

  void validate() const;
  // Behaviors held back per user for the re-identification reference.
  int history_len() const { return initial * periods; }
  // Start and length of period p's new behaviors within the simulated segment.
  int period_start(int p) const { return p == 0 ? 0 : initial + (p - 1) * increment; }
  int period_len(int p) const { return p == 0 ? initial : increment; }
  int seen_after(int p) const { return initial + p * increment; }
  // History plus every period plus one increment of labels after the last.
  int required_length() const { return history_len() + initial + periods * increment; }
};

struct SimulationOptions {
  SimulationSchedule schedule;
  std::vector<UpdateStrategy> strategies = {std::begin(kAllStrategies), std::end(kAllStrategies)};
  double probe_user_fraction = 0.5;
  ProbeOptions probe;
  bool retrain_probe_per_period = false;
  int reid_candidates = 20;
  PoolWeighting pool_weighting = PoolWeighting::EqualPeriods;
  std::uint64_t seed = 0;
};

struct SimulationRow {
  UpdateStrategy strategy = UpdateStrategy::Stateful;
  int period = 0;
  double auc = 0.0;
  double reid_mrr = 0.0;
  double period_seconds = 0.0;
  double cumulative_seconds = 0.0;
};

struct SimulationResult {
  std::vector<SimulationRow> rows;
  // embeddings[strategy][period][k] for evaluation user k.
  std::map<UpdateStrategy, std::vector<std::vector<Embedding>>> embeddings;
  std::vector<std::uint64_t> eval_users;
  int excluded_behaviors = 0;

  const SimulationRow& row(UpdateStrategy s, int period) const;
};

SimulationResult simulate_dynamic(const Dataset& data, const Model<float>& model, const SimulationOptions& options);

// ---------------------------------------------------------------------------
// Update-cost benchmark

struct BenchOptions {
  SimulationSchedule schedule{64, 64, 16};
  int num_users = 32;
  int repetitions = 5;  // timed rounds after one warm-up pass; the fastest counts
  std::size_t memory_budget_bytes = std::size_t{64} << 20;
  std::vector<UpdateStrategy> strategies = {std::begin(kAllStrategies), std::end(kAllStrategies)};
};

struct BenchRow {
  UpdateStrategy strategy = UpdateStrategy::Stateful;
  int period = 0;  // 1-based
  double period_seconds = 0.0;
  double cumulative_seconds = 0.0;
  int batch_size = 0;
};

// Users' behaviors are taken from the start of their sequences; each needs
// schedule.seen_after(periods - 1) behaviors.
std::vector<BenchRow> bench_strategies(const Model<float>& model, const Dataset& data, const BenchOptions& options);

// Users per batch so that activations of `tokens` behaviors fit the budget.
int batch_size_for_budget(const ModelConfig& config, std::size_t tokens, std::size_t budget_bytes);

}  // namespace use
