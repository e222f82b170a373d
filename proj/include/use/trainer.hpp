#pragma once

// Same-user pair sampling, the warmup/decay learning-rate schedule, an Adam
// optimizer with decoupled weight decay, and the training loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "use/data.hpp"
#include "use/model.hpp"
#include "use/objectives.hpp"

namespace use {

struct TrainConfig {
  int seq_len = 64;
  int pair_gap = 16;
  int batch_size = 32;  // pairs per step (M)
  int epochs = 10;
  double peak_lr = 4e-4;
  double warmup_fraction = 0.06;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // global gradient norm; <= 0 disables clipping
  double tau = 0.1;
  NegativeSet negatives = NegativeSet::AllOthers;
  ObjectiveSet objectives;
  int validation_every = 20;  // one user in this many is held out
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<std::filesystem::path> metrics_csv;

  // Shortest sequence that can host a pair: 2 * seq_len + 2 * pair_gap.
  int min_user_length() const { return 2 * seq_len + 2 * pair_gap; }
  LossOptions loss_options() const { return {objectives, tau, negatives}; }
  void validate(const ModelConfig& model) const;
};

struct TrainingPair {
  std::uint64_t user_id = 0;
  int first_start = 0;   // window [first_start, first_start + seq_len)
  int second_start = 0;  // may precede first_start; windows never overlap
};

// Uniform over placements a, b with b >= a + seq_len + pair_gap and
// b + seq_len <= length, then the two roles are swapped with probability 1/2.
TrainingPair sample_pair(const BehaviorSequence& seq, const TrainConfig& config, std::mt19937_64& rng);

// Users long enough to host a pair.
std::vector<const BehaviorSequence*> qualifying_users(const Dataset& data, const TrainConfig& config);

// One pair per qualifying user, in shuffled user order.
std::vector<TrainingPair> sample_pairs(const Dataset& data, const TrainConfig& config, std::mt19937_64& rng);

SequencePair materialize(const TrainingPair& pair, const Dataset& data, const TrainConfig& config);

// Linear warmup from 0 to peak over ceil(warmup_fraction * total) steps,
// then linear decay to 0 at total.
double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& config);
std::int64_t warmup_steps(std::int64_t total_steps, const TrainConfig& config);

class AdamW {
 public:
  AdamW(const Parameters<float>& params, const TrainConfig& config);

  // grads in visit_weights order. Weight decay applies to matrices only.
  void step(Parameters<float>& params, const std::vector<Matrix<float>>& grads, double lr);
  std::int64_t steps_taken() const { return t_; }

 private:
  std::vector<Matrix<float>> m_, v_;
  std::vector<bool> decay_;
  double beta1_, beta2_, eps_, wd_;
  std::int64_t t_ = 0;
};

// Scales grads in place so their global norm is at most max_norm; returns the
// norm before clipping.
double clip_global_norm(std::vector<Matrix<float>>& grads, double max_norm);

struct MetricsRow {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double fbp = 0.0;
  double sup = 0.0;
  double clm = 0.0;
};

struct TrainResult {
  Parameters<float> params;
  std::vector<MetricsRow> metrics;
  std::vector<double> epoch_train_loss;  // mean over the epoch's steps
  std::vector<double> epoch_val_loss;
  std::vector<std::filesystem::path> checkpoints;
  std::int64_t total_steps = 0;
};

using TrainLogger = std::function<void(const MetricsRow&)>;

// The held-out split: every validation_every-th qualifying user in a seeded
// permutation.
struct TrainSplit {
  Dataset train;
  Dataset validation;
};
TrainSplit split_users(const Dataset& data, const TrainConfig& config);

double evaluate_loss(const Parameters<float>& params, const Dataset& data, const TrainConfig& config,
                     std::uint64_t seed);

TrainResult train(const Dataset& data, const ModelConfig& model_config, const TrainConfig& config,
                  const TrainLogger& logger = {}, const std::vector<std::string>& provenance = {});

// Continues from existing parameters (used by the one-step check and resumes).
TrainResult train_from(Parameters<float> init, const Dataset& data, const TrainConfig& config,
                       const TrainLogger& logger = {}, const std::vector<std::string>& provenance = {});

}  // namespace use
