#include "use/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace use {

namespace {

int sup_min_batch(const TrainConfig& c) { return c.objectives.sup ? 2 : 1; }

std::vector<std::vector<TrainingPair>> make_batches(std::vector<TrainingPair> pairs, const TrainConfig& c) {
  std::vector<std::vector<TrainingPair>> out;
  const std::size_t m = static_cast<std::size_t>(c.batch_size);
  for (std::size_t i = 0; i < pairs.size(); i += m) {
    std::vector<TrainingPair> b(pairs.begin() + static_cast<std::ptrdiff_t>(i),
                                pairs.begin() + static_cast<std::ptrdiff_t>(std::min(pairs.size(), i + m)));
    if (static_cast<int>(b.size()) >= sup_min_batch(c)) out.push_back(std::move(b));
  }
  return out;
}

std::int64_t steps_per_epoch(std::size_t users, const TrainConfig& c) {
  const std::size_t m = static_cast<std::size_t>(c.batch_size);
  const std::size_t rem = users % m;
  return static_cast<std::int64_t>(users / m) + (static_cast<int>(rem) >= sup_min_batch(c) ? 1 : 0);
}

const BehaviorSequence& find_user(const Dataset& data, std::uint64_t id) {
  for (const auto& s : data) {
    if (s.user_id == id) return s;
  }
  throw DatasetError("user " + std::to_string(id) + " not in dataset");
}

std::vector<Matrix<float>> collect_grads(const Weights<Tensor<float>>& w, const ModelConfig& c) {
  std::vector<Matrix<float>> grads;
  visit_weights(w, c, [&](const std::string&, const Tensor<float>& t) { grads.push_back(t.grad()); });
  return grads;
}

[[noreturn]] void abort_non_finite(const std::vector<TrainingPair>& batch, const TrainConfig& config,
                                   std::int64_t step, const LossBreakdown<float>& loss) {
  std::ostringstream dump;
  dump << "non-finite loss at step " << step << " (fbp=" << loss.fbp << ", sup=" << loss.sup << ", clm=" << loss.clm
       << ")\n";
  for (const auto& p : batch) {
    dump << "user " << p.user_id << " windows [" << p.first_start << ", " << p.first_start + config.seq_len << ") and ["
         << p.second_start << ", " << p.second_start + config.seq_len << ")\n";
  }
  std::string where;
  const std::filesystem::path dir =
      config.checkpoint_dir ? *config.checkpoint_dir : std::filesystem::temp_directory_path();
  const std::filesystem::path file = dir / ("nan_batch_step" + std::to_string(step) + ".txt");
  std::ofstream out(file);
  if (out) {
    out << dump.str();
    where = " (batch dumped to " + file.string() + ")";
  }
  throw TrainingError(dump.str() + where);
}

}  // namespace

void TrainConfig::validate(const ModelConfig& model) const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train config: " + what);
  };
  require(seq_len >= 2, "seq_len must be at least 2");
  require(pair_gap >= 0, "pair_gap must be non-negative");
  require(batch_size >= 1, "batch_size must be positive");
  require(!objectives.sup || batch_size >= 2, "batch_size must be at least 2 with the contrastive objective");
  require(epochs >= 1, "epochs must be positive");
  require(peak_lr > 0.0 && std::isfinite(peak_lr), "peak_lr must be positive");
  require(warmup_fraction > 0.0 && warmup_fraction < 1.0, "warmup_fraction must lie in (0, 1)");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
  require(tau > 0.0, "tau must be positive");
  require(objectives.fbp || objectives.sup || objectives.clm, "no objective selected");
  require(!objectives.fbp || seq_len > model.future_window, "seq_len must exceed the future window W");
  require(seq_len <= model.max_seq_len, "seq_len exceeds the model's max_seq_len");
  require(!objectives.clm || model.clm_head, "next-behavior objective needs a model with the clm head");
  require(validation_every == 0 || validation_every >= 2, "validation_every must be 0 (off) or at least 2");
}

TrainingPair sample_pair(const BehaviorSequence& seq, const TrainConfig& config, std::mt19937_64& rng) {
  const std::int64_t len = static_cast<std::int64_t>(seq.ids.size());
  const std::int64_t l = config.seq_len;
  if (len < config.min_user_length()) {
    throw DatasetError("user " + std::to_string(seq.user_id) + " has " + std::to_string(len) +
                       " behaviors, fewer than the " + std::to_string(config.min_user_length()) + " needed for a pair");
  }
  // For first start a, the second start ranges over [a + l + gap, len - l].
  const std::int64_t last_a = len - 2 * l - config.pair_gap;
  const auto choices = [&](std::int64_t a) { return last_a - a + 1; };
  const std::int64_t total = (last_a + 1) * (last_a + 2) / 2;
  std::int64_t r = std::uniform_int_distribution<std::int64_t>(0, total - 1)(rng);
  std::int64_t a = 0;
  while (r >= choices(a)) {
    r -= choices(a);
    ++a;
  }
  const std::int64_t b = a + l + config.pair_gap + r;
  TrainingPair p{seq.user_id, static_cast<int>(a), static_cast<int>(b)};
  if (std::uniform_int_distribution<int>(0, 1)(rng) == 1) std::swap(p.first_start, p.second_start);
  return p;
}

std::vector<const BehaviorSequence*> qualifying_users(const Dataset& data, const TrainConfig& config) {
  std::vector<const BehaviorSequence*> out;
  for (const auto& s : data) {
    if (static_cast<int>(s.ids.size()) >= config.min_user_length()) out.push_back(&s);
  }
  return out;
}

std::vector<TrainingPair> sample_pairs(const Dataset& data, const TrainConfig& config, std::mt19937_64& rng) {
  auto users = qualifying_users(data, config);
  if (static_cast<int>(users.size()) < config.batch_size) {
    throw DatasetError(std::to_string(users.size()) + " users reach the admission length of " +
                       std::to_string(config.min_user_length()) + " behaviors; a batch needs " +
                       std::to_string(config.batch_size));
  }
  std::shuffle(users.begin(), users.end(), rng);
  std::vector<TrainingPair> pairs;
  pairs.reserve(users.size());
  for (const auto* u : users) pairs.push_back(sample_pair(*u, config, rng));
  return pairs;
}

SequencePair materialize(const TrainingPair& pair, const Dataset& data, const TrainConfig& config) {
  const auto& ids = find_user(data, pair.user_id).ids;
  const auto window = [&](int start) {
    return std::vector<int>(ids.begin() + start, ids.begin() + start + config.seq_len);
  };
  return {window(pair.first_start), window(pair.second_start)};
}

std::int64_t warmup_steps(std::int64_t total_steps, const TrainConfig& config) {
  return static_cast<std::int64_t>(std::ceil(config.warmup_fraction * static_cast<double>(total_steps)));
}

double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& config) {
  if (total_steps < 1) throw ScheduleError("schedule needs at least one step");
  if (step < 0 || step > total_steps) {
    throw ScheduleError("step " + std::to_string(step) + " outside schedule [0, " + std::to_string(total_steps) + "]");
  }
  const std::int64_t warm = std::max<std::int64_t>(1, warmup_steps(total_steps, config));
  if (step <= warm) return config.peak_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (warm == total_steps) return config.peak_lr;
  return config.peak_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warm);
}

AdamW::AdamW(const Parameters<float>& params, const TrainConfig& config)
    : beta1_(config.beta1), beta2_(config.beta2), eps_(config.adam_eps), wd_(config.weight_decay) {
  visit_weights(params.weights, params.config, [&](const std::string& name, const Matrix<float>& w) {
    m_.push_back(Matrix<float>::Zero(w.rows(), w.cols()));
    v_.push_back(Matrix<float>::Zero(w.rows(), w.cols()));
    decay_.push_back(weight_role(name) == WeightRole::Matrix);
  });
}

void AdamW::step(Parameters<float>& params, const std::vector<Matrix<float>>& grads, double lr) {
  if (grads.size() != m_.size()) throw DimensionError("optimizer: gradient count differs from parameter count");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  std::size_t i = 0;
  visit_weights(params.weights, params.config, [&](const std::string&, Matrix<float>& w) {
    const Matrix<float>& g = grads[i];
    m_[i] = b1 * m_[i] + (1.0f - b1) * g;
    v_[i] = b2 * v_[i] + (1.0f - b2) * g.cwiseProduct(g);
    if (decay_[i] && wd_ > 0.0) w *= static_cast<float>(1.0 - lr * wd_);
    const auto m_hat = m_[i].array() / static_cast<float>(c1);
    const auto v_hat = v_[i].array() / static_cast<float>(c2);
    w.array() -= static_cast<float>(lr) * m_hat / (v_hat.sqrt() + static_cast<float>(eps_));
    ++i;
  });
}

double clip_global_norm(std::vector<Matrix<float>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& g : grads) g *= s;
  }
  return norm;
}

TrainSplit split_users(const Dataset& data, const TrainConfig& config) {
  TrainSplit split;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = substream(config.seed, 0x5b1ULL);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const bool held_out = config.validation_every > 0 && i % static_cast<std::size_t>(config.validation_every) == 0;
    (held_out ? split.validation : split.train).push_back(data[order[i]]);
  }
  return split;
}

double evaluate_loss(const Parameters<float>& params, const Dataset& data, const TrainConfig& config,
                     std::uint64_t seed) {
  const auto users = qualifying_users(data, config);
  if (static_cast<int>(users.size()) < sup_min_batch(config)) return std::nan("");
  std::mt19937_64 rng = substream(seed, 0xe7a1ULL);
  std::vector<TrainingPair> pairs;
  for (const auto* u : users) pairs.push_back(sample_pair(*u, config, rng));
  const auto interest = BehaviorsOfInterest::all_behaviors(params.config.vocab_size);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& batch : make_batches(pairs, config)) {
    std::vector<SequencePair> seqs;
    for (const auto& p : batch) seqs.push_back(materialize(p, data, config));
    Graph<float> g(false);
    const auto w = bind_weights(g, params, false);
    const auto loss = combined_loss(w, params.config, seqs, interest, config.loss_options());
    total += static_cast<double>(loss.total.item()) * static_cast<double>(batch.size());
    count += batch.size();
  }
  return count ? total / static_cast<double>(count) : std::nan("");
}

TrainResult train(const Dataset& data, const ModelConfig& model_config, const TrainConfig& config,
                  const TrainLogger& logger, const std::vector<std::string>& provenance) {
  model_config.validate();
  return train_from(init_parameters<float>(model_config, config.seed), data, config, logger, provenance);
}

TrainResult train_from(Parameters<float> init, const Dataset& data, const TrainConfig& config,
                       const TrainLogger& logger, const std::vector<std::string>& provenance) {
  const ModelConfig& mc = init.config;
  config.validate(mc);
  const auto interest = BehaviorsOfInterest::all_behaviors(mc.vocab_size);
  if (config.objectives.fbp && interest.num_columns != mc.num_predicted) {
    throw ConfigError("model predicts " + std::to_string(mc.num_predicted) + " behaviors but the vocabulary has " +
                      std::to_string(interest.num_columns));
  }
  const TrainSplit split = split_users(data, config);
  const std::size_t n_train = qualifying_users(split.train, config).size();
  if (static_cast<int>(n_train) < config.batch_size) {
    throw DatasetError(std::to_string(n_train) + " training users reach the admission length of " +
                       std::to_string(config.min_user_length()) + " behaviors; a batch needs " +
                       std::to_string(config.batch_size));
  }
  TrainResult result{std::move(init), {}, {}, {}, {}, 0};
  Parameters<float>& params = result.params;
  result.total_steps = steps_per_epoch(n_train, config) * config.epochs;
  AdamW optimizer(params, config);
  std::mt19937_64 rng = substream(config.seed, 0x7a1dULL);

  std::ofstream csv;
  if (config.metrics_csv) {
    csv.open(*config.metrics_csv, std::ios::trunc);
    if (!csv) throw Error("cannot open " + config.metrics_csv->string());
    for (const auto& line : provenance) csv << "# " << line << '\n';
    csv << "step,epoch,lr,train_loss,val_loss,fbp,sup,clm\n";
  }
  if (config.checkpoint_dir) std::filesystem::create_directories(*config.checkpoint_dir);

  std::int64_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto batches = make_batches(sample_pairs(split.train, config, rng), config);
    double epoch_loss = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& batch = batches[bi];
      std::vector<SequencePair> seqs;
      seqs.reserve(batch.size());
      for (const auto& p : batch) seqs.push_back(materialize(p, split.train, config));
      Graph<float> g(true);
      const auto w = bind_weights(g, params, true);
      const auto loss = combined_loss(w, mc, seqs, interest, config.loss_options());
      const double value = static_cast<double>(loss.total.item());
      if (!std::isfinite(value)) abort_non_finite(batch, config, step + 1, loss);
      g.backward(loss.total);
      auto grads = collect_grads(w, mc);
      clip_global_norm(grads, config.clip_norm);
      ++step;
      const double lr = lr_at(step, result.total_steps, config);
      optimizer.step(params, grads, lr);
      epoch_loss += value;

      MetricsRow row{step, epoch, lr, value, std::nullopt, loss.fbp, loss.sup, loss.clm};
      if (bi + 1 == batches.size()) {
        const double val = evaluate_loss(params, split.validation, config, config.seed);
        if (std::isfinite(val)) row.val_loss = val;
        result.epoch_val_loss.push_back(val);
      }
      result.metrics.push_back(row);
      if (logger) logger(row);
      if (csv) {
        csv << row.step << ',' << row.epoch << ',' << row.lr << ',' << row.train_loss << ',';
        if (row.val_loss) csv << *row.val_loss;
        csv << ',' << row.fbp << ',' << row.sup << ',' << row.clm << '\n';
      }
    }
    result.epoch_train_loss.push_back(epoch_loss / static_cast<double>(batches.size()));
    if (config.checkpoint_dir) {
      const auto path = *config.checkpoint_dir / ("epoch_" + std::to_string(epoch) + ".usew");
      save_params(params, path);
      result.checkpoints.push_back(path);
    }
  }
  return result;
}

}  // namespace use
