#pragma once

// Training losses: future-behavior prediction (multi-label BCE over the next W
// positions), same-user contrastive prediction, next-behavior prediction, and
// their combination over a batch of same-user window pairs.

#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "use/model.hpp"

namespace use {

inline constexpr int kNotOfInterest = -1;

// Maps vocabulary ids to label columns; ids mapped to kNotOfInterest are never
// predicted.
struct BehaviorsOfInterest {
  std::vector<int> column_of_id;
  int num_columns = 0;

  // Every behavior except pad and new_session, in id order.
  static BehaviorsOfInterest all_behaviors(int vocab_size);
  // Ids 0..n-1 map to columns 0..n-1; anything else is ignored.
  static BehaviorsOfInterest identity(int n);
  // Only the listed ids, in the listed order.
  static BehaviorsOfInterest subset(const std::vector<int>& ids, int vocab_size);

  int column(int id) const {
    if (id < 0 || id >= static_cast<int>(column_of_id.size())) return kNotOfInterest;
    return column_of_id[static_cast<std::size_t>(id)];
  }
};

inline BehaviorsOfInterest BehaviorsOfInterest::all_behaviors(int vocab_size) {
  BehaviorsOfInterest b;
  b.column_of_id.assign(static_cast<std::size_t>(vocab_size), kNotOfInterest);
  for (int id = 2; id < vocab_size; ++id) b.column_of_id[static_cast<std::size_t>(id)] = b.num_columns++;
  return b;
}

inline BehaviorsOfInterest BehaviorsOfInterest::identity(int n) {
  BehaviorsOfInterest b;
  b.column_of_id.resize(static_cast<std::size_t>(n));
  for (int id = 0; id < n; ++id) b.column_of_id[static_cast<std::size_t>(id)] = id;
  b.num_columns = n;
  return b;
}

inline BehaviorsOfInterest BehaviorsOfInterest::subset(const std::vector<int>& ids, int vocab_size) {
  BehaviorsOfInterest b;
  b.column_of_id.assign(static_cast<std::size_t>(vocab_size), kNotOfInterest);
  for (int id : ids) {
    if (id < 0 || id >= vocab_size) throw IndexError("behavior of interest " + std::to_string(id) + " outside vocabulary");
    if (b.column_of_id[static_cast<std::size_t>(id)] != kNotOfInterest) {
      throw ConfigError("behavior " + std::to_string(id) + " listed twice");
    }
    b.column_of_id[static_cast<std::size_t>(id)] = b.num_columns++;
  }
  return b;
}

// (T - W) x N. Row r (0-based) marks the behaviors occurring at positions
// r+1 .. r+W, i.e. the W behaviors after position r.
template <typename Scalar>
Matrix<Scalar> build_fbp_labels(std::span<const int> seq, int window, const BehaviorsOfInterest& interest) {
  if (window < 1) throw ConfigError("future window must be at least 1");
  const Index t = static_cast<Index>(seq.size());
  if (t <= window) {
    throw LengthError("sequence of " + std::to_string(t) + " behaviors is too short for future window " +
                      std::to_string(window));
  }
  const Index rows = t - window;
  Matrix<Scalar> y = Matrix<Scalar>::Zero(rows, interest.num_columns);
  // Sliding window: count occurrences of each column in positions r+1..r+W.
  std::vector<int> counts(static_cast<std::size_t>(interest.num_columns), 0);
  auto add = [&](Index pos, int delta) {
    const int c = interest.column(seq[static_cast<std::size_t>(pos)]);
    if (c != kNotOfInterest) counts[static_cast<std::size_t>(c)] += delta;
  };
  for (Index p = 1; p <= window; ++p) add(p, 1);
  for (Index r = 0; r < rows; ++r) {
    if (r > 0) {
      add(r, -1);
      add(r + window, 1);
    }
    for (int c = 0; c < interest.num_columns; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) y(r, c) = Scalar(1);
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> fbp_loss(const Tensor<Scalar>& logits, const std::type_identity_t<Matrix<Scalar>>& labels) {
  return bce_with_logits_mean(logits, labels);
}

// Which embeddings compete with an anchor's positive in the softmax
// denominator.
enum class NegativeSet {
  AllOthers,     // all 2M - 1 other embeddings in the batch
  OppositeView,  // only the M embeddings from the other side of the pairs
};

// anchors and positives are M x d, row k of each from the same user. Loss is
// the mean over all 2M rows of -log softmax(cos / tau)[partner], which equals
// the average of both directions per pair.
template <typename Scalar>
Tensor<Scalar> sup_loss(const Tensor<Scalar>& anchors, const Tensor<Scalar>& positives, Scalar tau,
                        NegativeSet negatives = NegativeSet::AllOthers) {
  if (!(tau > Scalar(0))) throw ConfigError("contrastive temperature must be positive");
  if (anchors.shape() != positives.shape()) {
    throw DimensionError("sup_loss: anchors " + anchors.shape().str() + " vs positives " + positives.shape().str());
  }
  const Index m = anchors.shape().rows;
  if (m < 2) throw ConfigError("contrastive batch needs at least 2 pairs for an in-batch negative, got " + std::to_string(m));
  const Tensor<Scalar> e = normalize_rows(concat_rows(std::vector<Tensor<Scalar>>{anchors, positives}));
  const Tensor<Scalar> logits = scale(matmul(e, transpose(e)), Scalar(1) / tau);
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> exclude =
      Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(2 * m, 2 * m, false);
  std::vector<int> targets(static_cast<std::size_t>(2 * m));
  for (Index r = 0; r < 2 * m; ++r) {
    targets[static_cast<std::size_t>(r)] = static_cast<int>(r < m ? r + m : r - m);
    exclude(r, r) = true;
    if (negatives == NegativeSet::OppositeView) {
      const Index same_side = r < m ? 0 : m;
      for (Index c = 0; c < m; ++c) exclude(r, same_side + c) = true;
    }
  }
  return softmax_cross_entropy_mean(logits, std::span<const int>(targets), &exclude);
}

// logits row r predicts next_ids[r].
template <typename Scalar>
Tensor<Scalar> clm_loss(const Tensor<Scalar>& logits, std::span<const int> next_ids) {
  return softmax_cross_entropy_mean(logits, next_ids);
}

struct ObjectiveSet {
  bool fbp = true;
  bool sup = true;
  bool clm = false;

  // use | use-fbp | use-sup | use-clm
  static ObjectiveSet parse(std::string_view name);
  std::string name() const;
  friend bool operator==(const ObjectiveSet&, const ObjectiveSet&) = default;
};

inline ObjectiveSet ObjectiveSet::parse(std::string_view name) {
  if (name == "use") return {true, true, false};
  if (name == "use-fbp") return {true, false, false};
  if (name == "use-sup") return {false, true, false};
  if (name == "use-clm") return {false, true, true};
  throw ConfigError("unknown objective '" + std::string(name) + "' (expected use, use-fbp, use-sup or use-clm)");
}

inline std::string ObjectiveSet::name() const {
  if (fbp && sup && !clm) return "use";
  if (fbp && !sup && !clm) return "use-fbp";
  if (!fbp && sup && !clm) return "use-sup";
  if (!fbp && sup && clm) return "use-clm";
  std::string s;
  if (fbp) s += "fbp+";
  if (sup) s += "sup+";
  if (clm) s += "clm+";
  return s.empty() ? "none" : s.substr(0, s.size() - 1);
}

struct LossOptions {
  ObjectiveSet objectives;
  double tau = 0.1;
  NegativeSet negatives = NegativeSet::AllOthers;
};

using SequencePair = std::pair<std::vector<int>, std::vector<int>>;

template <typename Scalar>
struct LossBreakdown {
  Tensor<Scalar> total;
  double fbp = 0.0;  // (1/M) sum over pairs of both members' FBP losses
  double sup = 0.0;
  double clm = 0.0;  // same pairing as fbp
};

// L = SUP + (1/M) sum_k (F(x_k) + F(x_k+)) [+ the same for CLM], with each
// member's embedding taken as the mean of its hidden states.
template <typename Scalar>
LossBreakdown<Scalar> combined_loss(const Weights<Tensor<Scalar>>& w, const ModelConfig& config,
                                    const std::vector<SequencePair>& batch, const BehaviorsOfInterest& interest,
                                    const LossOptions& options) {
  const auto& obj = options.objectives;
  if (!obj.fbp && !obj.sup && !obj.clm) throw ConfigError("no training objective selected");
  if (batch.empty()) throw EmptyInputError("combined_loss: empty batch");
  if (obj.sup && batch.size() < 2) throw ConfigError("contrastive objective needs at least 2 pairs per batch");
  if (obj.fbp && interest.num_columns != config.num_predicted) {
    throw ConfigError("behaviors of interest (" + std::to_string(interest.num_columns) +
                      ") differ from the model's prediction width (" + std::to_string(config.num_predicted) + ")");
  }
  const Scalar inv_m = Scalar(1) / static_cast<Scalar>(batch.size());
  std::vector<Tensor<Scalar>> pooled[2];
  std::vector<Tensor<Scalar>> terms;
  LossBreakdown<Scalar> out;
  for (const auto& pair : batch) {
    const std::vector<int>* members[2] = {&pair.first, &pair.second};
    for (int side = 0; side < 2; ++side) {
      const std::span<const int> ids(*members[side]);
      const Tensor<Scalar> hidden = forward_hidden(w, config, ids);
      if (obj.sup) pooled[side].push_back(mean(hidden, Axis::Rows));
      if (obj.fbp) {
        const Index rows = static_cast<Index>(ids.size()) - config.future_window;
        const Matrix<Scalar> labels = build_fbp_labels<Scalar>(ids, config.future_window, interest);
        const Tensor<Scalar> l = fbp_loss(fbp_logits(w, slice_rows(hidden, 0, rows)), labels);
        out.fbp += static_cast<double>(l.item()) * static_cast<double>(inv_m);
        terms.push_back(scale(l, inv_m));
      }
      if (obj.clm) {
        const Index rows = static_cast<Index>(ids.size()) - 1;
        if (rows < 1) throw LengthError("next-behavior objective needs sequences of at least 2 behaviors");
        const Tensor<Scalar> l = clm_loss(clm_logits(w, config, slice_rows(hidden, 0, rows)), ids.subspan(1));
        out.clm += static_cast<double>(l.item()) * static_cast<double>(inv_m);
        terms.push_back(scale(l, inv_m));
      }
    }
  }
  if (obj.sup) {
    const Tensor<Scalar> l = sup_loss(concat_rows(pooled[0]), concat_rows(pooled[1]), static_cast<Scalar>(options.tau),
                                      options.negatives);
    out.sup = static_cast<double>(l.item());
    terms.push_back(l);
  }
  Tensor<Scalar> total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  out.total = total;
  return out;
}

}  // namespace use
