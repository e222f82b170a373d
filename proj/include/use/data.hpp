#pragma once

// Behavior vocabulary, synthetic persona-driven behavior logs, dataset files,
// and term-frequency vectorizers.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "use/errors.hpp"

namespace use {

inline constexpr int kPadId = 0;
inline constexpr int kNewSessionId = 1;
inline constexpr int kNumSpecialIds = 2;

class BehaviorVocab {
 public:
  // Specials are prepended: pad = 0, new_session = 1.
  explicit BehaviorVocab(std::vector<std::string> behavior_names);

  // The built-in app-behavior vocabulary; counts beyond the named set get
  // generic behavior_<k> names.
  static BehaviorVocab standard(int num_behaviors = 64);

  int size() const { return static_cast<int>(names_.size()); }
  int num_behaviors() const { return size() - kNumSpecialIds; }
  const std::string& name(int id) const;
  int id(std::string_view name) const;
  std::uint64_t fingerprint() const;

  void write(const std::filesystem::path& path) const;
  static BehaviorVocab read(const std::filesystem::path& path);

  friend bool operator==(const BehaviorVocab& a, const BehaviorVocab& b) { return a.names_ == b.names_; }

 private:
  std::vector<std::string> names_;
};

struct BehaviorSequence {
  std::uint64_t user_id = 0;
  std::vector<int> ids;

  friend bool operator==(const BehaviorSequence&, const BehaviorSequence&) = default;
};

using Dataset = std::vector<BehaviorSequence>;

// Archetype Markov chains over the behavior ids [kNumSpecialIds, vocab_size).
// Row i of a transition matrix is the next-behavior distribution after
// behavior i; session_start is the distribution of a session's first behavior.
struct PersonaSpec {
  int num_behaviors = 64;
  std::vector<Eigen::MatrixXd> transitions;
  std::vector<Eigen::RowVectorXd> session_start;
  double perturbation = 0.3;          // per-user logit noise scale
  double mean_session_length = 12.0;  // behaviors per session (geometric)
  double drift_rate = 0.0;            // per-period mixing toward fresh noise
  int drift_period = 64;              // behaviors per drift period

  int num_archetypes() const { return static_cast<int>(transitions.size()); }
  int vocab_size() const { return num_behaviors + kNumSpecialIds; }

  // Throws SpecError on malformed input.
  void validate() const;
};

struct PersonaOptions {
  int num_behaviors = 64;
  int num_archetypes = 8;
  double archetype_spread = 1.5;  // logit scale of archetype-specific structure
  double popularity_skew = 1.0;   // Zipf exponent of shared behavior popularity
  double perturbation = 0.3;
  double mean_session_length = 12.0;
  double drift_rate = 0.0;
  int drift_period = 64;
};

PersonaSpec make_persona_spec(const PersonaOptions& options, std::uint64_t seed);

// Users get ids first_user_id, first_user_id + 1, ...; each user draws from an
// independent substream of (seed, user_id), so a user's log does not depend on
// how many other users are generated.
Dataset generate_dataset(const PersonaSpec& spec, int num_users, int length_per_user, std::uint64_t seed,
                         std::uint64_t first_user_id = 0);

// Deterministic per-(seed, stream) generator.
std::mt19937_64 substream(std::uint64_t seed, std::uint64_t stream);

// Line format: a "#vocab <hex>" header, optional further '#' lines, then
// "user_id<TAB>space-separated ids" per user.
void write_dataset(const std::filesystem::path& path, const Dataset& data, const BehaviorVocab& vocab,
                   const std::vector<std::string>& header_lines = {});
Dataset read_dataset(const std::filesystem::path& path, const BehaviorVocab& vocab);

// Behavior counts normalized to sum 1, one entry per vocabulary id.
Eigen::VectorXd tf_vector(std::span<const int> seq, int vocab_size);

// TF weighted by idf_j = ln((1 + D) / (1 + df_j)) + 1. A behavior present in
// every document gets idf exactly 1.
std::vector<Eigen::VectorXd> tfidf_vectors(const std::vector<std::vector<int>>& docs, int vocab_size);
Eigen::VectorXd idf_weights(const std::vector<std::vector<int>>& docs, int vocab_size);

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace use
