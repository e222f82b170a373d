#pragma once

// Per-user persistent model state and the four embedding update strategies:
// stateful (carry retention state forward), recent-only, pooled per-period
// embeddings, and full recomputation.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "use/model.hpp"

namespace use {

enum class UpdateStrategy { Stateful, RecentOnly, PoolEmbeddings, RecomputeAll };

std::string_view strategy_name(UpdateStrategy s);
UpdateStrategy parse_strategy(std::string_view name);
inline constexpr UpdateStrategy kAllStrategies[] = {UpdateStrategy::Stateful, UpdateStrategy::RecentOnly,
                                                    UpdateStrategy::PoolEmbeddings, UpdateStrategy::RecomputeAll};

enum class PoolWeighting { EqualPeriods, BehaviorCount };

using Embedding = RowVector<double>;

struct UserState {
  std::uint64_t user_id = 0;
  ModelState<float> model;  // fingerprint lives here
  std::int64_t behaviors_seen = 0;
  Embedding running_embedding;
  std::int64_t periods_seen = 0;
  // Pool strategy only: one embedding and behavior count per period.
  std::vector<Embedding> period_embeddings;
  std::vector<std::int64_t> period_counts;

  std::uint64_t fingerprint() const { return model.fingerprint; }
};

struct UpdateResult {
  UserState state;
  Embedding embedding;
};

UserState init_user(std::uint64_t user_id, const Model<float>& model);

// Threads the stored retention state through the new behaviors and folds
// their mean hidden state into the running mean.
UpdateResult update_stateful(const UserState& state, std::span<const int> new_behaviors, const Model<float>& model);

// Mean hidden state of this period alone, from a zero state.
Embedding update_recent_only(std::span<const int> new_behaviors, const Model<float>& model);

UpdateResult update_pool(const UserState& state, std::span<const int> new_behaviors, const Model<float>& model,
                         PoolWeighting weighting = PoolWeighting::EqualPeriods);

struct RecomputeOptions {
  // Histories longer than max_seq_len run chunkwise from a zero state; when
  // false they are rejected instead.
  bool allow_chunkwise = true;
  // Always run chunkwise from a zero state, even when one parallel pass fits.
  // Keeps the kernel fixed across history lengths when timing.
  bool force_chunkwise = false;
  std::size_t max_tokens = std::numeric_limits<std::size_t>::max();
};

Embedding update_recompute_all(std::span<const int> full_history, const Model<float>& model,
                               const RecomputeOptions& options = {});

// "USES" record: magic, u32 version, user id, fingerprint, n, periods,
// running mean (f64), retention states (f32), pooled period embeddings.
void save_state(const UserState& state, const std::filesystem::path& path);
// When expected_fingerprint is given, a record from other parameters is a
// StaleStateError.
UserState load_state(const std::filesystem::path& path, std::optional<std::uint64_t> expected_fingerprint = {});

std::string encode_state(const UserState& state);
UserState decode_state(std::string_view bytes, std::optional<std::uint64_t> expected_fingerprint = {});

// A directory of per-user records indexed by manifest.txt. Raw histories may
// be archived alongside for full recomputation.
class StateStore {
 public:
  struct Entry {
    std::filesystem::path record;  // relative to the store root
    std::int64_t behaviors_seen = 0;
    std::int64_t periods_seen = 0;
    std::uint64_t fingerprint = 0;
  };

  explicit StateStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  bool contains(std::uint64_t user_id) const { return entries_.count(user_id) > 0; }
  std::vector<std::uint64_t> user_ids() const;
  const Entry& entry(std::uint64_t user_id) const;

  void put(const UserState& state);
  UserState get(std::uint64_t user_id, std::optional<std::uint64_t> expected_fingerprint = {}) const;

  void append_history(std::uint64_t user_id, std::span<const int> behaviors);
  std::vector<int> history(std::uint64_t user_id) const;

 private:
  void write_manifest() const;

  std::filesystem::path root_;
  std::map<std::uint64_t, Entry> entries_;
};

}  // namespace use
