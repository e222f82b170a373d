#pragma once

// Flat `key = value` run configuration shared by every CLI subcommand.
// Files are loaded first, then command-line overrides are applied on top;
// everything is validated before any work starts.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "use/data.hpp"
#include "use/eval.hpp"
#include "use/model.hpp"
#include "use/trainer.hpp"

namespace use {

inline constexpr std::string_view kCodeVersion = "use 0.1.0";

// Raised for a bad key or value; key() names the offender.
class KeyError : public ConfigError {
 public:
  KeyError(std::string key, const std::string& what) : ConfigError(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  PersonaOptions persona;
  int users = 800;
  int length = 1024;
  SimulationSchedule schedule;
  RetrievalOptions retrieval;
  ProbeOptions probe;
  double probe_user_fraction = 0.5;
  bool retrain_probe_per_period = false;
  int bench_users = 32;
  int bench_repetitions = 5;
  std::size_t memory_budget_mb = 64;

  // Every recognised key, in echo order.
  static std::vector<std::string> keys();

  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;

  // "key = value" lines; '#' starts a comment.
  void load_text(std::string_view text, std::string_view origin = "config");
  void load_file(const std::filesystem::path& path);
  // "key=value"
  void apply_override(std::string_view assignment);

  // Range and cross-field checks; throws KeyError.
  void validate() const;

  // Canonical listing of every key; the hash is taken over it.
  std::string echo() const;
  std::uint64_t hash() const;

  // Lines for output headers: code version, command, config hash, seed.
  std::vector<std::string> provenance(std::string_view command) const;

  BehaviorVocab vocab() const { return BehaviorVocab::standard(persona.num_behaviors); }
};

}  // namespace use
