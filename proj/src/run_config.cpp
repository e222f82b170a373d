#include "use/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "use/io.hpp"

namespace use {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw KeyError(std::string(key), "cannot parse '" + std::string(v) + "' as a number");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw KeyError(std::string(key), "expected true or false, got '" + std::string(v) + "'");
}

// Shortest text that reads back to the same double.
std::string show(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

struct KeySpec {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

// Binds a numeric field reached through an accessor.
template <typename T, typename Access>
KeySpec num(std::string name, Access access) {
  return {name,
          [access](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return show(access(const_cast<RunConfig&>(c)));
            } else {
              return std::to_string(access(const_cast<RunConfig&>(c)));
            }
          },
          [access, name](RunConfig& c, std::string_view v) { access(c) = parse_number<T>(name, v); }};
}

template <typename Access>
KeySpec flag(std::string name, Access access) {
  return {name, [access](const RunConfig& c) { return std::string(access(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [access, name](RunConfig& c, std::string_view v) { access(c) = parse_bool(name, v); }};
}

const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> table = [] {
    std::vector<KeySpec> t;
    t.push_back(num<std::uint64_t>("seed", [](RunConfig& c) -> auto& { return c.seed; }));
    // model
    t.push_back(num<int>("model.layers", [](RunConfig& c) -> auto& { return c.model.num_layers; }));
    t.push_back(num<int>("model.heads", [](RunConfig& c) -> auto& { return c.model.num_heads; }));
    t.push_back(num<int>("model.hidden", [](RunConfig& c) -> auto& { return c.model.hidden_size; }));
    t.push_back(num<int>("model.ffn", [](RunConfig& c) -> auto& { return c.model.ffn_size; }));
    t.push_back(num<int>("model.window", [](RunConfig& c) -> auto& { return c.model.future_window; }));
    t.push_back(num<int>("model.max_seq_len", [](RunConfig& c) -> auto& { return c.model.max_seq_len; }));
    t.push_back(num<int>("model.chunk_len", [](RunConfig& c) -> auto& { return c.model.chunk_len; }));
    t.push_back(flag("model.clm_head", [](RunConfig& c) -> auto& { return c.model.clm_head; }));
    t.push_back(flag("model.normalized", [](RunConfig& c) -> auto& { return c.model.normalized_retention; }));
    // training
    t.push_back({"train.objective", [](const RunConfig& c) { return c.train.objectives.name(); },
                 [](RunConfig& c, std::string_view v) {
                   try {
                     c.train.objectives = ObjectiveSet::parse(v);
                   } catch (const Error& e) {
                     throw KeyError("train.objective", e.what());
                   }
                 }});
    t.push_back({"train.negatives",
                 [](const RunConfig& c) {
                   return std::string(c.train.negatives == NegativeSet::AllOthers ? "all_others" : "opposite_view");
                 },
                 [](RunConfig& c, std::string_view v) {
                   if (v == "all_others") {
                     c.train.negatives = NegativeSet::AllOthers;
                   } else if (v == "opposite_view") {
                     c.train.negatives = NegativeSet::OppositeView;
                   } else {
                     throw KeyError("train.negatives", "expected all_others or opposite_view");
                   }
                 }});
    t.push_back(num<int>("train.seq_len", [](RunConfig& c) -> auto& { return c.train.seq_len; }));
    t.push_back(num<int>("train.pair_gap", [](RunConfig& c) -> auto& { return c.train.pair_gap; }));
    t.push_back(num<int>("train.batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }));
    t.push_back(num<int>("train.epochs", [](RunConfig& c) -> auto& { return c.train.epochs; }));
    t.push_back(num<double>("train.peak_lr", [](RunConfig& c) -> auto& { return c.train.peak_lr; }));
    t.push_back(num<double>("train.warmup_fraction", [](RunConfig& c) -> auto& { return c.train.warmup_fraction; }));
    t.push_back(num<double>("train.weight_decay", [](RunConfig& c) -> auto& { return c.train.weight_decay; }));
    t.push_back(num<double>("train.beta1", [](RunConfig& c) -> auto& { return c.train.beta1; }));
    t.push_back(num<double>("train.beta2", [](RunConfig& c) -> auto& { return c.train.beta2; }));
    t.push_back(num<double>("train.adam_eps", [](RunConfig& c) -> auto& { return c.train.adam_eps; }));
    t.push_back(num<double>("train.clip_norm", [](RunConfig& c) -> auto& { return c.train.clip_norm; }));
    t.push_back(num<double>("train.tau", [](RunConfig& c) -> auto& { return c.train.tau; }));
    t.push_back(num<int>("train.validation_every", [](RunConfig& c) -> auto& { return c.train.validation_every; }));
    // synthetic data
    t.push_back(num<int>("data.users", [](RunConfig& c) -> auto& { return c.users; }));
    t.push_back(num<int>("data.length", [](RunConfig& c) -> auto& { return c.length; }));
    t.push_back(num<int>("data.behaviors", [](RunConfig& c) -> auto& { return c.persona.num_behaviors; }));
    t.push_back(num<int>("data.archetypes", [](RunConfig& c) -> auto& { return c.persona.num_archetypes; }));
    t.push_back(num<double>("data.archetype_spread", [](RunConfig& c) -> auto& { return c.persona.archetype_spread; }));
    t.push_back(num<double>("data.popularity_skew", [](RunConfig& c) -> auto& { return c.persona.popularity_skew; }));
    t.push_back(num<double>("data.perturbation", [](RunConfig& c) -> auto& { return c.persona.perturbation; }));
    t.push_back(num<double>("data.session_mean", [](RunConfig& c) -> auto& { return c.persona.mean_session_length; }));
    t.push_back(num<double>("data.drift_rate", [](RunConfig& c) -> auto& { return c.persona.drift_rate; }));
    t.push_back(num<int>("data.drift_period", [](RunConfig& c) -> auto& { return c.persona.drift_period; }));
    // simulation schedule
    t.push_back(num<int>("schedule.initial", [](RunConfig& c) -> auto& { return c.schedule.initial; }));
    t.push_back(num<int>("schedule.increment", [](RunConfig& c) -> auto& { return c.schedule.increment; }));
    t.push_back(num<int>("schedule.periods", [](RunConfig& c) -> auto& { return c.schedule.periods; }));
    // evaluation
    t.push_back(num<int>("retrieval.window", [](RunConfig& c) -> auto& { return c.retrieval.window_len; }));
    t.push_back(num<int>("retrieval.gap", [](RunConfig& c) -> auto& { return c.retrieval.gap; }));
    t.push_back(num<int>("retrieval.candidates", [](RunConfig& c) -> auto& { return c.retrieval.n_candidates; }));
    t.push_back(num<double>("retrieval.hard_threshold", [](RunConfig& c) -> auto& { return c.retrieval.hard_threshold; }));
    t.push_back(num<int>("probe.hidden", [](RunConfig& c) -> auto& { return c.probe.hidden; }));
    t.push_back(num<int>("probe.epochs", [](RunConfig& c) -> auto& { return c.probe.epochs; }));
    t.push_back(num<double>("probe.lr", [](RunConfig& c) -> auto& { return c.probe.lr; }));
    t.push_back(num<double>("probe.user_fraction", [](RunConfig& c) -> auto& { return c.probe_user_fraction; }));
    t.push_back(flag("probe.per_period", [](RunConfig& c) -> auto& { return c.retrain_probe_per_period; }));
    t.push_back(num<int>("bench.users", [](RunConfig& c) -> auto& { return c.bench_users; }));
    t.push_back(num<int>("bench.repetitions", [](RunConfig& c) -> auto& { return c.bench_repetitions; }));
    t.push_back(num<std::size_t>("bench.memory_mb", [](RunConfig& c) -> auto& { return c.memory_budget_mb; }));
    return t;
  }();
  return table;
}

const KeySpec& find_key(std::string_view key) {
  for (const auto& k : key_table()) {
    if (k.name == key) return k;
  }
  throw KeyError(std::string(key), "unknown key");
}

void require(bool ok, const char* key, const std::string& what) {
  if (!ok) throw KeyError(key, what);
}

}  // namespace

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& k : key_table()) out.push_back(k.name);
  return out;
}

void RunConfig::set(std::string_view key, std::string_view value) {
  find_key(key).set(*this, trim(value));
  if (key == "data.behaviors") {
    model.vocab_size = persona.num_behaviors + kNumSpecialIds;
    model.num_predicted = persona.num_behaviors;
  }
}

std::string RunConfig::get(std::string_view key) const { return find_key(key).get(*this); }

void RunConfig::load_text(std::string_view text, std::string_view origin) {
  std::istringstream in{std::string(text)};
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    std::string_view s = line;
    if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(n) + ": expected 'key = value'");
    }
    set(trim(s.substr(0, eq)), s.substr(eq + 1));
  }
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  load_text(buf.str(), path.string());
}

void RunConfig::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::validate() const {
  require(model.num_layers >= 1, "model.layers", "must be positive");
  require(model.num_heads >= 1, "model.heads", "must be positive");
  require(model.hidden_size >= 1 && model.hidden_size % model.num_heads == 0, "model.hidden",
          "must be a positive multiple of model.heads");
  require(model.ffn_size >= 1, "model.ffn", "must be positive");
  require(model.future_window >= 1, "model.window", "must be at least 1");
  require(model.max_seq_len >= 2, "model.max_seq_len", "must be at least 2");
  require(model.chunk_len >= 1 && model.chunk_len <= model.max_seq_len, "model.chunk_len",
          "must lie in [1, model.max_seq_len]");
  require(!model.normalized_retention, "model.normalized", "is reserved and must be false");

  require(train.seq_len >= 2 && train.seq_len <= model.max_seq_len, "train.seq_len", "must lie in [2, model.max_seq_len]");
  require(!train.objectives.fbp || train.seq_len > model.future_window, "train.seq_len", "must exceed model.window");
  require(train.pair_gap >= 0, "train.pair_gap", "must be non-negative");
  require(train.batch_size >= 2, "train.batch_size", "must be at least 2");
  require(train.epochs >= 1, "train.epochs", "must be positive");
  require(train.peak_lr > 0.0, "train.peak_lr", "must be positive");
  require(train.warmup_fraction > 0.0 && train.warmup_fraction < 1.0, "train.warmup_fraction", "must lie in (0, 1)");
  require(train.weight_decay >= 0.0, "train.weight_decay", "must be non-negative");
  require(train.beta1 >= 0.0 && train.beta1 < 1.0, "train.beta1", "must lie in [0, 1)");
  require(train.beta2 >= 0.0 && train.beta2 < 1.0, "train.beta2", "must lie in [0, 1)");
  require(train.adam_eps > 0.0, "train.adam_eps", "must be positive");
  require(train.tau > 0.0, "train.tau", "must be positive");
  require(!train.objectives.clm || model.clm_head, "model.clm_head", "must be true for the use-clm objective");
  require(train.validation_every == 0 || train.validation_every >= 2, "train.validation_every", "must be 0 or at least 2");

  require(users >= 1, "data.users", "must be positive");
  require(length >= 1, "data.length", "must be positive");
  require(persona.num_behaviors >= 1, "data.behaviors", "must be positive");
  require(persona.num_archetypes >= 1, "data.archetypes", "must be positive");
  require(persona.archetype_spread >= 0.0, "data.archetype_spread", "must be non-negative");
  require(persona.perturbation >= 0.0, "data.perturbation", "must be non-negative");
  require(persona.mean_session_length >= 1.0, "data.session_mean", "must be at least 1");
  require(persona.drift_rate >= 0.0 && persona.drift_rate <= 1.0, "data.drift_rate", "must lie in [0, 1]");
  require(persona.drift_period >= 1, "data.drift_period", "must be positive");

  require(schedule.initial >= 1, "schedule.initial", "must be positive");
  require(schedule.increment >= 1, "schedule.increment", "must be positive");
  require(schedule.periods >= 1, "schedule.periods", "must be positive");

  require(retrieval.window_len >= 1, "retrieval.window", "must be positive");
  require(retrieval.gap >= 0, "retrieval.gap", "must be non-negative");
  require(retrieval.n_candidates >= 2, "retrieval.candidates", "must be at least 2");
  require(probe.hidden >= 1, "probe.hidden", "must be positive");
  require(probe.epochs >= 1, "probe.epochs", "must be positive");
  require(probe.lr > 0.0, "probe.lr", "must be positive");
  require(probe_user_fraction > 0.0 && probe_user_fraction < 1.0, "probe.user_fraction", "must lie in (0, 1)");
  require(bench_users >= 1, "bench.users", "must be positive");
  require(bench_repetitions >= 1, "bench.repetitions", "must be positive");
  require(memory_budget_mb >= 1, "bench.memory_mb", "must be positive");
}

std::string RunConfig::echo() const {
  std::string out;
  for (const auto& k : key_table()) out += k.name + " = " + k.get(*this) + "\n";
  return out;
}

std::uint64_t RunConfig::hash() const {
  Fnv1a h;
  h.update(echo());
  return h.digest();
}

std::vector<std::string> RunConfig::provenance(std::string_view command) const {
  return {"version " + std::string(kCodeVersion), "command " + std::string(command), "config_hash " + to_hex(hash()),
          "seed " + std::to_string(seed)};
}

}  // namespace use
