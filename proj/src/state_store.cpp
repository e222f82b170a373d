#include "use/state_store.hpp"

#include <fstream>
#include <sstream>

#include "use/io.hpp"

namespace use {

namespace {

constexpr char kStateMagic[4] = {'U', 'S', 'E', 'S'};
constexpr std::uint32_t kStateVersion = 1;
constexpr std::string_view kManifestHeader = "#manifest v1";

Embedding mean_hidden(const Matrix<float>& hidden) { return hidden.cast<double>().colwise().mean(); }

void require_input(std::span<const int> ids, std::string_view what) {
  if (ids.empty()) throw EmptyInputError(std::string(what) + ": no new behaviors");
}

template <typename T>
T checked_count(std::istream& in, std::string_view what, T limit) {
  const T v = read_pod<T>(in, what);
  if (v > limit) throw FormatError("implausible " + std::string(what) + " " + std::to_string(v));
  return v;
}

void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

std::string_view strategy_name(UpdateStrategy s) {
  switch (s) {
    case UpdateStrategy::Stateful: return "stateful";
    case UpdateStrategy::RecentOnly: return "recent_only";
    case UpdateStrategy::PoolEmbeddings: return "pool_embeddings";
    case UpdateStrategy::RecomputeAll: return "recompute_all";
  }
  return "unknown";
}

UpdateStrategy parse_strategy(std::string_view name) {
  for (UpdateStrategy s : kAllStrategies) {
    if (strategy_name(s) == name) return s;
  }
  throw ConfigError("unknown update strategy '" + std::string(name) +
                    "' (expected stateful, recent_only, pool_embeddings or recompute_all)");
}

UserState init_user(std::uint64_t user_id, const Model<float>& model) {
  UserState s;
  s.user_id = user_id;
  s.model = model.initial_state();
  s.running_embedding = Embedding::Zero(model.config().hidden_size);
  return s;
}

UpdateResult update_stateful(const UserState& state, std::span<const int> new_behaviors, const Model<float>& model) {
  model.check_state(state.model);
  require_input(new_behaviors, "update_stateful");
  auto out = model.forward_stream(new_behaviors, state.model);
  UpdateResult r{state, {}};
  r.state.model = std::move(out.state);
  const auto delta = static_cast<std::int64_t>(new_behaviors.size());
  const std::int64_t n_new = state.behaviors_seen + delta;
  const Embedding fresh = mean_hidden(out.hidden);
  if (state.behaviors_seen == 0) {
    r.state.running_embedding = fresh;
  } else {
    r.state.running_embedding = (static_cast<double>(state.behaviors_seen) / static_cast<double>(n_new)) *
                                    state.running_embedding +
                                (static_cast<double>(delta) / static_cast<double>(n_new)) * fresh;
  }
  r.state.behaviors_seen = n_new;
  r.state.periods_seen = state.periods_seen + 1;
  r.embedding = r.state.running_embedding;
  return r;
}

Embedding update_recent_only(std::span<const int> new_behaviors, const Model<float>& model) {
  require_input(new_behaviors, "update_recent_only");
  return mean_hidden(model.forward_stream(new_behaviors, model.initial_state()).hidden);
}

UpdateResult update_pool(const UserState& state, std::span<const int> new_behaviors, const Model<float>& model,
                         PoolWeighting weighting) {
  model.check_state(state.model);
  UpdateResult r{state, {}};
  r.state.period_embeddings.push_back(update_recent_only(new_behaviors, model));
  r.state.period_counts.push_back(static_cast<std::int64_t>(new_behaviors.size()));
  Embedding acc = Embedding::Zero(model.config().hidden_size);
  double weight_sum = 0.0;
  for (std::size_t i = 0; i < r.state.period_embeddings.size(); ++i) {
    const double w =
        weighting == PoolWeighting::EqualPeriods ? 1.0 : static_cast<double>(r.state.period_counts[i]);
    acc += w * r.state.period_embeddings[i];
    weight_sum += w;
  }
  r.embedding = acc / weight_sum;
  r.state.running_embedding = r.embedding;
  r.state.behaviors_seen += static_cast<std::int64_t>(new_behaviors.size());
  r.state.periods_seen += 1;
  return r;
}

Embedding update_recompute_all(std::span<const int> full_history, const Model<float>& model,
                               const RecomputeOptions& options) {
  require_input(full_history, "update_recompute_all");
  if (full_history.size() > options.max_tokens) {
    throw BudgetError("history of " + std::to_string(full_history.size()) + " behaviors exceeds the budget of " +
                      std::to_string(options.max_tokens) + "; use the stateful update instead");
  }
  if (!options.force_chunkwise && full_history.size() <= static_cast<std::size_t>(model.config().max_seq_len)) {
    return mean_hidden(model.forward_parallel(full_history));
  }
  if (!options.allow_chunkwise) {
    throw BudgetError("history of " + std::to_string(full_history.size()) + " behaviors exceeds max_seq_len " +
                      std::to_string(model.config().max_seq_len) + "; enable chunkwise recomputation");
  }
  return mean_hidden(model.forward_stream(full_history, model.initial_state()).hidden);
}

std::string encode_state(const UserState& s) {
  std::ostringstream out(std::ios::binary);
  out.write(kStateMagic, 4);
  write_pod(out, kStateVersion);
  write_pod(out, s.user_id);
  write_pod(out, s.model.fingerprint);
  write_pod(out, s.behaviors_seen);
  write_pod(out, s.periods_seen);
  write_pod(out, s.model.tokens_processed);
  write_pod(out, static_cast<std::uint32_t>(s.running_embedding.size()));
  for (Index i = 0; i < s.running_embedding.size(); ++i) write_pod(out, s.running_embedding(i));
  write_pod(out, static_cast<std::uint32_t>(s.model.layers.size()));
  for (const auto& layer : s.model.layers) {
    write_pod(out, static_cast<std::uint32_t>(layer.heads.size()));
    for (const auto& head : layer.heads) {
      write_pod(out, static_cast<std::uint32_t>(head.s.rows()));
      write_pod(out, static_cast<std::uint32_t>(head.s.cols()));
      for (Index r = 0; r < head.s.rows(); ++r) {
        for (Index c = 0; c < head.s.cols(); ++c) write_pod(out, head.s(r, c));
      }
    }
  }
  if (s.period_embeddings.size() != s.period_counts.size()) {
    throw DimensionError("pooled embeddings and counts differ in length");
  }
  write_pod(out, static_cast<std::uint32_t>(s.period_embeddings.size()));
  for (std::size_t p = 0; p < s.period_embeddings.size(); ++p) {
    write_pod(out, s.period_counts[p]);
    const auto& e = s.period_embeddings[p];
    if (e.size() != s.running_embedding.size()) throw DimensionError("pooled embedding has the wrong width");
    for (Index i = 0; i < e.size(); ++i) write_pod(out, e(i));
  }
  return std::move(out).str();
}

UserState decode_state(std::string_view bytes, std::optional<std::uint64_t> expected_fingerprint) {
  std::istringstream in{std::string(bytes), std::ios::binary};
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string_view(magic, 4) != std::string_view(kStateMagic, 4)) {
    throw FormatError("not a user state record");
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kStateVersion) {
    throw VersionError("user state version " + std::to_string(version) + ", reader supports " +
                       std::to_string(kStateVersion));
  }
  UserState s;
  s.user_id = read_pod<std::uint64_t>(in, "user id");
  s.model.fingerprint = read_pod<std::uint64_t>(in, "fingerprint");
  if (expected_fingerprint && *expected_fingerprint != s.model.fingerprint) {
    throw StaleStateError("state of user " + std::to_string(s.user_id) + " was produced by parameters " +
                          to_hex(s.model.fingerprint) + ", expected " + to_hex(*expected_fingerprint));
  }
  s.behaviors_seen = read_pod<std::int64_t>(in, "behavior count");
  s.periods_seen = read_pod<std::int64_t>(in, "period count");
  s.model.tokens_processed = read_pod<std::int64_t>(in, "token count");
  if (s.behaviors_seen < 0 || s.periods_seen < 0) throw FormatError("negative counters in user state");
  const auto dim = checked_count<std::uint32_t>(in, "embedding width", 1u << 16);
  s.running_embedding.resize(dim);
  for (Index i = 0; i < dim; ++i) s.running_embedding(i) = read_pod<double>(in, "embedding");
  if (!s.running_embedding.allFinite()) throw FormatError("non-finite running embedding");
  const auto layers = checked_count<std::uint32_t>(in, "layer count", 1024);
  s.model.layers.resize(layers);
  for (auto& layer : s.model.layers) {
    const auto heads = checked_count<std::uint32_t>(in, "head count", 1024);
    layer.heads.resize(heads);
    for (auto& head : layer.heads) {
      const auto rows = checked_count<std::uint32_t>(in, "state rows", 1u << 14);
      const auto cols = checked_count<std::uint32_t>(in, "state cols", 1u << 14);
      head.s.resize(rows, cols);
      for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) head.s(r, c) = read_pod<float>(in, "state payload");
      }
    }
  }
  const auto pooled = checked_count<std::uint32_t>(in, "pooled period count", 1u << 24);
  for (std::uint32_t p = 0; p < pooled; ++p) {
    s.period_counts.push_back(read_pod<std::int64_t>(in, "pooled count"));
    Embedding e(dim);
    for (Index i = 0; i < dim; ++i) e(i) = read_pod<double>(in, "pooled embedding");
    s.period_embeddings.push_back(std::move(e));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after user state record");
  return s;
}

void save_state(const UserState& state, const std::filesystem::path& path) { atomic_write(path, encode_state(state)); }

UserState load_state(const std::filesystem::path& path, std::optional<std::uint64_t> expected_fingerprint) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), {}};
  try {
    return decode_state(bytes, expected_fingerprint);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

StateStore::StateStore(std::filesystem::path root) : root_(std::move(root)) {
  std::filesystem::create_directories(root_ / "users");
  const auto manifest = root_ / "manifest.txt";
  std::ifstream in(manifest);
  if (!in) return;
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) throw FormatError(manifest.string() + ": bad manifest header");
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::uint64_t id = 0;
    Entry e;
    std::string record, fp;
    if (!(fields >> id >> record >> e.behaviors_seen >> e.periods_seen >> fp)) {
      throw FormatError(manifest.string() + ": malformed line '" + line + "'");
    }
    e.record = record;
    e.fingerprint = from_hex(fp);
    entries_[id] = e;
  }
}

std::vector<std::uint64_t> StateStore::user_ids() const {
  std::vector<std::uint64_t> ids;
  for (const auto& [id, e] : entries_) ids.push_back(id);
  return ids;
}

const StateStore::Entry& StateStore::entry(std::uint64_t user_id) const {
  const auto it = entries_.find(user_id);
  if (it == entries_.end()) throw IndexError("no stored state for user " + std::to_string(user_id));
  return it->second;
}

void StateStore::put(const UserState& state) {
  Entry e;
  e.record = std::filesystem::path("users") / (std::to_string(state.user_id) + ".uses");
  e.behaviors_seen = state.behaviors_seen;
  e.periods_seen = state.periods_seen;
  e.fingerprint = state.fingerprint();
  save_state(state, root_ / e.record);
  entries_[state.user_id] = e;
  write_manifest();
}

UserState StateStore::get(std::uint64_t user_id, std::optional<std::uint64_t> expected_fingerprint) const {
  const Entry& e = entry(user_id);
  if (expected_fingerprint && e.fingerprint != *expected_fingerprint) {
    throw StaleStateError("stored state of user " + std::to_string(user_id) + " belongs to parameters " +
                          to_hex(e.fingerprint) + ", expected " + to_hex(*expected_fingerprint));
  }
  UserState s = load_state(root_ / e.record, expected_fingerprint);
  if (s.user_id != user_id) throw FormatError("record for user " + std::to_string(user_id) + " holds another user");
  return s;
}

void StateStore::append_history(std::uint64_t user_id, std::span<const int> behaviors) {
  std::filesystem::create_directories(root_ / "history");
  std::ofstream out(root_ / "history" / (std::to_string(user_id) + ".txt"), std::ios::app);
  if (!out) throw Error("cannot append history for user " + std::to_string(user_id));
  for (int id : behaviors) out << id << '\n';
}

std::vector<int> StateStore::history(std::uint64_t user_id) const {
  std::ifstream in(root_ / "history" / (std::to_string(user_id) + ".txt"));
  std::vector<int> ids;
  int id = 0;
  while (in >> id) ids.push_back(id);
  return ids;
}

void StateStore::write_manifest() const {
  std::ostringstream out;
  out << kManifestHeader << '\n';
  for (const auto& [id, e] : entries_) {
    out << id << '\t' << e.record.generic_string() << '\t' << e.behaviors_seen << '\t' << e.periods_seen << '\t'
        << to_hex(e.fingerprint) << '\n';
  }
  atomic_write(root_ / "manifest.txt", out.str());
}

}  // namespace use
