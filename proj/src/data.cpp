#include "use/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "use/io.hpp"

namespace use {

namespace {

const std::vector<std::string>& app_behavior_names() {
  static const std::vector<std::string> names = {
      "open_app",         "close_app",       "open_camera",      "take_snap",          "record_video",
      "apply_filter",     "apply_lens",      "send_snap",        "send_chat",          "read_chat",
      "open_chat",        "view_story",      "post_story",       "open_map",           "view_friend_location",
      "search_friend",    "add_friend",      "accept_friend",    "view_profile",       "edit_profile",
      "open_discover",    "watch_show",      "skip_story",       "reply_story",        "send_voice_note",
      "start_call",       "end_call",        "start_video_call", "share_link",         "save_memory",
      "open_memories",    "edit_snap",       "add_sticker",      "add_caption",        "crop_snap",
      "view_spotlight",   "like_spotlight",  "share_spotlight",  "open_settings",      "change_privacy",
      "view_ad",          "click_ad",        "skip_ad",          "open_bitmoji",       "edit_bitmoji",
      "play_game",        "end_game",        "open_shop",        "view_product",       "purchase_item",
      "open_notifications", "clear_notifications", "mute_chat",  "block_user",         "report_content",
      "open_group",       "send_group_chat", "create_group",     "leave_group",        "scan_code",
      "use_voice_filter", "view_trending",   "send_gif",         "unsend_message",
  };
  return names;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Eigen::RowVectorXd softmax_row(const Eigen::RowVectorXd& logits) {
  Eigen::RowVectorXd p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

int sample_categorical(const Eigen::RowVectorXd& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = u(rng);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    acc += p(i);
    if (r < acc) return static_cast<int>(i);
  }
  return static_cast<int>(p.size() - 1);
}

std::string vocab_header(std::uint64_t fp) { return "#vocab " + to_hex(fp); }

std::uint64_t parse_vocab_header(const std::string& line, const std::filesystem::path& path) {
  if (!line.starts_with("#vocab ")) throw FormatError(path.string() + ": missing #vocab header");
  return from_hex(line.substr(7));
}

}  // namespace

BehaviorVocab::BehaviorVocab(std::vector<std::string> behavior_names) {
  names_.reserve(behavior_names.size() + kNumSpecialIds);
  names_.push_back("pad");
  names_.push_back("new_session");
  for (auto& n : behavior_names) {
    if (n.empty() || n.find_first_of(" \t\n") != std::string::npos) throw VocabError("invalid behavior name '" + n + "'");
    if (std::find(names_.begin(), names_.end(), n) != names_.end()) throw VocabError("duplicate behavior name '" + n + "'");
    names_.push_back(std::move(n));
  }
}

BehaviorVocab BehaviorVocab::standard(int num_behaviors) {
  if (num_behaviors < 1) throw VocabError("vocabulary needs at least one behavior");
  const auto& base = app_behavior_names();
  std::vector<std::string> names;
  for (int i = 0; i < num_behaviors; ++i) {
    names.push_back(i < static_cast<int>(base.size()) ? base[static_cast<std::size_t>(i)] : "behavior_" + std::to_string(i));
  }
  return BehaviorVocab(std::move(names));
}

const std::string& BehaviorVocab::name(int id) const {
  if (id < 0 || id >= size()) throw VocabError("unknown behavior id " + std::to_string(id));
  return names_[static_cast<std::size_t>(id)];
}

int BehaviorVocab::id(std::string_view name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw VocabError("unknown behavior '" + std::string(name) + "'");
  return static_cast<int>(it - names_.begin());
}

std::uint64_t BehaviorVocab::fingerprint() const {
  Fnv1a h;
  for (const auto& n : names_) {
    h.update(n);
    h.update(std::string_view("\n"));
  }
  return h.digest();
}

void BehaviorVocab::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << vocab_header(fingerprint()) << '\n';
  for (int i = 0; i < size(); ++i) out << i << '\t' << names_[static_cast<std::size_t>(i)] << '\n';
}

BehaviorVocab BehaviorVocab::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty vocabulary file");
  const std::uint64_t fp = parse_vocab_header(line, path);
  std::vector<std::string> names;
  int expected = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(path.string() + ": malformed line '" + line + "'");
    if (std::stoi(line.substr(0, tab)) != expected++) throw FormatError(path.string() + ": ids are not dense");
    names.push_back(line.substr(tab + 1));
  }
  if (names.size() < kNumSpecialIds || names[0] != "pad" || names[1] != "new_session") {
    throw FormatError(path.string() + ": specials pad/new_session must occupy ids 0 and 1");
  }
  BehaviorVocab vocab(std::vector<std::string>(names.begin() + kNumSpecialIds, names.end()));
  if (vocab.fingerprint() != fp) throw VocabError(path.string() + ": vocabulary fingerprint mismatch");
  return vocab;
}

void PersonaSpec::validate() const {
  if (num_behaviors < 2) throw SpecError("persona spec needs at least two behaviors");
  if (transitions.empty()) throw SpecError("persona spec has no archetypes");
  if (session_start.size() != transitions.size()) throw SpecError("one session-start distribution per archetype");
  if (!(perturbation >= 0.0)) throw SpecError("perturbation scale must be non-negative");
  if (!(mean_session_length >= 1.0)) throw SpecError("mean session length must be at least 1");
  if (!(drift_rate >= 0.0 && drift_rate < 1.0)) throw SpecError("drift rate must lie in [0, 1)");
  if (drift_period < 1) throw SpecError("drift period must be positive");
  const auto check_row = [](const Eigen::RowVectorXd& row, const std::string& what) {
    if ((row.array() < 0.0).any() || !row.allFinite()) throw SpecError(what + " has negative or non-finite entries");
    if (std::abs(row.sum() - 1.0) > 1e-9) throw SpecError(what + " does not sum to 1");
  };
  for (std::size_t k = 0; k < transitions.size(); ++k) {
    const auto& t = transitions[k];
    if (t.rows() != num_behaviors || t.cols() != num_behaviors) {
      throw SpecError("archetype " + std::to_string(k) + " transition matrix has the wrong shape");
    }
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      check_row(t.row(i), "archetype " + std::to_string(k) + " row " + std::to_string(i));
      if (t(i, i) >= 1.0 - 1e-12) {
        throw SpecError("archetype " + std::to_string(k) + " behavior " + std::to_string(i) + " is absorbing");
      }
    }
    if (session_start[k].size() != num_behaviors) throw SpecError("session-start distribution has the wrong size");
    check_row(session_start[k], "archetype " + std::to_string(k) + " session start");
  }
}

PersonaSpec make_persona_spec(const PersonaOptions& o, std::uint64_t seed) {
  if (o.num_archetypes < 1) throw SpecError("need at least one archetype");
  std::mt19937_64 rng = substream(seed, 0xa5c4e7ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int b = o.num_behaviors;
  // Shared popularity over a random permutation of behaviors.
  std::vector<int> order(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) order[static_cast<std::size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng);
  Eigen::RowVectorXd popularity(b);
  for (int rank = 0; rank < b; ++rank) {
    popularity(order[static_cast<std::size_t>(rank)]) = -o.popularity_skew * std::log(1.0 + rank);
  }
  PersonaSpec spec;
  spec.num_behaviors = b;
  spec.perturbation = o.perturbation;
  spec.mean_session_length = o.mean_session_length;
  spec.drift_rate = o.drift_rate;
  spec.drift_period = o.drift_period;
  for (int k = 0; k < o.num_archetypes; ++k) {
    Eigen::MatrixXd t(b, b);
    for (int i = 0; i < b; ++i) {
      Eigen::RowVectorXd logits = popularity;
      for (int j = 0; j < b; ++j) logits(j) += o.archetype_spread * normal(rng);
      t.row(i) = softmax_row(logits);
    }
    Eigen::RowVectorXd start = popularity;
    for (int j = 0; j < b; ++j) start(j) += o.archetype_spread * normal(rng);
    spec.transitions.push_back(std::move(t));
    spec.session_start.push_back(softmax_row(start));
  }
  spec.validate();
  return spec;
}

std::mt19937_64 substream(std::uint64_t seed, std::uint64_t stream) {
  return std::mt19937_64(splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
}

Dataset generate_dataset(const PersonaSpec& spec, int num_users, int length_per_user, std::uint64_t seed,
                         std::uint64_t first_user_id) {
  spec.validate();
  if (num_users < 0 || length_per_user < 1) throw SpecError("need a non-negative user count and positive length");
  const int b = spec.num_behaviors;
  const double p_stop = 1.0 / spec.mean_session_length;
  Dataset out;
  out.reserve(static_cast<std::size_t>(num_users));
  for (int u = 0; u < num_users; ++u) {
    const std::uint64_t user_id = first_user_id + static_cast<std::uint64_t>(u);
    std::mt19937_64 rng = substream(seed, user_id);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const int archetype = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.num_archetypes()));
    const Eigen::MatrixXd base_logits = spec.transitions[static_cast<std::size_t>(archetype)].array().log();
    const Eigen::RowVectorXd base_start = spec.session_start[static_cast<std::size_t>(archetype)].array().log();
    auto draw_noise = [&](Eigen::Index rows, Eigen::Index cols) {
      Eigen::MatrixXd n(rows, cols);
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) n(i, j) = spec.perturbation * normal(rng);
      }
      return n;
    };
    Eigen::MatrixXd noise = draw_noise(b, b);
    Eigen::RowVectorXd start_noise = draw_noise(1, b);
    Eigen::MatrixXd trans(b, b);
    Eigen::RowVectorXd start(b);
    auto rebuild = [&] {
      for (int i = 0; i < b; ++i) trans.row(i) = softmax_row(base_logits.row(i) + noise.row(i));
      start = softmax_row(base_start + start_noise);
    };
    rebuild();

    BehaviorSequence seq;
    seq.user_id = user_id;
    seq.ids.reserve(static_cast<std::size_t>(length_per_user));
    int current = -1;
    while (static_cast<int>(seq.ids.size()) < length_per_user) {
      const int pos = static_cast<int>(seq.ids.size());
      if (spec.drift_rate > 0.0 && pos > 0 && pos % spec.drift_period == 0) {
        noise = (1.0 - spec.drift_rate) * noise + spec.drift_rate * draw_noise(b, b);
        start_noise = (1.0 - spec.drift_rate) * start_noise + spec.drift_rate * draw_noise(1, b);
        rebuild();
      }
      if (current < 0) {
        seq.ids.push_back(kNewSessionId);
        current = sample_categorical(start, rng);
        if (static_cast<int>(seq.ids.size()) < length_per_user) seq.ids.push_back(current + kNumSpecialIds);
      } else {
        current = sample_categorical(trans.row(current), rng);
        seq.ids.push_back(current + kNumSpecialIds);
      }
      if (unif(rng) < p_stop) current = -1;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data, const BehaviorVocab& vocab,
                   const std::vector<std::string>& header_lines) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << vocab_header(vocab.fingerprint()) << '\n';
  for (const auto& h : header_lines) out << "# " << h << '\n';
  for (const auto& seq : data) {
    out << seq.user_id << '\t';
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
      if (i) out << ' ';
      out << seq.ids[i];
    }
    out << '\n';
  }
  if (!out) throw Error("write failed for " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path, const BehaviorVocab& vocab) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  Dataset out;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (!header_seen && line.starts_with("#vocab ")) {
        if (parse_vocab_header(line, path) != vocab.fingerprint()) {
          throw VocabError(path.string() + ": dataset was written with a different vocabulary");
        }
        header_seen = true;
      }
      continue;
    }
    if (!header_seen) throw FormatError(path.string() + ": missing #vocab header");
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(path.string() + ": malformed line");
    BehaviorSequence seq;
    const auto [p, ec] = std::from_chars(line.data(), line.data() + tab, seq.user_id);
    if (ec != std::errc() || p != line.data() + tab) throw FormatError(path.string() + ": bad user id");
    const char* cur = line.data() + tab + 1;
    const char* end = line.data() + line.size();
    while (cur < end) {
      while (cur < end && *cur == ' ') ++cur;
      if (cur == end) break;
      int id = 0;
      const auto [q, ec2] = std::from_chars(cur, end, id);
      if (ec2 != std::errc()) throw FormatError(path.string() + ": bad behavior id");
      if (id <= kPadId || id >= vocab.size()) {
        throw VocabError(path.string() + ": behavior id " + std::to_string(id) + " not in vocabulary");
      }
      seq.ids.push_back(id);
      cur = q;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

Eigen::VectorXd tf_vector(std::span<const int> seq, int vocab_size) {
  if (seq.empty()) throw EmptyInputError("tf_vector: empty sequence");
  Eigen::VectorXd v = Eigen::VectorXd::Zero(vocab_size);
  for (int id : seq) {
    if (id < 0 || id >= vocab_size) throw VocabError("tf_vector: id " + std::to_string(id) + " outside vocabulary");
    v(id) += 1.0;
  }
  return v / static_cast<double>(seq.size());
}

Eigen::VectorXd idf_weights(const std::vector<std::vector<int>>& docs, int vocab_size) {
  Eigen::VectorXd df = Eigen::VectorXd::Zero(vocab_size);
  std::vector<char> seen(static_cast<std::size_t>(vocab_size));
  for (const auto& d : docs) {
    std::fill(seen.begin(), seen.end(), 0);
    for (int id : d) {
      if (id < 0 || id >= vocab_size) throw VocabError("idf: id " + std::to_string(id) + " outside vocabulary");
      if (!seen[static_cast<std::size_t>(id)]) {
        seen[static_cast<std::size_t>(id)] = 1;
        df(id) += 1.0;
      }
    }
  }
  const double n = static_cast<double>(docs.size());
  return ((1.0 + n) / (1.0 + df.array())).log() + 1.0;
}

std::vector<Eigen::VectorXd> tfidf_vectors(const std::vector<std::vector<int>>& docs, int vocab_size) {
  const Eigen::VectorXd idf = idf_weights(docs, vocab_size);
  std::vector<Eigen::VectorXd> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(tf_vector(d, vocab_size).cwiseProduct(idf));
  return out;
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace use
