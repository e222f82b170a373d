#include "use/model.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace use {

namespace {

constexpr char kParamMagic[4] = {'U', 'S', 'E', 'W'};
constexpr std::uint32_t kParamVersion = 1;

int parse_int(const std::string& key, const std::string& value) {
  int out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("model config: '" + key + "' is not an integer: '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw ConfigError("model config: '" + key + "' is not a boolean: '" + value + "'");
}

}  // namespace

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  require(vocab_size >= 3, "vocab_size must be at least 3");
  require(num_layers >= 1, "num_layers must be positive");
  require(num_heads >= 1, "num_heads must be positive");
  require(hidden_size >= 1, "hidden_size must be positive");
  require(hidden_size % num_heads == 0, "hidden_size " + std::to_string(hidden_size) + " not divisible by num_heads " +
                                            std::to_string(num_heads));
  require(ffn_size >= 1, "ffn_size must be positive");
  require(num_predicted >= 1 && num_predicted <= vocab_size, "num_predicted must lie in [1, vocab_size]");
  require(future_window >= 1, "future_window must be at least 1");
  require(max_seq_len >= 1, "max_seq_len must be positive");
  require(chunk_len >= 1 && chunk_len <= max_seq_len, "chunk_len must lie in [1, max_seq_len]");
  require(!normalized_retention, "normalized_retention is reserved and must be false");
}

std::string ModelConfig::serialize() const {
  std::ostringstream out;
  out << "vocab_size=" << vocab_size << '\n'
      << "num_layers=" << num_layers << '\n'
      << "num_heads=" << num_heads << '\n'
      << "hidden_size=" << hidden_size << '\n'
      << "ffn_size=" << ffn_size << '\n'
      << "num_predicted=" << num_predicted << '\n'
      << "future_window=" << future_window << '\n'
      << "max_seq_len=" << max_seq_len << '\n'
      << "chunk_len=" << chunk_len << '\n'
      << "clm_head=" << (clm_head ? 1 : 0) << '\n'
      << "normalized_retention=" << (normalized_retention ? 1 : 0) << '\n';
  return out.str();
}

ModelConfig ModelConfig::parse(std::string_view text) {
  ModelConfig c;
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("model config: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  for (const auto& [key, value] : kv) {
    if (key == "vocab_size") c.vocab_size = parse_int(key, value);
    else if (key == "num_layers") c.num_layers = parse_int(key, value);
    else if (key == "num_heads") c.num_heads = parse_int(key, value);
    else if (key == "hidden_size") c.hidden_size = parse_int(key, value);
    else if (key == "ffn_size") c.ffn_size = parse_int(key, value);
    else if (key == "num_predicted") c.num_predicted = parse_int(key, value);
    else if (key == "future_window") c.future_window = parse_int(key, value);
    else if (key == "max_seq_len") c.max_seq_len = parse_int(key, value);
    else if (key == "chunk_len") c.chunk_len = parse_int(key, value);
    else if (key == "clm_head") c.clm_head = parse_bool(key, value);
    else if (key == "normalized_retention") c.normalized_retention = parse_bool(key, value);
    else throw ConfigError("model config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::large() {
  ModelConfig c;
  c.num_layers = 12;
  c.num_heads = 8;
  c.hidden_size = 768;
  c.ffn_size = 3072;
  c.future_window = 100;
  c.max_seq_len = 512;
  c.chunk_len = 256;
  return c;
}

void save_params(const Parameters<float>& params, const std::filesystem::path& path) {
  params.config.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(kParamMagic, 4);
  write_pod(out, kParamVersion);
  write_string(out, params.config.serialize());
  write_pod(out, fingerprint(params));
  const auto shapes = weight_shapes(params.config);
  std::size_t i = 0;
  visit_weights(params.weights, params.config, [&](const std::string& name, const Matrix<float>& m) {
    if (shape_of(m) != shapes[i++].second) throw DimensionError("weight " + name + " has shape " + shape_of(m).str());
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) write_pod(out, m(r, c));
    }
  });
  if (!out) throw Error("write failed for " + path.string());
}

Parameters<float> load_params(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string_view(magic, 4) != std::string_view(kParamMagic, 4)) {
    throw FormatError(path.string() + " is not a parameter file");
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kParamVersion) {
    throw VersionError("parameter file version " + std::to_string(version) + ", reader supports " +
                       std::to_string(kParamVersion));
  }
  const std::string config_text = read_string(in, "config block");
  ModelConfig config;
  try {
    config = ModelConfig::parse(config_text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("corrupt config block: ") + e.what());
  }
  if (expected && !(config == *expected)) {
    throw ConfigError("parameter file declares a different model config than expected");
  }
  const auto stored_fp = read_pod<std::uint64_t>(in, "fingerprint");
  Parameters<float> p{config, weights_layout<Matrix<float>>(config)};
  const auto shapes = weight_shapes(config);
  std::size_t i = 0;
  visit_weights(p.weights, config, [&](const std::string& name, Matrix<float>& m) {
    const Shape s = shapes[i++].second;
    m.resize(s.rows, s.cols);
    for (Index r = 0; r < s.rows; ++r) {
      for (Index c = 0; c < s.cols; ++c) m(r, c) = read_pod<float>(in, name);
    }
  });
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after weight payload");
  if (fingerprint(p) != stored_fp) throw FormatError("weight payload does not match stored fingerprint");
  return p;
}

}  // namespace use
