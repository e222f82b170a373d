#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "use/grad_check.hpp"
#include "use/model.hpp"

using namespace use;
namespace fs = std::filesystem;

namespace {

ModelConfig micro() {
  ModelConfig c;
  c.vocab_size = 10;
  c.num_layers = 2;
  c.num_heads = 2;
  c.hidden_size = 8;
  c.ffn_size = 16;
  c.num_predicted = 8;
  c.future_window = 3;
  c.max_seq_len = 40;
  c.chunk_len = 7;
  return c;
}

std::vector<int> random_ids(int n, int vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(1, vocab - 1);
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (auto& x : ids) x = d(rng);
  return ids;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "use_test_model";
  fs::create_directories(dir);
  return dir / name;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

}  // namespace

TEST_CASE("config validation names the offending field") {
  ModelConfig c = micro();
  c.num_heads = 3;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("divisible"), ConfigError);
  c = micro();
  c.normalized_retention = true;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = micro();
  c.future_window = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config text round trip and strict keys") {
  const ModelConfig c = ModelConfig::large();
  CHECK(ModelConfig::parse(c.serialize()) == c);
  CHECK(c.hidden_size == 768);
  CHECK(c.num_layers == 12);
  CHECK(c.num_heads == 8);
  CHECK(c.ffn_size == 3072);
  CHECK_THROWS_AS(ModelConfig::parse("bogus=1\n"), ConfigError);
  CHECK_THROWS_AS(ModelConfig::parse("num_layers=two\n"), ConfigError);
}

TEST_CASE("initialization roles") {
  const auto p = init_parameters<double>(micro(), 1);
  CHECK(p.weights.final_gain.isOnes());
  CHECK(p.weights.blocks[0].ln1_bias.isZero());
  CHECK(p.weights.fbp_b.isZero());
  CHECK(p.weights.blocks[1].ffn_b1.isZero());
  const auto big = init_parameters<double>(ModelConfig{}, 2);
  const auto& e = big.weights.embedding;
  const double mean = e.mean();
  const double sd = std::sqrt((e.array() - mean).square().mean());
  CHECK(std::abs(mean) < 0.005);
  CHECK(sd == doctest::Approx(0.02).epsilon(0.1));
  CHECK(fingerprint(init_parameters<double>(micro(), 1)) == fingerprint(p));
  CHECK(fingerprint(init_parameters<double>(micro(), 2)) != fingerprint(p));
}

TEST_CASE("weight shapes follow the config") {
  const auto p = init_parameters<float>(micro(), 3);
  const auto shapes = weight_shapes(micro());
  std::size_t i = 0;
  visit_weights(p.weights, micro(), [&](const std::string& name, const Matrix<float>& m) {
    CHECK(name == shapes[i].first);
    CHECK(shape_of(m) == shapes[i].second);
    ++i;
  });
  CHECK(i == shapes.size());
  ModelConfig no_clm = micro();
  no_clm.clm_head = false;
  CHECK(weight_shapes(no_clm).size() == shapes.size() - 2);
}

TEST_CASE("forward variants agree") {
  std::mt19937_64 rng(5);
  const Model<double> model(init_parameters<double>(micro(), 4));
  const auto ids = random_ids(33, micro().vocab_size, rng);
  const Matrix<double> par = model.forward_parallel(std::span<const int>(ids));
  const auto streamed = model.forward_stream(std::span<const int>(ids), model.initial_state());
  CHECK((par - streamed.hidden).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(streamed.state.tokens_processed == 33);
  auto state = model.initial_state();
  Matrix<double> pieces(33, micro().hidden_size);
  std::size_t start = 0;
  for (std::size_t len : {1u, 5u, 12u, 15u}) {
    auto out = model.forward_chunkwise(std::span<const int>(ids).subspan(start, len), state);
    pieces.middleRows(static_cast<Index>(start), static_cast<Index>(len)) = out.hidden;
    state = out.state;
    start += len;
  }
  CHECK((par - pieces).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((embed(par) - embed(pieces)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("ragged batch forward") {
  std::mt19937_64 rng(6);
  const Model<float> model(init_parameters<float>(micro(), 4));
  const std::vector<std::vector<int>> batch = {random_ids(5, 10, rng), random_ids(11, 10, rng)};
  const auto out = model.forward_parallel(batch);
  CHECK(out[0].rows() == 5);
  CHECK(out[1].rows() == 11);
  CHECK((out[1] - model.forward_parallel(std::span<const int>(batch[1]))).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("forward errors") {
  const Model<float> model(init_parameters<float>(micro(), 4));
  std::vector<int> empty;
  CHECK_THROWS_AS(model.forward_parallel(std::span<const int>(empty)), EmptyInputError);
  CHECK_THROWS_AS(model.forward_chunkwise(std::span<const int>(empty), model.initial_state()), EmptyInputError);
  std::vector<int> too_long(41, 2);
  CHECK_THROWS_AS(model.forward_parallel(std::span<const int>(too_long)), LengthError);
  std::vector<int> bad = {2, 10};
  CHECK_THROWS_AS(model.forward_parallel(std::span<const int>(bad)), IndexError);
  const Model<float> other(init_parameters<float>(micro(), 5));
  std::vector<int> ok = {2, 3};
  CHECK_THROWS_AS(model.forward_chunkwise(std::span<const int>(ok), other.initial_state()), StaleStateError);
}

TEST_CASE("embedding masks") {
  Matrix<double> h(3, 2);
  h << 1, 2, 3, 4, 100, 100;
  Eigen::Array<bool, Eigen::Dynamic, 1> valid(3);
  valid << true, true, false;
  CHECK(embed(h, valid) == (RowVector<double>(2) << 2, 3).finished());
  valid.setConstant(false);
  CHECK_THROWS_AS(embed(h, valid), EmptyInputError);
}

TEST_CASE("parameter file round trip is bitwise") {
  const auto p = init_parameters<float>(micro(), 9);
  const fs::path a = temp_path("a.usew");
  const fs::path b = temp_path("b.usew");
  save_params(p, a);
  const auto loaded = load_params(a);
  CHECK(fingerprint(loaded) == fingerprint(p));
  save_params(loaded, b);
  CHECK(read_bytes(a) == read_bytes(b));
  const ModelConfig expected = micro();
  CHECK_NOTHROW(load_params(a, &expected));
  ModelConfig other = micro();
  other.num_layers = 1;
  CHECK_THROWS_AS(load_params(a, &other), ConfigError);
}

TEST_CASE("parameter file corruption is detected") {
  const auto p = init_parameters<float>(micro(), 9);
  const fs::path a = temp_path("c.usew");
  save_params(p, a);
  const std::string good = read_bytes(a);
  const fs::path bad = temp_path("bad.usew");

  std::string s = good;
  s[0] = 'X';
  write_bytes(bad, s);
  CHECK_THROWS_AS(load_params(bad), FormatError);

  s = good;
  s[4] = 7;
  write_bytes(bad, s);
  CHECK_THROWS_AS(load_params(bad), VersionError);

  write_bytes(bad, good + "x");
  CHECK_THROWS_AS(load_params(bad), FormatError);

  write_bytes(bad, good.substr(0, good.size() - 3));
  CHECK_THROWS_AS(load_params(bad), FormatError);

  s = good;
  s[s.size() - 1] ^= 0x40;
  write_bytes(bad, s);
  CHECK_THROWS_AS(load_params(bad), FormatError);

  s = good;
  s.replace(s.find("num_layers=2"), 12, "num_layerz=2");
  write_bytes(bad, s);
  CHECK_THROWS_AS(load_params(bad), FormatError);
}

TEST_CASE("model gradient matches finite differences") {
  ModelConfig c = micro();
  c.num_layers = 1;
  c.chunk_len = 6;
  const auto p = init_parameters<double>(c, 12);
  std::vector<Matrix<double>> inputs;
  visit_weights(p.weights, c, [&](const std::string&, const Matrix<double>& m) { inputs.push_back(m * 10.0); });
  const std::vector<int> ids = {1, 4, 2, 7, 7, 3, 9, 1, 5};
  Matrix<double> target = Matrix<double>::Zero(6, c.num_predicted);
  target(0, 1) = target(2, 3) = target(5, 7) = 1.0;
  const auto res = grad_check(
      [&](Graph<double>&, const std::vector<Tensor<double>>& leaves) {
        auto w = weights_layout<Tensor<double>>(c);
        std::size_t i = 0;
        visit_weights(w, c, [&](const std::string&, Tensor<double>& t) { t = leaves[i++]; });
        const auto h = forward_hidden(w, c, std::span<const int>(ids));
        return bce_with_logits_mean(fbp_logits(w, slice_rows(h, 0, 6)), target);
      },
      inputs, GradCheckOptions{1e-6, 1e-6, 6, 1});
  CHECK(res.max_relative_error < 1e-4);
}
