#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "flg/checkpoint.hpp"
#include "flg/errors.hpp"
#include "flg/pipeline.hpp"

using namespace flg;

namespace {

std::vector<NamedTensor> sample_tensors() {
  Matrix m(2, 3);
  m << 1.0, -0.0, 3.5e-300, std::numeric_limits<double>::infinity(), -7.25, 1.0 / 3.0;
  Matrix v(4, 1);
  v << 0.1, 0.2, 0.3, 0.4;
  Matrix s(1, 1);
  s << 42.0;
  return {{"matrix", Shape{2, 3}, m}, {"vector", Shape{4}, v}, {"scalar", Shape{}, s}};
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("checkpoint round trip is bitwise") {
  const auto tensors = sample_tensors();
  const auto bytes = encode_checkpoint(tensors);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "FLG1");
  const auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == tensors.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].name == tensors[i].name);
    CHECK(back[i].shape == tensors[i].shape);
    CHECK(bitwise_equal(back[i].value, tensors[i].value));
  }
  CHECK(encode_checkpoint(back) == bytes);
}

TEST_CASE("corrupted checkpoints are refused") {
  const auto bytes = encode_checkpoint(sample_tensors());
  SUBCASE("flipped payload byte") {
    auto bad = bytes;
    bad[bad.size() / 2] ^= 0x01;
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  }
  SUBCASE("flipped checksum byte") {
    auto bad = bytes;
    bad.back() ^= 0x80;
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  }
  SUBCASE("bad magic") {
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  }
  SUBCASE("truncated") {
    auto bad = bytes;
    bad.resize(bad.size() - 9);
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  }
  SUBCASE("trailing bytes") {
    auto bad = bytes;
    bad.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  }
}

TEST_CASE("checkpoint files and restore by name") {
  const auto dir = std::filesystem::temp_directory_path() / "flg_test_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "t.flg";
  save_checkpoint(path, sample_tensors());
  const auto loaded = load_checkpoint(path);
  CHECK(bitwise_equal(find_tensor(loaded, "vector").value, sample_tensors()[1].value));
  CHECK_THROWS_AS(find_tensor(loaded, "absent"), FormatError);
  CHECK(file_checksum(path) == fnv1a64(encode_checkpoint(sample_tensors())));

  TransformerNode a(testing::tiny_node("a", 12, 3, 1, 30));
  TransformerNode b(testing::tiny_node("a", 12, 3, 2, 30));
  CHECK(a.checksum() != b.checksum());
  restore(b.named_parameters(), collect(a.named_parameters(), "node/"), "node/");
  CHECK(a.checksum() == b.checksum());

  auto wrong = collect(a.named_parameters());
  wrong.front().value = Matrix::Zero(1, 1);
  wrong.front().shape = Shape{1};
  CHECK_THROWS(restore(b.named_parameters(), wrong));
  std::filesystem::remove_all(dir);
}

TEST_CASE("run config text round trip") {
  RunConfig c;
  c.seed = 77;
  c.train.schedule = Schedule::kCosine;
  c.train.lr_proj = 0.0123456789012345;
  c.nodes.layer1_widths = {20, 28, 36};
  c.symmetric_layer2 = true;
  const std::string text = serialize_run_config(c);
  const RunConfig back = parse_run_config(text);
  CHECK(serialize_run_config(back) == text);
  CHECK(back.seed == 77);
  CHECK(back.train.schedule == Schedule::kCosine);
  CHECK(back.train.lr_proj == c.train.lr_proj);
  CHECK(back.nodes.layer1_widths == c.nodes.layer1_widths);
  CHECK(back.symmetric_layer2);
}

TEST_CASE("run config errors name the key") {
  const std::string text = serialize_run_config(RunConfig{});
  auto message_of = [](const std::string& t) {
    try {
      parse_run_config(t);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  SUBCASE("missing key") {
    const auto pos = text.find("patience");
    const auto end = text.find('\n', pos);
    const std::string cut = text.substr(0, pos) + text.substr(end + 1);
    CHECK(message_of(cut).find("train.patience") != std::string::npos);
  }
  SUBCASE("unknown key") {
    const std::string extra = text + "\n[extra]\nfoo = 1\n";
    CHECK(message_of(extra).find("extra.foo") != std::string::npos);
  }
  SUBCASE("malformed value") {
    std::string bad = text;
    const auto pos = bad.find("d_s = ");
    bad.replace(pos, bad.find('\n', pos) - pos, "d_s = sixteen");
    CHECK(message_of(bad).find("graph.d_s") != std::string::npos);
  }
  SUBCASE("invalid schedule") {
    std::string bad = text;
    const auto pos = bad.find("schedule = ");
    bad.replace(pos, bad.find('\n', pos) - pos, "schedule = linear");
    CHECK(message_of(bad).find("train.schedule") != std::string::npos);
  }
}

TEST_CASE("binomial upper tail") {
  CHECK(binomial_upper_tail(0, 10, 0.25) == doctest::Approx(1.0));
  CHECK(binomial_upper_tail(10, 10, 0.5) == doctest::Approx(std::pow(0.5, 10)));
  // P[X >= 2] for Bin(3, 0.5) = 4/8
  CHECK(binomial_upper_tail(2, 3, 0.5) == doctest::Approx(0.5));
  CHECK(binomial_upper_tail(120, 200, 0.25) < 1e-12);
}
