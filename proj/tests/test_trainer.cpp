#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "flg/checkpoint.hpp"
#include "flg/errors.hpp"
#include "flg/trainer.hpp"

using namespace flg;
using namespace flg::testing;

namespace {

DatasetSplit small_data(int n = 60) {
  return gen_mcq_dataset(gen_fact_table(12, 12, 5), n, 9);
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs = 2;
  c.eval_every = 5;
  c.warmup_steps = 3;
  c.min_steps = 1000;
  c.lr_proj = 1e-2;
  c.lr_out = 1e-2;
  c.seed = 17;
  return c;
}

std::vector<std::uint64_t> frozen_checksums(const Graph& g) {
  std::vector<std::uint64_t> out;
  for (int i = 0; i < kLayer1Nodes + kLayer2Nodes; ++i) out.push_back(g.node(i).checksum());
  return out;
}

bool same_params(const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].value.size() != b[i].value.size()) return false;
    if (std::memcmp(a[i].value.data(), b[i].value.data(), sizeof(double) * static_cast<std::size_t>(a[i].value.size())) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("evaluate against a stub predictor") {
  const std::vector<int> answers = {0, 2, 1};
  std::vector<Vector> probs(3, Vector(4));
  probs[0] << 0.7, 0.1, 0.1, 0.1;
  probs[1] << 0.25, 0.25, 0.25, 0.25;  // tie resolves to class 0: wrong
  probs[2] << 0.1, 0.6, 0.2, 0.1;
  const EvalResult r = evaluate(answers, [&](std::size_t i) { return Prediction{probs[i], Matrix()}; });
  CHECK(r.count == 3);
  CHECK(r.accuracy == doctest::Approx(2.0 / 3.0));
  CHECK(r.mean_loss == doctest::Approx(-(std::log(0.7) + std::log(0.25) + std::log(0.6)) / 3.0));
}

TEST_CASE("train config validation and schedules") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.lr_proj = 0.0;
  CHECK_NOTHROW(c.validate());
  c.lr_proj = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  CHECK(parse_schedule("cosine") == Schedule::kCosine);
  CHECK(to_string(parse_schedule("warmup-constant")) == "warmup-constant");
  CHECK_THROWS_AS(parse_schedule("step"), ConfigError);

  c = TrainConfig{};
  c.warmup_steps = 4;
  CHECK(scheduled_lr(c, 1.0, 0, 100) == doctest::Approx(0.25));
  CHECK(scheduled_lr(c, 1.0, 3, 100) == doctest::Approx(1.0));
  CHECK(scheduled_lr(c, 1.0, 99, 100) == doctest::Approx(1.0));
  c.schedule = Schedule::kCosine;
  CHECK(scheduled_lr(c, 1.0, 0, 100) == doctest::Approx(1.0));
  CHECK(scheduled_lr(c, 1.0, 50, 100) == doctest::Approx(0.5));
}

TEST_CASE("zero learning rates leave every parameter unchanged") {
  Graph g = tiny_graph();
  const auto before = collect(g.named_parameters());
  auto c = quick_config();
  c.lr_proj = 0.0;
  c.lr_out = 0.0;
  train_graph(g, small_data(), c);
  CHECK(same_params(before, collect(g.named_parameters())));
}

TEST_CASE("training respects the frozen boundary and learns") {
  Graph g = tiny_graph();
  const auto sums = frozen_checksums(g);
  const auto before = collect(g.named_parameters());
  const auto result = train_graph(g, small_data(), quick_config());
  CHECK(frozen_checksums(g) == sums);
  for (int i = 0; i < kLayer1Nodes + kLayer2Nodes; ++i) {
    for (const auto& [name, t] : g.node(i).named_parameters()) {
      CHECK_MESSAGE(!t->has_grad(), name);
    }
  }
  CHECK(!same_params(before, collect(g.named_parameters())));
  CHECK(result.state.finished);
  CHECK(result.state.step == 12);  // 48 train examples, batch 8, 2 epochs
  CHECK(same_params(result.state.best_params, collect(g.named_parameters())));
  for (const auto& m : result.state.metrics) {
    CHECK(std::isfinite(m.loss));
    CHECK(m.attention[0] + m.attention[1] == doctest::Approx(1.0).epsilon(1e-12));
    for (double gn : m.gnorm) CHECK(gn > 0.0);
  }
}

TEST_CASE("resume reproduces the uninterrupted trajectory") {
  const auto data = small_data();
  const auto config = quick_config();
  Graph full = tiny_graph();
  const auto reference = train_graph(full, data, config);

  Graph first = tiny_graph();
  TrainOptions stop;
  stop.stop_after = 7;
  const auto partial = train_graph(first, data, config, stop);
  CHECK(!partial.state.finished);
  CHECK(partial.state.step == 7);

  // Round-trip through the on-disk container before resuming on a fresh graph.
  const auto bytes = encode_checkpoint(encode_train_state(partial.state));
  TrainOptions resume;
  resume.resume = decode_train_state(decode_checkpoint(bytes));
  Graph second = tiny_graph();
  const auto resumed = train_graph(second, data, config, resume);

  REQUIRE(resumed.state.metrics.size() == reference.state.metrics.size());
  for (std::size_t i = 0; i < reference.state.metrics.size(); ++i) {
    const auto& a = reference.state.metrics[i];
    const auto& b = resumed.state.metrics[i];
    CHECK(a.step == b.step);
    CHECK(a.loss == b.loss);
    CHECK(a.gnorm == b.gnorm);
    CHECK(a.val_acc == b.val_acc);
  }
  CHECK(same_params(collect(full.named_parameters()), collect(second.named_parameters())));
  CHECK(resumed.state.best_step == reference.state.best_step);
}

TEST_CASE("metrics csv schema") {
  Graph g = tiny_graph();
  const auto result = train_graph(g, small_data(), quick_config());
  const auto path = std::filesystem::temp_directory_path() / "flg_test_metrics.csv";
  write_metrics_csv(path, result.state.metrics);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,epoch,loss,val_acc,gnorm_w1,gnorm_w2,gnorm_w3,gnorm_w4,gnorm_w5,attn_node4,attn_node5,lr_proj,lr_out");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 12);
  }
  CHECK(rows == result.state.metrics.size());
  std::filesystem::remove(path);
}

TEST_CASE("dead-node warning fires when layer-1 edges receive no gradient") {
  // With alpha = 0 nothing from z1 reaches layer 2, so W_1..W_3 get exactly zero gradient.
  auto gc = tiny_graph_config();
  gc.alpha = 0.0;
  Graph g = build_graph(gc);
  auto c = quick_config();
  c.dead_node_window = 4;
  const auto result = train_graph(g, small_data(), c);
  std::vector<int> edges;
  for (const auto& w : result.state.warnings) {
    edges.push_back(w.edge);
    CHECK(w.step == 3);
    CHECK(w.window == 4);
    CHECK(!w.message.empty());
  }
  CHECK(edges == std::vector<int>{0, 1, 2});
}

TEST_CASE("baseline width matches the budget") {
  // d_in 10, 4 classes: linear head 44; a hidden layer of h costs 15 h + 4.
  CHECK(baseline_parameter_count(10, 4, 0) == 44);
  CHECK(baseline_parameter_count(10, 4, 7) == 109);
  CHECK(baseline_hidden_width(10, 4, 44) == 0);
  CHECK(baseline_hidden_width(10, 4, 100) == 7);
  CHECK(baseline_hidden_width(10, 4, 109) == 7);
  CHECK_THROWS_AS(baseline_hidden_width(10, 4, 43), ConfigError);
}

TEST_CASE("baseline head trains on a frozen node") {
  TransformerNode node(tiny_node("a", 12, 3, 101, 30));
  node.freeze();
  auto c = quick_config();
  const auto r = train_baseline_head(node, small_data(), 200, 0.9, c);
  CHECK(r.parameters >= 200);
  CHECK(r.parameters == baseline_parameter_count(12, 4, r.hidden));
  CHECK(r.test_accuracy >= 0.0);
  CHECK(r.test_accuracy <= 1.0);
}
