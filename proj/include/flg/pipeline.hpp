#pragma once

// Run configuration and the end-to-end experiment: task generation, node
// pretraining, graph training, and single-node comparisons.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flg/graph.hpp"
#include "flg/taskgen.hpp"
#include "flg/trainer.hpp"
#include "flg/transformer_node.hpp"

namespace flg {

struct TaskConfig {
  int num_keys = 12;
  int num_answers = 12;
  int n_shards = 3;
  double shard_coverage = 0.6;
  int dataset_size = 2000;
  int fact_copies = 4;
  int practice_per_node = 4000;
};

struct NodeLayout {
  int vocab_size = 64;
  int max_seq = 16;
  int prefix_len = 2;
  int ff_mult = 4;
  std::vector<int> layer1_widths = {32, 24, 48};
  std::vector<int> layer1_layers = {4, 5, 4};
  std::vector<int> layer2_widths = {64, 96};
  std::vector<int> layer2_layers = {5, 6};
  std::vector<int> heads = {4, 4, 4, 4, 4};
};

struct PretrainConfig {
  int layer1_steps = 3000;
  int layer2_steps = 600;
  double lr = 3e-3;
  int batch_size = 32;
  int warmup_steps = 50;
};

struct RunConfig {
  std::string name = "default";
  std::uint64_t seed = 1234;
  TaskConfig task;
  NodeLayout nodes;
  PretrainConfig pretrain;
  int d_s = 16;
  double alpha = 0.25;
  double l_T = 0.90;
  double l_S = 0.75;
  InjectPositions inject_positions = InjectPositions::kAll;
  int output_heads = 4;
  int n_classes = 4;
  /// Replace the second layer-2 node with a copy of the first and mirror
  /// their edge initialization (routing symmetry control).
  bool symmetric_layer2 = false;
  TrainConfig train;
  bool run_baseline = true;

  /// Node specs with seeds and framing prefixes derived from the root seed.
  std::vector<NodeSpec> node_specs() const;
  GraphConfig graph_config() const;
  /// `train` with its seed tied to the run seed.
  TrainConfig train_config() const;
};

/// Every key is required. Throws ConfigError naming the section/key on a
/// missing or malformed entry, and on unknown keys.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string serialize_run_config(const RunConfig& config);

struct Task {
  FactTable table;
  /// Unrelated facts used to give layer-2 nodes question-format skill without
  /// task knowledge.
  FactTable distractor;
  std::vector<Shard> shards;
  DatasetSplit data;
};

Task make_task(const RunConfig& config);

/// Pretraining corpus for node `index` (0-2 layer-1, 3-4 layer-2).
std::vector<TokenSeq> node_corpus(const RunConfig& config, const Task& task, int index);

using LogFn = std::function<void(const std::string&)>;

struct PretrainedNodes {
  std::vector<TransformerNode> nodes;
  std::vector<std::vector<double>> loss_curves;
};

/// Builds, pretrains, and freezes all five nodes.
PretrainedNodes pretrain_all(const RunConfig& config, const Task& task, const LogFn& log = {});

void save_node(const std::filesystem::path& path, const TransformerNode& node);
/// Loads parameters into a fresh node built from `spec`, then freezes it.
TransformerNode load_node(const std::filesystem::path& path, const NodeSpec& spec);

/// The five nodes in graph order, copied so the symmetric control can reuse
/// node 4 in both layer-2 slots.
std::vector<TransformerNode> graph_nodes(const RunConfig& config, const std::vector<TransformerNode>& pretrained);

struct NodeAccuracy {
  std::string name;
  double test_accuracy = 0.0;
  double shard_accuracy = 0.0;      // test questions inside the node's shard
  double off_shard_accuracy = 0.0;  // test questions outside it
};

std::vector<NodeAccuracy> layer1_accuracies(const Task& task, const std::vector<TransformerNode>& nodes);

/// Greedy test accuracy of each distinct graph node (shard columns are only
/// filled for layer-1 nodes).
std::vector<NodeAccuracy> node_accuracies(const Task& task, const std::vector<TransformerNode>& nodes);

Graph make_graph(const RunConfig& config, const std::vector<TransformerNode>& pretrained);

struct RunSummary {
  double graph_acc = 0.0;
  std::size_t test_count = 0;
  double p_value_vs_chance = 1.0;  // binomial upper tail at p = 1 / n_classes
  double best_single_acc = 0.0;
  std::string best_single_node;
  bool has_head = false;
  double head_acc = 0.0;
  int head_hidden = 0;
  std::size_t head_parameters = 0;
  std::size_t graph_parameters = 0;
  long steps = 0;
  long best_step = 0;
  double best_val_acc = 0.0;
  std::vector<NodeAccuracy> nodes;
};

/// Scores a trained graph on the test split against every single node and,
/// when config.run_baseline is set, a parameter-matched head on the best one.
RunSummary summarize_run(const RunConfig& config, const Task& task, const std::vector<TransformerNode>& pretrained,
                         const Graph& graph, const TrainResult& result, const LogFn& log = {});

/// Keys graph_acc, best_single_acc, head_acc, margin_vs_single, margin_vs_head
/// (margins in percentage points) plus supporting fields.
nlohmann::json summary_json(const RunSummary& summary);

/// Binomial upper tail P[X >= k] for X ~ Bin(n, p).
double binomial_upper_tail(int k, int n, double p);

}  // namespace flg
