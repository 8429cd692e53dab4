#pragma once

// End-to-end training of the graph's edges and output node, evaluation, and
// the parameter-matched single-node baseline head.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flg/checkpoint.hpp"
#include "flg/graph.hpp"
#include "flg/optim.hpp"
#include "flg/taskgen.hpp"

namespace flg {

enum class Schedule { kWarmupConstant, kCosine };

Schedule parse_schedule(const std::string& name);
std::string to_string(Schedule s);

struct TrainConfig {
  double lr_proj = 1e-3;
  double lr_out = 1e-4;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  int batch_size = 8;
  int epochs = 30;
  Schedule schedule = Schedule::kWarmupConstant;
  int warmup_steps = 50;
  std::uint64_t seed = 0;
  int eval_every = 25;
  /// Stop once validation accuracy has not improved for this many steps,
  /// but never before min_steps. Zero disables early stopping.
  int patience = 600;
  int min_steps = 1500;
  int dead_node_window = 50;

  /// Learning rates must be non-negative (zero freezes a group); everything
  /// else must be positive.
  void validate() const;
};

struct StepMetrics {
  long step = 0;
  int epoch = 0;
  double loss = 0.0;
  std::optional<double> val_acc;
  std::array<double, kEdges> gnorm{};  // Frobenius norm of each edge's weight gradient, before clipping
  std::array<double, kLayer2Nodes> attention{};
  double lr_proj = 0.0;
  double lr_out = 0.0;
};

struct TrainWarning {
  long step = 0;
  int edge = 0;
  int window = 0;
  std::string message;
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::array<double, kLayer2Nodes> attention{};
  std::size_t count = 0;
};

/// One prediction: class probabilities and, for graph predictors, per-head
/// attention over the two layer-2 nodes (may be empty).
struct Prediction {
  Vector probs;
  Matrix attention;
};

/// Accuracy (argmax vs answer, ties to the lowest index), mean -log p[answer],
/// and mean attention over all examples.
EvalResult evaluate(std::span<const int> answers, const std::function<Prediction(std::size_t)>& predict);
EvalResult evaluate(const Graph& graph, std::span<const ExampleCache> caches, std::span<const int> answers);
EvalResult evaluate(const Graph& graph, std::span<const McqExample> examples, const Vocabulary& vocab);

std::vector<ExampleCache> build_caches(const Graph& graph, std::span<const McqExample> examples, const Vocabulary& vocab);
std::vector<int> answers_of(std::span<const McqExample> examples);

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> moments;
  long step = 0;
  int epoch = 0;
  long batch_in_epoch = 0;
  double best_val_acc = -1.0;
  double best_val_loss = 0.0;
  long best_step = -1;
  long last_improvement = 0;
  int dead_streak[kEdges] = {};
  std::vector<NamedTensor> best_params;
  std::vector<StepMetrics> metrics;
  std::vector<TrainWarning> warnings;
  bool finished = false;
};

std::vector<NamedTensor> encode_train_state(const TrainState& state);
TrainState decode_train_state(std::span<const NamedTensor> tensors);

struct TrainOptions {
  std::optional<TrainState> resume;
  /// Stop (unfinished) after this many total steps; used to produce resumable states.
  std::optional<long> stop_after;
};

struct TrainResult {
  TrainState state;  // final state; state.best_params is the best checkpoint
  EvalResult best_val;
};

/// Trains the graph's trainable tensors on the train split with validation
/// on the val split. Unless stopped early through `options.stop_after`, the
/// graph is left holding the best checkpoint.
TrainResult train_graph(Graph& graph, const DatasetSplit& data, const TrainConfig& config, const TrainOptions& options = {});

/// Column order: step, epoch, loss, val_acc, gnorm_w1..gnorm_w5, attn_node4,
/// attn_node5, lr_proj, lr_out.
void write_metrics_csv(const std::filesystem::path& path, std::span<const StepMetrics> metrics);

/// Lr for one group at a given step under the configured schedule.
double scheduled_lr(const TrainConfig& config, double base, long step, long total_steps);

// ---------------------------------------------------------------------------
// Parameter-matched baseline head

/// Hidden width for an input of `d_in` features and `n_classes` outputs: 0
/// (a linear head) when the budget equals the linear head size, otherwise
/// the smallest width whose count reaches the budget.
int baseline_hidden_width(Index d_in, int n_classes, std::size_t budget);
std::size_t baseline_parameter_count(Index d_in, int n_classes, int hidden);

struct BaselineResult {
  int hidden = 0;
  std::size_t parameters = 0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
};

/// Trains a head on `node`'s L2-normalized final-token state at depth l_T.
BaselineResult train_baseline_head(const TransformerNode& node, const DatasetSplit& data, std::size_t budget, double l_T, const TrainConfig& config, int n_classes = 4);

/// Greedy next-token accuracy of a frozen node on MCQ prompts.
double node_greedy_accuracy(const TransformerNode& node, std::span<const McqExample> examples, const Vocabulary& vocab);

}  // namespace flg
