#pragma once

// Two-layer graph of frozen nodes: three layer-1 nodes feed a shared latent,
// which is injected into two layer-2 nodes whose states an output node pools
// with a learned query.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flg/autodiff.hpp"
#include "flg/transformer_node.hpp"

namespace flg {

inline constexpr int kLayer1Nodes = 3;
inline constexpr int kLayer2Nodes = 2;
inline constexpr int kEdges = kLayer1Nodes + kLayer2Nodes;

struct GraphConfig {
  std::vector<NodeSpec> layer1;
  std::vector<NodeSpec> layer2;
  int d_s = 16;
  double alpha = 0.25;
  double l_T = 0.90;
  double l_S = 0.75;
  InjectPositions inject_positions = InjectPositions::kAll;
  int output_heads = 4;
  int n_classes = 4;
  std::uint64_t seed = 0;
  /// Initialize W_5 exactly like W_4. Only meaningful when both layer-2 nodes
  /// share a width; used for the symmetric routing control.
  bool mirror_layer2_edges = false;

  void validate() const;
};

/// Affine map from a node's hidden width into the shared latent space.
struct ProjectionEdge {
  Tensor weight;  // [d_s, d_u]
  Tensor bias;    // [d_s]
  int source = -1;

  Index d_in() const { return weight.shape()[1]; }
};

struct OutputNode {
  Tensor query;  // [d_s]
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln_scale, ln_shift;
  Tensor w_cls;  // [n_classes, d_s]
  Tensor b_cls;
};

/// Values produced by one forward pass, detached from the tape.
struct GraphOutput {
  Vector probs;
  Matrix attention;  // [heads, 2], row h = head h's weights on (node 4, node 5)
  Vector z1;
};

/// Frozen per-example quantities that never depend on trainable parameters:
/// the normalized layer-1 states and each layer-2 residual stream at its
/// injection layer.
struct ExampleCache {
  std::array<Matrix, kLayer1Nodes> h;
  std::array<Matrix, kLayer2Nodes> residual;
};

class Graph {
 public:
  /// Takes ownership of five frozen nodes, ordered layer-1 then layer-2, whose
  /// specs must match the config. Edge and output parameters are initialized
  /// from config.seed.
  Graph(GraphConfig config, std::vector<TransformerNode> nodes);

  const GraphConfig& config() const { return config_; }
  const TransformerNode& node(int i) const { return nodes_.at(static_cast<std::size_t>(i)); }
  int extract_layer(int node) const;
  int inject_layer(int layer2_index) const;

  std::array<ProjectionEdge, kEdges>& edges() { return edges_; }
  const std::array<ProjectionEdge, kEdges>& edges() const { return edges_; }
  OutputNode& output() { return output_; }
  const OutputNode& output() const { return output_; }

  /// Trainable tensors under stable names ("edge1.weight", "output.query", ...).
  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;
  std::size_t trainable_parameter_count() const;
  void zero_grad();

  ExampleCache cache(std::span<const int> tokens) const;

 private:
  GraphConfig config_;
  std::vector<TransformerNode> nodes_;
  std::array<ProjectionEdge, kEdges> edges_;
  OutputNode output_;
};

struct BoundEdge {
  Var weight, bias;
};

struct BoundOutput {
  Var query;
  MhaWeights mha;
  Var ln_scale, ln_shift, w_cls, b_cls;
};

/// Tape leaves for every trainable graph tensor. Backward through anything
/// built from them accumulates into the graph's gradients.
struct BoundGraph {
  std::array<BoundEdge, kEdges> edges;
  BoundOutput output;
};
BoundGraph bind(Tape& tape, const Graph& graph);

/// Final-token states of the layer-1 nodes at their extraction layers,
/// L2-normalized.
std::array<Var, kLayer1Nodes> encode_layer1(Tape& tape, const Graph& graph, std::span<const int> tokens);

/// z_1 = mean_i (W_i h_i + b_i).
Var aggregate_shared(std::span<const BoundEdge> edges, std::span<const Var> h);

/// Resamples z_1 to each layer-2 width, injects it, and returns the
/// final-token states at the extraction layers.
std::array<Var, kLayer2Nodes> inject_layer2(Tape& tape, const Graph& graph, Var z1, std::span<const int> tokens);

std::array<Var, kLayer2Nodes> project_layer2(const BoundEdge& w4, const BoundEdge& w5, Var h4, Var h5);

struct OutputPass {
  Var logits;
  Var probs;
  Matrix attention;
};
OutputPass output_forward(const BoundOutput& out, int n_heads, Var z4, Var z5);

struct GraphPass {
  Var logits;
  Var z1;
  GraphOutput output;
};

/// Full forward pass from tokens.
GraphPass graph_forward(Tape& tape, const Graph& graph, std::span<const int> tokens);
/// Same computation starting from a precomputed cache.
GraphPass graph_forward(Tape& tape, const Graph& graph, const BoundGraph& bound, const ExampleCache& cache);

/// Writes one row per example: an index column followed by the d_s entries of z_1.
void export_z1_csv(const std::filesystem::path& path, std::span<const Vector> z1);

}  // namespace flg
