#pragma once

// Tiny pre-norm decoder-only transformer used as a frozen graph node, with
// hook points for residual-stream extraction and injection.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flg/autodiff.hpp"
#include "flg/taskgen.hpp"

namespace flg {

struct NodeSpec {
  std::string name;
  int vocab_size = 64;
  int d_model = 32;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq = 16;
  std::uint64_t seed = 0;
  std::vector<int> framing_prefix;

  /// Throws ConfigError on a structural violation. Prefix tokens must lie in
  /// [reserved_begin, vocab_size) when reserved_begin >= 0.
  void validate(int reserved_begin = -1) const;
};

/// Relative depth in (0, 1] to a 1-based block index: floor(depth * L) clamped
/// to [1, L]. Layer k names the residual stream after block k.
int depth_to_layer(double depth, int n_layers);

/// One-shot instructions for a single forward pass. Passed by value and
/// consumed by the call, so nothing survives into later passes.
struct HookPlan {
  std::optional<int> extract_at;
  std::optional<int> inject_at;
  std::optional<Var> inject_vector;  // d_model wide, already resampled
  double alpha = 0.25;
  InjectPositions positions = InjectPositions::kAll;
};

class TransformerNode {
 public:
  struct Block {
    Tensor ln1_scale, ln1_shift;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_scale, ln2_shift;
    Tensor w_up, b_up, w_down, b_down;
  };

  /// Deterministic init from spec.seed: N(0, 0.02^2) weights, zero biases,
  /// unit norm scales. Parameters start trainable.
  explicit TransformerNode(NodeSpec spec);

  const NodeSpec& spec() const { return spec_; }
  bool frozen() const { return frozen_; }
  void freeze();

  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;
  std::size_t parameter_count() const;
  /// FNV-1a over parameter names and raw bytes.
  std::uint64_t checksum() const;

  /// Prepends the framing prefix, runs the blocks with `plan` applied, and
  /// returns either the final-token residual at plan.extract_at, or the
  /// final-position logits when no extraction is requested.
  Var forward_hooked(Tape& tape, std::span<const int> tokens, HookPlan plan) const;

  /// Residual stream [positions, d_model] after block `layer` (0 = embeddings)
  /// for prefix + tokens, computed without gradient.
  Matrix residual_at(std::span<const int> tokens, int layer) const;

  /// Continues a forward pass from a residual stream taken after block
  /// `layer`. Injection at `layer` itself applies to `residual` first.
  Var forward_from(Tape& tape, Var residual, int layer, HookPlan plan) const;

  /// Logits for every position of equal-length sequences (prefix is added),
  /// stacked as [batch * positions, vocab].
  Var forward_batch(Tape& tape, std::span<const TokenSeq> seqs) const;

  /// Next-token logits after prefix + tokens.
  Vector next_token_logits(std::span<const int> tokens) const;
  int greedy_next(std::span<const int> tokens) const;

 private:
  struct Bound;
  Bound bind(Tape& tape) const;
  Var embed(Tape& tape, const Bound& b, std::span<const int> tokens, Index seq_len) const;
  Var run_block(Tape& tape, const Bound& b, int layer, Var x, Index seq_len) const;
  Var run_from(Tape& tape, const Bound& b, Var x, int layer, HookPlan& plan, Index seq_len) const;
  TokenSeq with_prefix(std::span<const int> tokens) const;
  void validate_plan(const HookPlan& plan) const;

  NodeSpec spec_;
  bool frozen_ = false;
  Tensor tok_emb_, pos_emb_;
  std::vector<Block> blocks_;
  Tensor lnf_scale_, lnf_shift_;
  Tensor lm_head_;
};

struct PretrainOptions {
  int steps = 1000;
  double lr = 3e-3;
  int batch_size = 32;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  int warmup_steps = 50;
  std::uint64_t seed = 0;
};

/// Next-token cross-entropy training on the corpus (the node's framing prefix
/// is prepended to every sequence). Returns the per-step loss curve.
std::vector<double> pretrain_node(TransformerNode& node, std::span<const TokenSeq> corpus, const PretrainOptions& opts);

}  // namespace flg
