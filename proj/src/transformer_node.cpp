#include "flg/transformer_node.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include "flg/optim.hpp"
#include "flg/rng.hpp"

namespace flg {

void NodeSpec::validate(int reserved_begin) const {
  auto fail = [&](const std::string& what) { throw ConfigError("node '" + name + "': " + what); };
  if (d_model <= 0 || n_heads <= 0 || d_ff <= 0 || vocab_size <= 0) fail("sizes must be positive");
  if (d_model % n_heads != 0) {
    fail("n_heads " + std::to_string(n_heads) + " does not divide d_model " + std::to_string(d_model));
  }
  if (n_layers < 2) fail("n_layers must be at least 2");
  if (max_seq <= static_cast<int>(framing_prefix.size())) fail("max_seq leaves no room after the framing prefix");
  for (int t : framing_prefix) {
    if (t < 0 || t >= vocab_size) fail("framing prefix token " + std::to_string(t) + " outside the vocabulary");
    if (reserved_begin >= 0 && t < reserved_begin) {
      fail("framing prefix token " + std::to_string(t) + " is not in the reserved band");
    }
  }
}

int depth_to_layer(double depth, int n_layers) {
  if (!(depth > 0.0) || depth > 1.0) throw InvalidInputError("relative depth must lie in (0, 1]");
  if (n_layers < 1) throw InvalidInputError("layer count must be positive");
  // The small tolerance keeps exact products such as 0.9 * 10 from flooring to 8.
  const int k = static_cast<int>(std::floor(depth * n_layers + 1e-9));
  return std::clamp(k, 1, n_layers);
}

// ---------------------------------------------------------------------------

struct TransformerNode::Bound {
  Var tok_emb, pos_emb, lnf_scale, lnf_shift, lm_head;
  struct B {
    Var ln1_scale, ln1_shift, wq, bq, wk, bk, wv, bv, wo, bo, ln2_scale, ln2_shift, w_up, b_up, w_down, b_down;
  };
  std::vector<B> blocks;
};

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  const Index rows = shape[0];
  const Index cols = shape.size() > 1 ? shape[1] : 1;
  return Tensor(std::move(shape), random_normal<double>(rows, cols, stddev, rng), true);
}

Tensor filled(Shape shape, double v) {
  Tensor t(std::move(shape), true);
  t.value().setConstant(v);
  return t;
}

Var bind_one(Tape& tape, const Tensor& t) {
  // Trainable parameters are bound mutably so gradients reach them.
  return tape.leaf(const_cast<Tensor&>(t));
}

}  // namespace

TransformerNode::TransformerNode(NodeSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(spec_.seed);
  const Index d = spec_.d_model, ff = spec_.d_ff, v = spec_.vocab_size;
  constexpr double kInit = 0.02;
  tok_emb_ = normal_tensor({v, d}, kInit, rng);
  pos_emb_ = normal_tensor({spec_.max_seq, d}, kInit, rng);
  blocks_.resize(static_cast<std::size_t>(spec_.n_layers));
  for (auto& b : blocks_) {
    b.ln1_scale = filled({d}, 1.0);
    b.ln1_shift = filled({d}, 0.0);
    b.wq = normal_tensor({d, d}, kInit, rng);
    b.bq = filled({d}, 0.0);
    b.wk = normal_tensor({d, d}, kInit, rng);
    b.bk = filled({d}, 0.0);
    b.wv = normal_tensor({d, d}, kInit, rng);
    b.bv = filled({d}, 0.0);
    b.wo = normal_tensor({d, d}, kInit, rng);
    b.bo = filled({d}, 0.0);
    b.ln2_scale = filled({d}, 1.0);
    b.ln2_shift = filled({d}, 0.0);
    b.w_up = normal_tensor({ff, d}, kInit, rng);
    b.b_up = filled({ff}, 0.0);
    b.w_down = normal_tensor({d, ff}, kInit, rng);
    b.b_down = filled({d}, 0.0);
  }
  lnf_scale_ = filled({d}, 1.0);
  lnf_shift_ = filled({d}, 0.0);
  lm_head_ = normal_tensor({v, d}, kInit, rng);
}

void TransformerNode::freeze() {
  for (auto& [name, t] : named_parameters()) t->set_requires_grad(false);
  frozen_ = true;
}

std::vector<std::pair<std::string, Tensor*>> TransformerNode::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("tok_emb", &tok_emb_);
  out.emplace_back("pos_emb", &pos_emb_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto& b = blocks_[i];
    const std::string p = "block" + std::to_string(i) + ".";
    out.emplace_back(p + "ln1.scale", &b.ln1_scale);
    out.emplace_back(p + "ln1.shift", &b.ln1_shift);
    out.emplace_back(p + "attn.wq", &b.wq);
    out.emplace_back(p + "attn.bq", &b.bq);
    out.emplace_back(p + "attn.wk", &b.wk);
    out.emplace_back(p + "attn.bk", &b.bk);
    out.emplace_back(p + "attn.wv", &b.wv);
    out.emplace_back(p + "attn.bv", &b.bv);
    out.emplace_back(p + "attn.wo", &b.wo);
    out.emplace_back(p + "attn.bo", &b.bo);
    out.emplace_back(p + "ln2.scale", &b.ln2_scale);
    out.emplace_back(p + "ln2.shift", &b.ln2_shift);
    out.emplace_back(p + "mlp.w_up", &b.w_up);
    out.emplace_back(p + "mlp.b_up", &b.b_up);
    out.emplace_back(p + "mlp.w_down", &b.w_down);
    out.emplace_back(p + "mlp.b_down", &b.b_down);
  }
  out.emplace_back("lnf.scale", &lnf_scale_);
  out.emplace_back("lnf.shift", &lnf_shift_);
  out.emplace_back("lm_head", &lm_head_);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> TransformerNode::named_parameters() const {
  auto mut = const_cast<TransformerNode*>(this)->named_parameters();
  return {mut.begin(), mut.end()};
}

std::size_t TransformerNode::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += static_cast<std::size_t>(t->size());
  return n;
}

std::uint64_t TransformerNode::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : named_parameters()) {
    mix(name.data(), name.size());
    mix(t->value().data(), static_cast<std::size_t>(t->size()) * sizeof(double));
  }
  return h;
}

TransformerNode::Bound TransformerNode::bind(Tape& tape) const {
  Bound b;
  b.tok_emb = bind_one(tape, tok_emb_);
  b.pos_emb = bind_one(tape, pos_emb_);
  for (const auto& blk : blocks_) {
    b.blocks.push_back({bind_one(tape, blk.ln1_scale), bind_one(tape, blk.ln1_shift), bind_one(tape, blk.wq),
                        bind_one(tape, blk.bq), bind_one(tape, blk.wk), bind_one(tape, blk.bk),
                        bind_one(tape, blk.wv), bind_one(tape, blk.bv), bind_one(tape, blk.wo),
                        bind_one(tape, blk.bo), bind_one(tape, blk.ln2_scale), bind_one(tape, blk.ln2_shift),
                        bind_one(tape, blk.w_up), bind_one(tape, blk.b_up), bind_one(tape, blk.w_down),
                        bind_one(tape, blk.b_down)});
  }
  b.lnf_scale = bind_one(tape, lnf_scale_);
  b.lnf_shift = bind_one(tape, lnf_shift_);
  b.lm_head = bind_one(tape, lm_head_);
  return b;
}

TokenSeq TransformerNode::with_prefix(std::span<const int> tokens) const {
  if (tokens.empty()) throw InvalidInputError("node '" + spec_.name + "': empty token sequence");
  TokenSeq seq(spec_.framing_prefix.begin(), spec_.framing_prefix.end());
  seq.insert(seq.end(), tokens.begin(), tokens.end());
  if (static_cast<int>(seq.size()) > spec_.max_seq) {
    throw InvalidInputError("node '" + spec_.name + "': sequence longer than max_seq");
  }
  return seq;
}

Var TransformerNode::embed(Tape&, const Bound& b, std::span<const int> tokens, Index seq_len) const {
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(static_cast<Index>(i) % seq_len);
  return add(gather_rows(b.tok_emb, tokens), gather_rows(b.pos_emb, positions));
}

Var TransformerNode::run_block(Tape&, const Bound& b, int layer, Var x, Index seq_len) const {
  const auto& p = b.blocks[static_cast<std::size_t>(layer - 1)];
  Var a = layer_norm(x, p.ln1_scale, p.ln1_shift);
  Var q = linear_rows(a, p.wq, p.bq);
  Var k = linear_rows(a, p.wk, p.bk);
  Var v = linear_rows(a, p.wv, p.bv);
  Var att = attention(q, k, v, spec_.n_heads, true, seq_len, seq_len).out;
  x = add(x, linear_rows(att, p.wo, p.bo));
  Var m = layer_norm(x, p.ln2_scale, p.ln2_shift);
  Var up = gelu(linear_rows(m, p.w_up, p.b_up));
  return add(x, linear_rows(up, p.w_down, p.b_down));
}

void TransformerNode::validate_plan(const HookPlan& plan) const {
  const int L = spec_.n_layers;
  auto in_range = [L](int k) { return k >= 1 && k <= L; };
  if (plan.extract_at && !in_range(*plan.extract_at)) throw InvalidInputError("hook plan: extract layer out of range");
  if (plan.inject_at) {
    if (!in_range(*plan.inject_at)) throw InvalidInputError("hook plan: inject layer out of range");
    if (!plan.inject_vector) throw InvalidInputError("hook plan: injection layer set without a vector");
    if (plan.extract_at && *plan.inject_at >= *plan.extract_at) {
      throw InvalidInputError("hook plan: injection must happen upstream of extraction");
    }
    const auto& s = plan.inject_vector->shape();
    if (s.size() != 1 || s[0] != spec_.d_model) {
      throw DimensionError("node '" + spec_.name + "': inject vector " + to_string(s) + " does not match d_model " +
                           std::to_string(spec_.d_model) + "; resample first");
    }
  }
  if (plan.alpha < 0.0 || plan.alpha > 1.0) throw InvalidInputError("hook plan: alpha must lie in [0, 1]");
}

Var TransformerNode::run_from(Tape& tape, const Bound& b, Var x, int layer, HookPlan& plan, Index seq_len) const {
  auto maybe_inject = [&](int k) {
    if (plan.inject_at && *plan.inject_at == k) x = inject_blend(x, *plan.inject_vector, plan.alpha, plan.positions);
  };
  maybe_inject(layer);
  for (int k = layer + 1; k <= spec_.n_layers; ++k) {
    x = run_block(tape, b, k, x, seq_len);
    maybe_inject(k);
    if (plan.extract_at && *plan.extract_at == k) return select_row(x, x.shape()[0] - 1);
  }
  Var last = select_row(x, x.shape()[0] - 1);
  Var normed = layer_norm(last, b.lnf_scale, b.lnf_shift);
  return matmul(b.lm_head, normed);
}

Var TransformerNode::forward_hooked(Tape& tape, std::span<const int> tokens, HookPlan plan) const {
  validate_plan(plan);
  const TokenSeq seq = with_prefix(tokens);
  const Bound b = bind(tape);
  Var x = embed(tape, b, seq, static_cast<Index>(seq.size()));
  return run_from(tape, b, x, 0, plan, static_cast<Index>(seq.size()));
}

Matrix TransformerNode::residual_at(std::span<const int> tokens, int layer) const {
  if (layer < 0 || layer > spec_.n_layers) throw InvalidInputError("residual_at: layer out of range");
  const TokenSeq seq = with_prefix(tokens);
  Tape tape;
  const Bound b = bind(tape);
  Var x = embed(tape, b, seq, static_cast<Index>(seq.size()));
  for (int k = 1; k <= layer; ++k) x = run_block(tape, b, k, x, static_cast<Index>(seq.size()));
  return x.value();
}

Var TransformerNode::forward_from(Tape& tape, Var residual, int layer, HookPlan plan) const {
  validate_plan(plan);
  if (layer < 0 || layer > spec_.n_layers) throw InvalidInputError("forward_from: layer out of range");
  if (plan.extract_at && *plan.extract_at <= layer) throw InvalidInputError("forward_from: extraction already passed");
  if (plan.inject_at && *plan.inject_at < layer) throw InvalidInputError("forward_from: injection already passed");
  if (residual.shape().size() != 2 || residual.shape()[1] != spec_.d_model) {
    throw DimensionError("forward_from: residual " + to_string(residual.shape()) + " does not match d_model");
  }
  const Bound b = bind(tape);
  return run_from(tape, b, residual, layer, plan, residual.shape()[0]);
}

Var TransformerNode::forward_batch(Tape& tape, std::span<const TokenSeq> seqs) const {
  if (seqs.empty()) throw InvalidInputError("forward_batch: empty batch");
  std::vector<int> flat;
  Index seq_len = -1;
  for (const auto& s : seqs) {
    const TokenSeq full = with_prefix(s);
    if (seq_len < 0) seq_len = static_cast<Index>(full.size());
    if (static_cast<Index>(full.size()) != seq_len) throw InvalidInputError("forward_batch: ragged batch");
    flat.insert(flat.end(), full.begin(), full.end());
  }
  const Bound b = bind(tape);
  Var x = embed(tape, b, flat, seq_len);
  for (int k = 1; k <= spec_.n_layers; ++k) x = run_block(tape, b, k, x, seq_len);
  Var normed = layer_norm(x, b.lnf_scale, b.lnf_shift);
  Var zero_bias = tape.constant(Vector::Zero(spec_.vocab_size));
  return linear_rows(normed, b.lm_head, zero_bias);
}

Vector TransformerNode::next_token_logits(std::span<const int> tokens) const {
  Tape tape;
  return forward_hooked(tape, tokens, HookPlan{}).vec();
}

int TransformerNode::greedy_next(std::span<const int> tokens) const {
  const Vector logits = next_token_logits(tokens);
  Index best = 0;
  logits.maxCoeff(&best);
  return static_cast<int>(best);
}

// ---------------------------------------------------------------------------

std::vector<double> pretrain_node(TransformerNode& node, std::span<const TokenSeq> corpus, const PretrainOptions& opts) {
  if (node.frozen()) throw StateError("node '" + node.spec().name + "' is frozen; pretraining needs a trainable node");
  if (opts.steps == 0) return {};
  if (corpus.empty()) throw InvalidInputError("pretraining corpus is empty");

  AdamW optimizer;
  std::vector<Tensor*> params;
  for (auto& [name, t] : node.named_parameters()) {
    optimizer.add_param(*t);
    params.push_back(t);
  }
  const int prefix = static_cast<int>(node.spec().framing_prefix.size());
  Rng rng(opts.seed);
  std::vector<double> curve;
  curve.reserve(static_cast<std::size_t>(opts.steps));

  for (int step = 0; step < opts.steps; ++step) {
    // Group the sampled sequences by length so each group runs as one batch.
    std::map<std::size_t, std::vector<TokenSeq>> inputs;
    std::map<std::size_t, std::vector<int>> targets;
    for (int i = 0; i < opts.batch_size; ++i) {
      const TokenSeq& seq = corpus[uniform_index(rng, corpus.size())];
      if (seq.size() < 2) throw InvalidInputError("pretraining sequences need at least two tokens");
      inputs[seq.size()].emplace_back(seq.begin(), seq.end() - 1);
      auto& tg = targets[seq.size()];
      // Row r of prefix + input predicts full[r + 1]; rows inside the prefix
      // and the row predicting the first content token carry no target.
      for (int r = 0; r < prefix + static_cast<int>(seq.size()) - 1; ++r) {
        tg.push_back(r < prefix ? -1 : seq[static_cast<std::size_t>(r - prefix + 1)]);
      }
    }
    for (auto* p : params) p->zero_grad();
    Tape tape;
    std::vector<Var> parts;
    double total_rows = 0.0;
    std::vector<double> weights;
    for (auto& [len, batch] : inputs) {
      Var logits = node.forward_batch(tape, batch);
      parts.push_back(sequence_cross_entropy(logits, targets[len]));
      weights.push_back(static_cast<double>(batch.size()));
      total_rows += static_cast<double>(batch.size());
    }
    Var loss = scale(parts[0], weights[0] / total_rows);
    for (std::size_t i = 1; i < parts.size(); ++i) loss = add(loss, scale(parts[i], weights[i] / total_rows));
    tape.backward(loss);
    clip_grad_norm(params, opts.clip_norm);
    const double lr = warmup_constant_lr(step, static_cast<long>(opts.warmup_steps), opts.lr);
    const double lrs[] = {lr};
    optimizer.step(lrs, opts.weight_decay);
    curve.push_back(loss.item());
  }
  return curve;
}

}  // namespace flg
