#include "flg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "flg/errors.hpp"
#include "flg/rng.hpp"

namespace flg {

Schedule parse_schedule(const std::string& name) {
  if (name == "warmup-constant") return Schedule::kWarmupConstant;
  if (name == "cosine") return Schedule::kCosine;
  throw ConfigError("unknown schedule '" + name + "' (expected cosine or warmup-constant)");
}

std::string to_string(Schedule s) { return s == Schedule::kCosine ? "cosine" : "warmup-constant"; }

void TrainConfig::validate() const {
  if (lr_proj < 0.0 || lr_out < 0.0) throw ConfigError("learning rates must be non-negative");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (batch_size <= 0 || epochs <= 0 || eval_every <= 0) throw ConfigError("batch_size, epochs and eval_every must be positive");
  if (warmup_steps < 0 || patience < 0 || min_steps < 0) throw ConfigError("warmup_steps, patience and min_steps must be non-negative");
  if (dead_node_window <= 0) throw ConfigError("dead_node_window must be positive");
}

double scheduled_lr(const TrainConfig& config, double base, long step, long total_steps) {
  if (config.schedule == Schedule::kCosine) return cosine_lr(step, total_steps, base);
  return warmup_constant_lr(step, static_cast<long>(config.warmup_steps), base);
}

// ---------------------------------------------------------------------------
// Evaluation

EvalResult evaluate(std::span<const int> answers, const std::function<Prediction(std::size_t)>& predict) {
  EvalResult r;
  r.count = answers.size();
  if (answers.empty()) return r;
  std::size_t correct = 0;
  std::size_t with_attention = 0;
  for (std::size_t i = 0; i < answers.size(); ++i) {
    const Prediction p = predict(i);
    Index best = 0;
    p.probs.maxCoeff(&best);
    correct += best == answers[i];
    r.mean_loss -= std::log(std::max(p.probs(answers[i]), std::numeric_limits<double>::min()));
    if (p.attention.size() > 0) {
      const Vector per_node = p.attention.colwise().mean();
      for (int j = 0; j < kLayer2Nodes; ++j) r.attention[static_cast<std::size_t>(j)] += per_node(j);
      ++with_attention;
    }
  }
  const auto n = static_cast<double>(answers.size());
  r.accuracy = static_cast<double>(correct) / n;
  r.mean_loss /= n;
  if (with_attention > 0) {
    for (auto& a : r.attention) a /= static_cast<double>(with_attention);
  }
  return r;
}

EvalResult evaluate(const Graph& graph, std::span<const ExampleCache> caches, std::span<const int> answers) {
  if (caches.size() != answers.size()) throw InvalidInputError("evaluate: one answer per cached example");
  return evaluate(answers, [&](std::size_t i) {
    Tape tape;
    const BoundGraph bound = bind(tape, graph);
    GraphOutput out = graph_forward(tape, graph, bound, caches[i]).output;
    return Prediction{std::move(out.probs), std::move(out.attention)};
  });
}

EvalResult evaluate(const Graph& graph, std::span<const McqExample> examples, const Vocabulary& vocab) {
  const auto answers = answers_of(examples);
  return evaluate(answers, [&](std::size_t i) {
    Tape tape;
    GraphOutput out = graph_forward(tape, graph, mcq_prompt(examples[i], vocab)).output;
    return Prediction{std::move(out.probs), std::move(out.attention)};
  });
}

std::vector<ExampleCache> build_caches(const Graph& graph, std::span<const McqExample> examples, const Vocabulary& vocab) {
  std::vector<ExampleCache> caches;
  caches.reserve(examples.size());
  for (const auto& ex : examples) caches.push_back(graph.cache(mcq_prompt(ex, vocab)));
  return caches;
}

std::vector<int> answers_of(std::span<const McqExample> examples) {
  std::vector<int> a;
  a.reserve(examples.size());
  for (const auto& ex : examples) a.push_back(ex.answer);
  return a;
}

// ---------------------------------------------------------------------------
// Train state serialization

namespace {

constexpr int kMetricColumns = 4 + kEdges + kLayer2Nodes + 2;

NamedTensor scalar_row(const std::string& name, const std::vector<double>& values) {
  Matrix m(static_cast<Index>(values.size()), 1);
  for (std::size_t i = 0; i < values.size(); ++i) m(static_cast<Index>(i), 0) = values[i];
  return {name, Shape{m.rows()}, m};
}

std::vector<NamedTensor> prefixed(std::span<const NamedTensor> src, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& t : src) out.push_back({prefix + t.name, t.shape, t.value});
  return out;
}

std::vector<NamedTensor> strip(std::span<const NamedTensor> src, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& t : src) {
    if (t.name.rfind(prefix, 0) == 0) out.push_back({t.name.substr(prefix.size()), t.shape, t.value});
  }
  return out;
}

std::string dead_node_message(int edge, int window) {
  return "edge W_" + std::to_string(edge + 1) + " received zero gradient for " + std::to_string(window) +
         " consecutive steps";
}

}  // namespace

std::vector<NamedTensor> encode_train_state(const TrainState& s) {
  std::vector<NamedTensor> out = prefixed(s.params, "param/");
  for (auto& t : prefixed(s.moments, "moment/")) out.push_back(std::move(t));
  for (auto& t : prefixed(s.best_params, "best/")) out.push_back(std::move(t));
  std::vector<double> scalars = {static_cast<double>(s.step),       static_cast<double>(s.epoch),
                                 static_cast<double>(s.batch_in_epoch), s.best_val_acc,
                                 s.best_val_loss,                   static_cast<double>(s.best_step),
                                 static_cast<double>(s.last_improvement), s.finished ? 1.0 : 0.0};
  for (int d : s.dead_streak) scalars.push_back(static_cast<double>(d));
  out.push_back(scalar_row("state/scalars", scalars));

  Matrix metrics(static_cast<Index>(s.metrics.size()), kMetricColumns);
  for (std::size_t r = 0; r < s.metrics.size(); ++r) {
    const auto& m = s.metrics[r];
    auto row = metrics.row(static_cast<Index>(r));
    row(0) = static_cast<double>(m.step);
    row(1) = m.epoch;
    row(2) = m.loss;
    row(3) = m.val_acc ? *m.val_acc : std::numeric_limits<double>::quiet_NaN();
    for (int i = 0; i < kEdges; ++i) row(4 + i) = m.gnorm[static_cast<std::size_t>(i)];
    for (int j = 0; j < kLayer2Nodes; ++j) row(4 + kEdges + j) = m.attention[static_cast<std::size_t>(j)];
    row(kMetricColumns - 2) = m.lr_proj;
    row(kMetricColumns - 1) = m.lr_out;
  }
  out.push_back({"state/metrics", Shape{metrics.rows(), metrics.cols()}, metrics});

  Matrix warnings(static_cast<Index>(s.warnings.size()), 3);
  for (std::size_t r = 0; r < s.warnings.size(); ++r) {
    warnings(static_cast<Index>(r), 0) = static_cast<double>(s.warnings[r].step);
    warnings(static_cast<Index>(r), 1) = static_cast<double>(s.warnings[r].edge);
    warnings(static_cast<Index>(r), 2) = static_cast<double>(s.warnings[r].window);
  }
  out.push_back({"state/warnings", Shape{warnings.rows(), 3}, warnings});
  return out;
}

TrainState decode_train_state(std::span<const NamedTensor> tensors) {
  TrainState s;
  s.params = strip(tensors, "param/");
  s.moments = strip(tensors, "moment/");
  s.best_params = strip(tensors, "best/");
  const Matrix& sc = find_tensor(tensors, "state/scalars").value;
  if (sc.rows() != 8 + kEdges) throw FormatError("train state scalars have the wrong length");
  s.step = static_cast<long>(sc(0, 0));
  s.epoch = static_cast<int>(sc(1, 0));
  s.batch_in_epoch = static_cast<long>(sc(2, 0));
  s.best_val_acc = sc(3, 0);
  s.best_val_loss = sc(4, 0);
  s.best_step = static_cast<long>(sc(5, 0));
  s.last_improvement = static_cast<long>(sc(6, 0));
  s.finished = sc(7, 0) != 0.0;
  for (int i = 0; i < kEdges; ++i) s.dead_streak[i] = static_cast<int>(sc(8 + i, 0));

  const Matrix& m = find_tensor(tensors, "state/metrics").value;
  if (m.rows() > 0 && m.cols() != kMetricColumns) throw FormatError("train state metrics have the wrong width");
  for (Index r = 0; r < m.rows(); ++r) {
    StepMetrics row;
    row.step = static_cast<long>(m(r, 0));
    row.epoch = static_cast<int>(m(r, 1));
    row.loss = m(r, 2);
    if (!std::isnan(m(r, 3))) row.val_acc = m(r, 3);
    for (int i = 0; i < kEdges; ++i) row.gnorm[static_cast<std::size_t>(i)] = m(r, 4 + i);
    for (int j = 0; j < kLayer2Nodes; ++j) row.attention[static_cast<std::size_t>(j)] = m(r, 4 + kEdges + j);
    row.lr_proj = m(r, kMetricColumns - 2);
    row.lr_out = m(r, kMetricColumns - 1);
    s.metrics.push_back(row);
  }
  const Matrix& w = find_tensor(tensors, "state/warnings").value;
  for (Index r = 0; r < w.rows(); ++r) {
    const int edge = static_cast<int>(w(r, 1));
    const int window = static_cast<int>(w(r, 2));
    s.warnings.push_back({static_cast<long>(w(r, 0)), edge, window, dead_node_message(edge, window)});
  }
  return s;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::vector<NamedTensor> moment_snapshot(const AdamW& opt, const std::vector<std::pair<std::string, Tensor*>>& params) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& slot = opt.slots()[i];
    const Shape& shape = params[i].second->shape();
    out.push_back({"m/" + params[i].first, shape, slot.m});
    out.push_back({"v/" + params[i].first, shape, slot.v});
  }
  return out;
}

void restore_moments(AdamW& opt, const std::vector<std::pair<std::string, Tensor*>>& params,
                     std::span<const NamedTensor> moments) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& slot = opt.slots()[i];
    slot.m = find_tensor(moments, "m/" + params[i].first).value;
    slot.v = find_tensor(moments, "v/" + params[i].first).value;
    if (slot.m.rows() != params[i].second->value().rows() || slot.m.cols() != params[i].second->value().cols()) {
      throw DimensionError("optimizer moment for '" + params[i].first + "' has the wrong shape");
    }
  }
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, Stream::kShuffle, static_cast<std::uint64_t>(epoch)));
  shuffle_in_place(order, rng);
  return order;
}

}  // namespace

TrainResult train_graph(Graph& graph, const DatasetSplit& data, const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (data.train.empty()) throw InvalidInputError("training split is empty");
  if (data.val.empty()) throw InvalidInputError("validation split is empty");

  auto params = graph.named_parameters();
  AdamW opt;
  std::vector<Tensor*> all;
  for (auto& [name, t] : params) {
    opt.add_param(*t, name.rfind("edge", 0) == 0 ? 0 : 1);
    all.push_back(t);
  }

  TrainState st;
  if (options.resume) {
    st = *options.resume;
    if (st.finished) throw StateError("cannot resume a finished run");
    restore(params, st.params);
    restore_moments(opt, params, st.moments);
    opt.set_step_count(st.step);
  }

  const auto train_caches = build_caches(graph, data.train, data.vocab);
  const auto val_caches = build_caches(graph, data.val, data.vocab);
  const auto train_answers = answers_of(data.train);
  const auto val_answers = answers_of(data.val);
  const auto n = train_caches.size();
  const auto batches_per_epoch = static_cast<long>((n + static_cast<std::size_t>(config.batch_size) - 1) /
                                                   static_cast<std::size_t>(config.batch_size));
  const long total_steps = batches_per_epoch * config.epochs;

  auto snapshot = [&](TrainState& s) {
    s.params = collect(params);
    s.moments = moment_snapshot(opt, params);
  };

  bool stop = false;
  while (!stop && st.epoch < config.epochs) {
    const auto order = epoch_order(n, config.seed, st.epoch);
    while (st.batch_in_epoch < batches_per_epoch) {
      if (options.stop_after && st.step >= *options.stop_after) {
        snapshot(st);
        return {std::move(st), {}};
      }
      const auto begin = static_cast<std::size_t>(st.batch_in_epoch * config.batch_size);
      const auto end = std::min(n, begin + static_cast<std::size_t>(config.batch_size));

      graph.zero_grad();
      StepMetrics m;
      m.step = st.step;
      m.epoch = st.epoch;
      {
        Tape tape;
        const BoundGraph bound = bind(tape, graph);
        std::vector<Var> losses;
        for (std::size_t k = begin; k < end; ++k) {
          const std::size_t idx = order[k];
          GraphPass pass = graph_forward(tape, graph, bound, train_caches[idx]);
          losses.push_back(softmax_cross_entropy(pass.logits, train_answers[idx]));
          const Vector per_node = pass.output.attention.colwise().mean();
          for (int j = 0; j < kLayer2Nodes; ++j) m.attention[static_cast<std::size_t>(j)] += per_node(j);
        }
        for (auto& a : m.attention) a /= static_cast<double>(end - begin);
        Var loss = mean(losses);
        m.loss = loss.item();
        tape.backward(loss);
      }
      for (int i = 0; i < kEdges; ++i) {
        const double g = graph.edges()[static_cast<std::size_t>(i)].weight.grad().norm();
        m.gnorm[static_cast<std::size_t>(i)] = g;
        int& streak = st.dead_streak[i];
        streak = g == 0.0 ? streak + 1 : 0;
        if (streak == config.dead_node_window) {
          st.warnings.push_back({st.step, i, config.dead_node_window, dead_node_message(i, config.dead_node_window)});
        }
      }
      clip_grad_norm(all, config.clip_norm);
      m.lr_proj = scheduled_lr(config, config.lr_proj, st.step, total_steps);
      m.lr_out = scheduled_lr(config, config.lr_out, st.step, total_steps);
      const double lrs[] = {m.lr_proj, m.lr_out};
      opt.step(lrs, config.weight_decay);

      ++st.step;
      ++st.batch_in_epoch;
      const bool last = st.step == total_steps;
      if (st.step % config.eval_every == 0 || last) {
        const EvalResult val = evaluate(graph, val_caches, val_answers);
        m.val_acc = val.accuracy;
        if (val.accuracy > st.best_val_acc || (val.accuracy == st.best_val_acc && val.mean_loss < st.best_val_loss)) {
          if (val.accuracy > st.best_val_acc) st.last_improvement = st.step;
          st.best_val_acc = val.accuracy;
          st.best_val_loss = val.mean_loss;
          st.best_step = st.step;
          st.best_params = collect(params);
        }
        if (config.patience > 0 && st.step >= config.min_steps && st.step - st.last_improvement >= config.patience) {
          stop = true;
        }
      }
      st.metrics.push_back(m);
      if (stop) break;
    }
    if (!stop) {
      ++st.epoch;
      st.batch_in_epoch = 0;
    }
  }

  st.finished = true;
  snapshot(st);
  restore(params, st.best_params);
  TrainResult result;
  result.best_val = evaluate(graph, val_caches, val_answers);
  result.state = std::move(st);
  return result;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const StepMetrics> metrics) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "step,epoch,loss,val_acc,gnorm_w1,gnorm_w2,gnorm_w3,gnorm_w4,gnorm_w5,attn_node4,attn_node5,lr_proj,lr_out\n";
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& m : metrics) {
    out << m.step << ',' << m.epoch << ',' << num(m.loss) << ',' << (m.val_acc ? num(*m.val_acc) : "");
    for (double g : m.gnorm) out << ',' << num(g);
    for (double a : m.attention) out << ',' << num(a);
    out << ',' << num(m.lr_proj) << ',' << num(m.lr_out) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Baseline head

std::size_t baseline_parameter_count(Index d_in, int n_classes, int hidden) {
  const auto d = static_cast<std::size_t>(d_in);
  const auto c = static_cast<std::size_t>(n_classes);
  if (hidden == 0) return d * c + c;
  const auto h = static_cast<std::size_t>(hidden);
  return d * h + h + h * c + c;
}

int baseline_hidden_width(Index d_in, int n_classes, std::size_t budget) {
  const std::size_t linear = baseline_parameter_count(d_in, n_classes, 0);
  if (budget < linear) {
    throw ConfigError("baseline budget " + std::to_string(budget) + " is below the linear head size " +
                      std::to_string(linear));
  }
  if (budget == linear) return 0;
  // Each hidden unit costs d_in + 1 + n_classes parameters.
  const auto per_unit = static_cast<std::size_t>(d_in) + 1 + static_cast<std::size_t>(n_classes);
  const auto fixed = static_cast<std::size_t>(n_classes);
  return static_cast<int>((budget - fixed + per_unit - 1) / per_unit);
}

namespace {

struct Head {
  Tensor w1, b1, w2, b2;
  int hidden = 0;

  std::vector<Tensor*> params() {
    if (hidden == 0) return {&w2, &b2};
    return {&w1, &b1, &w2, &b2};
  }

  Var forward(Tape& tape, const Vector& x) const {
    auto leaf = [&](const Tensor& t) { return tape.leaf(const_cast<Tensor&>(t)); };
    Var in = tape.constant(x);
    if (hidden > 0) in = gelu(affine(leaf(w1), leaf(b1), in));
    return affine(leaf(w2), leaf(b2), in);
  }
};

Head make_head(Index d_in, int n_classes, int hidden, std::uint64_t seed) {
  Rng rng(seed);
  Head h;
  h.hidden = hidden;
  const Index mid = hidden > 0 ? hidden : d_in;
  if (hidden > 0) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    h.w1 = Tensor(Shape{hidden, d_in}, random_uniform<double>(hidden, d_in, bound, rng), true);
    h.b1 = Tensor(Shape{hidden}, random_uniform<double>(hidden, 1, bound, rng), true);
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(mid));
  h.w2 = Tensor(Shape{n_classes, mid}, random_uniform<double>(n_classes, mid, bound, rng), true);
  h.b2 = Tensor(Shape{n_classes}, random_uniform<double>(n_classes, 1, bound, rng), true);
  return h;
}

std::vector<Vector> node_features(const TransformerNode& node, std::span<const McqExample> examples,
                                  const Vocabulary& vocab, int layer) {
  std::vector<Vector> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    Tape tape;
    HookPlan plan;
    plan.extract_at = layer;
    out.push_back(l2_normalize(node.forward_hooked(tape, mcq_prompt(ex, vocab), plan)).vec());
  }
  return out;
}

EvalResult evaluate_head(const Head& head, const std::vector<Vector>& features, std::span<const int> answers) {
  return evaluate(answers, [&](std::size_t i) {
    Tape tape;
    return Prediction{softmax(head.forward(tape, features[i])).vec(), Matrix()};
  });
}

}  // namespace

BaselineResult train_baseline_head(const TransformerNode& node, const DatasetSplit& data, std::size_t budget,
                                   double l_T, const TrainConfig& config, int n_classes) {
  config.validate();
  if (data.train.empty() || data.val.empty() || data.test.empty()) throw InvalidInputError("baseline needs all three splits");
  const Index d = node.spec().d_model;
  BaselineResult result;
  result.hidden = baseline_hidden_width(d, n_classes, budget);
  result.parameters = baseline_parameter_count(d, n_classes, result.hidden);

  const int layer = depth_to_layer(l_T, node.spec().n_layers);
  const auto train_x = node_features(node, data.train, data.vocab, layer);
  const auto val_x = node_features(node, data.val, data.vocab, layer);
  const auto test_x = node_features(node, data.test, data.vocab, layer);
  const auto train_y = answers_of(data.train);
  const auto val_y = answers_of(data.val);
  const auto test_y = answers_of(data.test);

  Head head = make_head(d, n_classes, result.hidden, derive_seed(config.seed, Stream::kBaseline));
  auto params = head.params();
  AdamW opt;
  for (Tensor* p : params) opt.add_param(*p);

  const auto n = train_x.size();
  const auto batches = static_cast<long>((n + static_cast<std::size_t>(config.batch_size) - 1) /
                                         static_cast<std::size_t>(config.batch_size));
  const long total_steps = batches * config.epochs;
  double best_acc = -1.0, best_loss = 0.0;
  long step = 0, last_improvement = 0;
  std::vector<Matrix> best;
  bool stop = false;
  for (int epoch = 0; epoch < config.epochs && !stop; ++epoch) {
    const auto order = epoch_order(n, derive_seed(config.seed, Stream::kBaseline), epoch);
    for (long b = 0; b < batches && !stop; ++b) {
      for (Tensor* p : params) p->zero_grad();
      {
        Tape tape;
        std::vector<Var> losses;
        const auto begin = static_cast<std::size_t>(b * config.batch_size);
        const auto end = std::min(n, begin + static_cast<std::size_t>(config.batch_size));
        for (std::size_t k = begin; k < end; ++k) {
          losses.push_back(softmax_cross_entropy(head.forward(tape, train_x[order[k]]), train_y[order[k]]));
        }
        tape.backward(mean(losses));
      }
      clip_grad_norm(params, config.clip_norm);
      const double lrs[] = {scheduled_lr(config, config.lr_proj, step, total_steps)};
      opt.step(lrs, config.weight_decay);
      ++step;
      if (step % config.eval_every == 0 || step == total_steps) {
        const EvalResult val = evaluate_head(head, val_x, val_y);
        if (val.accuracy > best_acc || (val.accuracy == best_acc && val.mean_loss < best_loss)) {
          if (val.accuracy > best_acc) last_improvement = step;
          best_acc = val.accuracy;
          best_loss = val.mean_loss;
          best.clear();
          for (Tensor* p : params) best.push_back(p->value());
        }
        if (config.patience > 0 && step >= config.min_steps && step - last_improvement >= config.patience) stop = true;
      }
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value() = best[i];
  result.val_accuracy = best_acc;
  result.test_accuracy = evaluate_head(head, test_x, test_y).accuracy;
  return result;
}

double node_greedy_accuracy(const TransformerNode& node, std::span<const McqExample> examples, const Vocabulary& vocab) {
  if (examples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ex : examples) correct += vocab.letter_index(node.greedy_next(mcq_prompt(ex, vocab))) == ex.answer;
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

}  // namespace flg
