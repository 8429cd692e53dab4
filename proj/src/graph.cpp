#include "flg/graph.hpp"

#include <cmath>
#include <fstream>

#include "flg/errors.hpp"
#include "flg/rng.hpp"

namespace flg {

void GraphConfig::validate() const {
  if (layer1.size() != kLayer1Nodes) throw ConfigError("graph needs exactly 3 layer-1 nodes");
  if (layer2.size() != kLayer2Nodes) throw ConfigError("graph needs exactly 2 layer-2 nodes");
  if (d_s <= 0) throw ConfigError("d_s must be positive");
  for (const auto* group : {&layer1, &layer2}) {
    for (const auto& spec : *group) {
      if (spec.d_model == d_s) {
        throw ConfigError("d_s " + std::to_string(d_s) + " equals the width of node '" + spec.name +
                          "'; the shared space must differ from every node width");
      }
    }
  }
  if (!(l_S > 0.0 && l_S < l_T && l_T <= 1.0)) throw ConfigError("depths must satisfy 0 < l_S < l_T <= 1");
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
  if (output_heads <= 0 || d_s % output_heads != 0) throw ConfigError("output_heads must divide d_s");
  if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
  if (mirror_layer2_edges && layer2[0].d_model != layer2[1].d_model) {
    throw ConfigError("mirrored layer-2 edges need equal layer-2 widths");
  }
  for (const auto& spec : layer2) {
    if (depth_to_layer(l_S, spec.n_layers) >= depth_to_layer(l_T, spec.n_layers)) {
      throw ConfigError("node '" + spec.name + "' has too few layers to inject at l_S strictly before extracting at l_T");
    }
  }
}

namespace {

Tensor trainable(Shape shape, Matrix value) { return Tensor(std::move(shape), std::move(value), true); }

Tensor zeros(Index n) { return Tensor(Shape{n}, true); }

ProjectionEdge make_edge(int source, Index d_s, Index d_in, std::uint64_t seed) {
  Rng rng(seed);
  ProjectionEdge e;
  e.weight = trainable({d_s, d_in}, random_normal<double>(d_s, d_in, 0.01, rng));
  e.bias = zeros(d_s);
  e.source = source;
  return e;
}

OutputNode make_output(Index d_s, Index n_classes, std::uint64_t seed) {
  Rng rng(seed);
  // Square projections use the Xavier-uniform bound sqrt(6 / (2 d_s)); the
  // classifier uses the fan-in bound 1/sqrt(d_s).
  const double xavier = std::sqrt(3.0 / static_cast<double>(d_s));
  const double fan_in = 1.0 / std::sqrt(static_cast<double>(d_s));
  OutputNode o;
  o.query = trainable({d_s}, random_normal<double>(d_s, 1, 1.0, rng));
  o.wq = trainable({d_s, d_s}, random_uniform<double>(d_s, d_s, xavier, rng));
  o.wk = trainable({d_s, d_s}, random_uniform<double>(d_s, d_s, xavier, rng));
  o.wv = trainable({d_s, d_s}, random_uniform<double>(d_s, d_s, xavier, rng));
  o.wo = trainable({d_s, d_s}, random_uniform<double>(d_s, d_s, xavier, rng));
  o.bq = zeros(d_s);
  o.bk = zeros(d_s);
  o.bv = zeros(d_s);
  o.bo = zeros(d_s);
  o.ln_scale = trainable({d_s}, Matrix::Ones(d_s, 1));
  o.ln_shift = zeros(d_s);
  o.w_cls = trainable({n_classes, d_s}, random_uniform<double>(n_classes, d_s, fan_in, rng));
  o.b_cls = trainable({n_classes}, random_uniform<double>(n_classes, 1, fan_in, rng));
  return o;
}

Var bind_param(Tape& tape, const Tensor& t) { return tape.leaf(const_cast<Tensor&>(t)); }

}  // namespace

Graph::Graph(GraphConfig config, std::vector<TransformerNode> nodes)
    : config_(std::move(config)), nodes_(std::move(nodes)) {
  config_.validate();
  if (nodes_.size() != kEdges) throw ConfigError("graph needs exactly five nodes");
  for (int i = 0; i < kEdges; ++i) {
    const auto& node = nodes_[static_cast<std::size_t>(i)];
    const auto& expected = i < kLayer1Nodes ? config_.layer1[static_cast<std::size_t>(i)]
                                            : config_.layer2[static_cast<std::size_t>(i - kLayer1Nodes)];
    if (!node.frozen()) throw StateError("node '" + node.spec().name + "' must be frozen before joining a graph");
    if (node.spec().name != expected.name || node.spec().d_model != expected.d_model ||
        node.spec().n_layers != expected.n_layers) {
      throw ConfigError("node " + std::to_string(i) + " ('" + node.spec().name + "') does not match its config spec");
    }
  }
  const Index d_s = config_.d_s;
  for (int i = 0; i < kEdges; ++i) {
    int seed_index = i;
    if (config_.mirror_layer2_edges && i == kEdges - 1) seed_index = kEdges - 2;
    edges_[static_cast<std::size_t>(i)] =
        make_edge(i, d_s, node(i).spec().d_model,
                  derive_seed(config_.seed, Stream::kEdgeInit, static_cast<std::uint64_t>(seed_index)));
  }
  output_ = make_output(d_s, config_.n_classes, derive_seed(config_.seed, Stream::kOutputInit));
}

int Graph::extract_layer(int i) const { return depth_to_layer(config_.l_T, node(i).spec().n_layers); }

int Graph::inject_layer(int j) const { return depth_to_layer(config_.l_S, node(kLayer1Nodes + j).spec().n_layers); }

std::vector<std::pair<std::string, Tensor*>> Graph::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (int i = 0; i < kEdges; ++i) {
    auto& e = edges_[static_cast<std::size_t>(i)];
    const std::string p = "edge" + std::to_string(i + 1) + ".";
    out.emplace_back(p + "weight", &e.weight);
    out.emplace_back(p + "bias", &e.bias);
  }
  auto& o = output_;
  for (auto& [name, t] : std::initializer_list<std::pair<const char*, Tensor*>>{
           {"query", &o.query}, {"mha.wq", &o.wq}, {"mha.bq", &o.bq}, {"mha.wk", &o.wk},
           {"mha.bk", &o.bk},   {"mha.wv", &o.wv}, {"mha.bv", &o.bv}, {"mha.wo", &o.wo},
           {"mha.bo", &o.bo},   {"ln.scale", &o.ln_scale}, {"ln.shift", &o.ln_shift},
           {"cls.weight", &o.w_cls}, {"cls.bias", &o.b_cls}}) {
    out.emplace_back(std::string("output.") + name, t);
  }
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Graph::named_parameters() const {
  auto mut = const_cast<Graph*>(this)->named_parameters();
  return {mut.begin(), mut.end()};
}

std::size_t Graph::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += static_cast<std::size_t>(t->size());
  return n;
}

void Graph::zero_grad() {
  for (auto& [name, t] : named_parameters()) t->zero_grad();
}

ExampleCache Graph::cache(std::span<const int> tokens) const {
  ExampleCache c;
  Tape tape;
  const auto h = encode_layer1(tape, *this, tokens);
  for (int i = 0; i < kLayer1Nodes; ++i) c.h[static_cast<std::size_t>(i)] = h[static_cast<std::size_t>(i)].value();
  for (int j = 0; j < kLayer2Nodes; ++j) {
    c.residual[static_cast<std::size_t>(j)] = node(kLayer1Nodes + j).residual_at(tokens, inject_layer(j));
  }
  return c;
}

BoundGraph bind(Tape& tape, const Graph& graph) {
  BoundGraph b;
  for (int i = 0; i < kEdges; ++i) {
    const auto& e = graph.edges()[static_cast<std::size_t>(i)];
    b.edges[static_cast<std::size_t>(i)] = {bind_param(tape, e.weight), bind_param(tape, e.bias)};
  }
  const auto& o = graph.output();
  b.output.query = bind_param(tape, o.query);
  b.output.mha = {bind_param(tape, o.wq), bind_param(tape, o.bq), bind_param(tape, o.wk), bind_param(tape, o.bk),
                  bind_param(tape, o.wv), bind_param(tape, o.bv), bind_param(tape, o.wo), bind_param(tape, o.bo)};
  b.output.ln_scale = bind_param(tape, o.ln_scale);
  b.output.ln_shift = bind_param(tape, o.ln_shift);
  b.output.w_cls = bind_param(tape, o.w_cls);
  b.output.b_cls = bind_param(tape, o.b_cls);
  return b;
}

std::array<Var, kLayer1Nodes> encode_layer1(Tape& tape, const Graph& graph, std::span<const int> tokens) {
  std::array<Var, kLayer1Nodes> h;
  for (int i = 0; i < kLayer1Nodes; ++i) {
    HookPlan plan;
    plan.extract_at = graph.extract_layer(i);
    h[static_cast<std::size_t>(i)] = l2_normalize(graph.node(i).forward_hooked(tape, tokens, plan));
  }
  return h;
}

Var aggregate_shared(std::span<const BoundEdge> edges, std::span<const Var> h) {
  if (edges.size() != h.size() || edges.empty()) throw DimensionError("aggregate_shared: one edge per layer-1 state");
  std::vector<Var> projected;
  projected.reserve(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    const Index d_in = edges[i].weight.shape()[1];
    if (h[i].shape().size() != 1 || h[i].shape()[0] != d_in) {
      throw DimensionError("aggregate_shared: state " + std::to_string(i) + " has shape " + to_string(h[i].shape()) +
                           " but its edge expects " + std::to_string(d_in));
    }
    projected.push_back(affine(edges[i].weight, edges[i].bias, h[i]));
  }
  return mean(projected);
}

namespace {

HookPlan layer2_plan(const Graph& graph, int j, Var z1) {
  const auto& spec = graph.node(kLayer1Nodes + j).spec();
  HookPlan plan;
  plan.inject_at = graph.inject_layer(j);
  plan.extract_at = graph.extract_layer(kLayer1Nodes + j);
  plan.inject_vector = resample_linear(z1, spec.d_model);
  plan.alpha = graph.config().alpha;
  plan.positions = graph.config().inject_positions;
  return plan;
}

}  // namespace

std::array<Var, kLayer2Nodes> inject_layer2(Tape& tape, const Graph& graph, Var z1, std::span<const int> tokens) {
  std::array<Var, kLayer2Nodes> out;
  for (int j = 0; j < kLayer2Nodes; ++j) {
    out[static_cast<std::size_t>(j)] =
        graph.node(kLayer1Nodes + j).forward_hooked(tape, tokens, layer2_plan(graph, j, z1));
  }
  return out;
}

std::array<Var, kLayer2Nodes> project_layer2(const BoundEdge& w4, const BoundEdge& w5, Var h4, Var h5) {
  return {affine(w4.weight, w4.bias, h4), affine(w5.weight, w5.bias, h5)};
}

OutputPass output_forward(const BoundOutput& out, int n_heads, Var z4, Var z5) {
  const Var kv[] = {z4, z5};
  MhaResult mha = multi_head_attention(out.query, kv, kv, out.mha, n_heads);
  Var o = layer_norm(mha.out, out.ln_scale, out.ln_shift);
  OutputPass pass;
  pass.logits = affine(out.w_cls, out.b_cls, o);
  pass.probs = softmax(pass.logits);
  pass.attention.resize(n_heads, kLayer2Nodes);
  for (int h = 0; h < n_heads; ++h) pass.attention.row(h) = mha.weights[static_cast<std::size_t>(h)].row(0);
  return pass;
}

namespace {

GraphPass finish(const Graph& graph, const BoundGraph& bound, Var z1, std::array<Var, kLayer2Nodes> h2) {
  const auto z2 = project_layer2(bound.edges[3], bound.edges[4], h2[0], h2[1]);
  OutputPass out = output_forward(bound.output, graph.config().output_heads, z2[0], z2[1]);
  GraphPass pass;
  pass.logits = out.logits;
  pass.z1 = z1;
  pass.output.probs = out.probs.vec();
  pass.output.attention = std::move(out.attention);
  pass.output.z1 = z1.vec();
  return pass;
}

}  // namespace

GraphPass graph_forward(Tape& tape, const Graph& graph, std::span<const int> tokens) {
  const BoundGraph bound = bind(tape, graph);
  const auto h = encode_layer1(tape, graph, tokens);
  Var z1 = aggregate_shared(std::span<const BoundEdge>(bound.edges.data(), kLayer1Nodes), h);
  return finish(graph, bound, z1, inject_layer2(tape, graph, z1, tokens));
}

GraphPass graph_forward(Tape& tape, const Graph& graph, const BoundGraph& bound, const ExampleCache& cache) {
  std::array<Var, kLayer1Nodes> h;
  for (int i = 0; i < kLayer1Nodes; ++i) {
    const Matrix& v = cache.h[static_cast<std::size_t>(i)];
    h[static_cast<std::size_t>(i)] = tape.constant(v, Shape{v.rows()});
  }
  Var z1 = aggregate_shared(std::span<const BoundEdge>(bound.edges.data(), kLayer1Nodes), h);
  std::array<Var, kLayer2Nodes> h2;
  for (int j = 0; j < kLayer2Nodes; ++j) {
    const Matrix& r = cache.residual[static_cast<std::size_t>(j)];
    Var residual = tape.constant(r, Shape{r.rows(), r.cols()});
    h2[static_cast<std::size_t>(j)] =
        graph.node(kLayer1Nodes + j).forward_from(tape, residual, graph.inject_layer(j), layer2_plan(graph, j, z1));
  }
  return finish(graph, bound, z1, h2);
}

void export_z1_csv(const std::filesystem::path& path, std::span<const Vector> z1) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  if (!z1.empty()) {
    out << "example";
    for (Index k = 0; k < z1.front().size(); ++k) out << ",z" << k;
    out << '\n';
  }
  for (std::size_t i = 0; i < z1.size(); ++i) {
    out << i;
    for (Index k = 0; k < z1[i].size(); ++k) out << ',' << z1[i](k);
    out << '\n';
  }
}

}  // namespace flg
