#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "flg/errors.hpp"
#include "flg/graph.hpp"
#include "graph_gradcheck.hpp"

using namespace flg;
using namespace flg::testing;

namespace {

const std::vector<int> kTokens = {3, 9, 24, 14, 17, 12, 20, 25};

BoundEdge edge(Tape& tape, const Matrix& w, const Vector& b) {
  return {tape.constant(w, Shape{w.rows(), w.cols()}), tape.constant(b)};
}

}  // namespace

TEST_CASE("graph config validation") {
  auto c = tiny_graph_config();
  CHECK_NOTHROW(c.validate());
  c.d_s = 12;  // width of node "a"
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_graph_config();
  c.l_S = 0.95;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_graph_config();
  c.output_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_graph_config();
  c.layer2[0].n_layers = 4;  // 0.75 and 0.90 both land on block 3
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_graph_config();
  c.layer1.pop_back();
  CHECK_THROWS_AS(c.validate(), ConfigError);

  std::vector<TransformerNode> unfrozen;
  const auto good = tiny_graph_config();
  for (const auto* g : {&good.layer1, &good.layer2}) {
    for (const auto& s : *g) unfrozen.emplace_back(s);
  }
  CHECK_THROWS_AS(Graph(good, std::move(unfrozen)), StateError);
}

TEST_CASE("encode_layer1 yields unit, deterministic, order-respecting states") {
  const Graph g = tiny_graph();
  Tape tape;
  const auto h = encode_layer1(tape, g, kTokens);
  const auto again = encode_layer1(tape, g, kTokens);
  for (int i = 0; i < 3; ++i) {
    CHECK(h[i].value().norm() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(h[i].value() == again[i].value());
    CHECK(h[i].shape()[0] == g.node(i).spec().d_model);
  }

  auto cfg = tiny_graph_config();
  std::swap(cfg.layer1[0], cfg.layer1[2]);
  const Graph swapped = build_graph(cfg);
  const auto hs = encode_layer1(tape, swapped, kTokens);
  CHECK(hs[0].value() == h[2].value());
  CHECK(hs[1].value() == h[1].value());
  CHECK(hs[2].value() == h[0].value());
}

TEST_CASE("aggregate_shared arithmetic") {
  Tape tape;
  SUBCASE("identity edges on a repeated state") {
    Vector v(3);
    v << 0.2, -0.5, 0.7;
    const BoundEdge e[] = {edge(tape, Matrix::Identity(3, 3), Vector::Zero(3)),
                           edge(tape, Matrix::Identity(3, 3), Vector::Zero(3)),
                           edge(tape, Matrix::Identity(3, 3), Vector::Zero(3))};
    const Var h[] = {tape.constant(v), tape.constant(v), tape.constant(v)};
    CHECK((aggregate_shared(e, h).vec() - v).norm() < 1e-15);
  }
  SUBCASE("single scaled edge") {
    Matrix w(2, 3);
    w << 1, 2, 3, 4, 5, 6;
    Vector hk(3);
    hk << 1, -1, 2;
    const BoundEdge e[] = {edge(tape, Matrix::Zero(2, 3), Vector::Zero(2)), edge(tape, 3.0 * w, Vector::Zero(2)),
                           edge(tape, Matrix::Zero(2, 3), Vector::Zero(2))};
    const Var h[] = {tape.constant(Vector::Ones(3)), tape.constant(hk), tape.constant(Vector::Ones(3))};
    CHECK((aggregate_shared(e, h).vec() - w * hk).norm() < 1e-14);
  }
  SUBCASE("hand-evaluated two-dimensional case") {
    const BoundEdge e[] = {edge(tape, Matrix::Identity(2, 2), Vector::Zero(2)),
                           edge(tape, Matrix::Identity(2, 2), Vector::Zero(2)),
                           edge(tape, Matrix::Identity(2, 2), Vector::Zero(2))};
    const double r = 1.0 / std::sqrt(2.0);
    const Var h[] = {tape.constant(Vector::Unit(2, 0)), tape.constant(Vector::Unit(2, 1)),
                     tape.constant(Vector::Constant(2, r))};
    const Vector z = aggregate_shared(e, h).vec();
    CHECK(z(0) == doctest::Approx((1.0 + r) / 3.0).epsilon(1e-15));
    CHECK(z(1) == doctest::Approx((1.0 + r) / 3.0).epsilon(1e-15));
  }
  SUBCASE("dimension mismatch") {
    const BoundEdge e[] = {edge(tape, Matrix::Identity(2, 2), Vector::Zero(2)),
                           edge(tape, Matrix::Identity(2, 2), Vector::Zero(2)),
                           edge(tape, Matrix::Identity(2, 3), Vector::Zero(2))};
    const Var h[] = {tape.constant(Vector::Ones(2)), tape.constant(Vector::Ones(2)), tape.constant(Vector::Ones(2))};
    CHECK_THROWS_AS(aggregate_shared(e, h), DimensionError);
  }
}

TEST_CASE("inject_layer2 at alpha zero matches the plain extraction") {
  auto cfg = tiny_graph_config();
  cfg.alpha = 0.0;
  const Graph g = build_graph(cfg);
  Tape tape;
  Rng rng(1);
  Var z1 = tape.constant(random_normal<double>(8, 1, 1.0, rng).col(0).eval());
  const auto h2 = inject_layer2(tape, g, z1, kTokens);
  for (int j = 0; j < 2; ++j) {
    HookPlan plain;
    plain.extract_at = g.extract_layer(3 + j);
    CHECK(h2[j].value() == g.node(3 + j).forward_hooked(tape, kTokens, plain).value());
  }
}

TEST_CASE("gradient reaches W_1 through resampling, injection, and a frozen node") {
  Graph g = tiny_graph();
  const auto probe = [&](double eps) {
    g.edges()[0].weight.value()(2, 5) += eps;
    Tape tape;
    const double loss = softmax_cross_entropy(graph_forward(tape, g, kTokens).logits, 1).item();
    g.edges()[0].weight.value()(2, 5) -= eps;
    return loss;
  };
  g.zero_grad();
  Tape tape;
  tape.backward(softmax_cross_entropy(graph_forward(tape, g, kTokens).logits, 1));
  const double analytic = g.edges()[0].weight.grad()(2, 5);
  const double numeric = (probe(1e-5) - probe(-1e-5)) / 2e-5;
  CHECK(analytic != 0.0);
  CHECK(std::abs(analytic - numeric) / std::abs(numeric) < 1e-4);
}

TEST_CASE("project_layer2 and output_forward contracts") {
  const Graph g = tiny_graph();
  Tape tape;
  const BoundGraph b = bind(tape, g);
  Rng rng(2);
  Var h4 = tape.constant(random_normal<double>(8, 1, 1.0, rng).col(0).eval());
  Var h5 = tape.constant(random_normal<double>(8, 1, 1.0, rng).col(0).eval());

  const auto zero = project_layer2(edge(tape, Matrix::Zero(8, 8), Vector::Zero(8)),
                                   edge(tape, Matrix::Zero(8, 8), Vector::Zero(8)), h4, h5);
  CHECK(zero[0].value().isZero(0.0));
  CHECK(zero[1].value().isZero(0.0));
  const auto same = project_layer2(edge(tape, Matrix::Identity(8, 8), Vector::Zero(8)),
                                   edge(tape, Matrix::Identity(8, 8), Vector::Zero(8)), h4, h5);
  CHECK(same[0].value() == h4.value());
  CHECK(same[1].value() == h5.value());

  const OutputPass sym = output_forward(b.output, 4, h4, h4);
  for (int h = 0; h < 4; ++h) {
    CHECK(sym.attention(h, 0) == 0.5);
    CHECK(sym.attention(h, 1) == 0.5);
  }
  const OutputPass out = output_forward(b.output, 4, h4, h5);
  CHECK(out.probs.shape()[0] == 4);
  CHECK(out.probs.vec().sum() == doctest::Approx(1.0).epsilon(1e-12));
  for (int h = 0; h < 4; ++h) CHECK(out.attention.row(h).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("graph_forward is pure and only trainable tensors receive gradient") {
  Graph g = tiny_graph();
  const std::vector<int> other = {1, 2, 24, 12, 13, 14, 15, 25};
  Tape t1;
  const GraphOutput first = graph_forward(t1, g, kTokens).output;
  Tape t2;
  (void)graph_forward(t2, g, other);
  Tape t3;
  const GraphOutput again = graph_forward(t3, g, kTokens).output;
  CHECK(first.probs == again.probs);
  CHECK(first.attention == again.attention);
  CHECK(first.probs.sum() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(first.z1.size() == 8);

  std::uint64_t sums[5];
  for (int i = 0; i < 5; ++i) sums[i] = g.node(i).checksum();
  g.zero_grad();
  Tape tape;
  tape.backward(softmax_cross_entropy(graph_forward(tape, g, kTokens).logits, 2));
  for (auto& [name, t] : g.named_parameters()) {
    INFO("tensor: ", name);
    CHECK(t->has_grad());
  }
  for (int i = 0; i < 5; ++i) {
    CHECK(g.edges()[static_cast<std::size_t>(i)].weight.grad().norm() > 0.0);
    CHECK(g.node(i).checksum() == sums[i]);
    for (const auto& [name, t] : g.node(i).named_parameters()) CHECK_FALSE(t->has_grad());
  }
}

TEST_CASE("the cached path reproduces the token path bitwise") {
  for (auto mode : {InjectPositions::kAll, InjectPositions::kLast}) {
    auto cfg = tiny_graph_config();
    cfg.inject_positions = mode;
    Graph g = build_graph(cfg);
    const ExampleCache cache = g.cache(kTokens);
    Tape a;
    const GraphOutput direct = graph_forward(a, g, kTokens).output;
    Tape b;
    const BoundGraph bound = bind(b, g);
    const GraphPass cached = graph_forward(b, g, bound, cache);
    CHECK(cached.output.probs == direct.probs);
    CHECK(cached.output.attention == direct.attention);

    g.zero_grad();
    a.reset();
    a.backward(softmax_cross_entropy(graph_forward(a, g, kTokens).logits, 0));
    std::vector<Matrix> direct_grads;
    for (auto& [name, t] : g.named_parameters()) direct_grads.push_back(t->grad());
    g.zero_grad();
    b.backward(softmax_cross_entropy(cached.logits, 0));
    std::size_t k = 0;
    for (auto& [name, t] : g.named_parameters()) CHECK((t->grad() - direct_grads[k++]).norm() <= 1e-14);
  }
}

TEST_CASE("graph gradient matches finite differences on 20 probes") {
  Graph g = tiny_graph();
  Rng rng(77);
  for (int p = 0; p < 20; ++p) {
    const auto tokens = random_tokens(rng);
    const auto probe = probe_graph_gradient(g, tokens, static_cast<int>(uniform_index(rng, 4)), rng);
    CHECK(probe.directional_rel_error < 1e-4);
    CHECK(probe.coordinate_rel_error < 1e-4);
  }
}

TEST_CASE("mirrored layer-2 edges share their initialization") {
  auto cfg = tiny_graph_config();
  cfg.layer2[1] = cfg.layer2[0];
  cfg.layer2[1].name = "d2";
  cfg.mirror_layer2_edges = true;
  const Graph g = build_graph(cfg);
  CHECK(g.edges()[3].weight.value() == g.edges()[4].weight.value());
  CHECK(g.edges()[0].weight.value() != g.edges()[1].weight.value());
}

TEST_CASE("z1 csv export") {
  const auto path = std::filesystem::temp_directory_path() / "flg_z1.csv";
  const std::vector<Vector> z = {Vector::Constant(3, 0.5), Vector::Constant(3, -1.0)};
  export_z1_csv(path, z);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "example,z0,z1,z2");
  CHECK(row == "0,0.5,0.5,0.5");
  std::filesystem::remove(path);
}
