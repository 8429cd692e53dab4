#include <doctest.h>

#include <Eigen/QR>
#include <fmt/format.h>
#include <cmath>
#include <set>

#include "fixtures.hpp"
#include "flg/diagnostics.hpp"

using namespace flg;
using namespace flg::testing;

namespace {

Matrix gaussian(Index rows, Index cols, std::uint64_t seed) {
  Rng rng(seed);
  return random_normal<double>(rows, cols, 1.0, rng);
}

Matrix random_rotation(Index d, std::uint64_t seed) {
  Eigen::HouseholderQR<Matrix> qr(gaussian(d, d, seed));
  return qr.householderQ();
}

std::vector<TokenSeq> prompts_for(int n) {
  const auto table = gen_fact_table(12, 12, 5);
  const auto data = gen_mcq_dataset(table, n, 9);
  std::vector<TokenSeq> out;
  for (const auto* split : {&data.train, &data.val, &data.test}) {
    for (const auto& ex : *split) out.push_back(mcq_prompt(ex, data.vocab));
  }
  return out;
}

TransformerNode frozen(const NodeSpec& spec) {
  TransformerNode n(spec);
  n.freeze();
  return n;
}

}  // namespace

TEST_CASE("parameter accounting reproduces the full-scale table") {
  const ParamCount c = count_params(reference_dims());
  CHECK(c.edges[0] == 2098176);
  CHECK(c.edges[1] == 1573888);
  CHECK(c.edges[2] == 2360320);
  CHECK(c.edges[3] == 3146752);
  CHECK(c.edges[4] == 4195328);
  CHECK(c.output == 4205572);
  CHECK(c.total == 17580036);
}

TEST_CASE("graph parameter count agrees with the formula at desk scale") {
  Graph g = tiny_graph();
  GraphDims dims;
  dims.d_s = g.config().d_s;
  dims.d_u = {12, 10, 14, 16, 18};
  CHECK(count_params(dims).total == g.trainable_parameter_count());
}

TEST_CASE("ridge recovers an exact linear map") {
  const Matrix x = gaussian(60, 5, 1);
  const Matrix m = gaussian(5, 3, 2);
  const Matrix y = x * m;
  const auto fit = ridge_fit(x, y, 0.0);
  CHECK(fit.r2 >= 1.0 - 1e-9);
  CHECK((fit.coef - m).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(ridge_fit(x, y, 1.0).r2 < fit.r2);
}

TEST_CASE("ridge refuses a singular system at lambda zero") {
  Matrix x = gaussian(30, 3, 3);
  x.col(2) = 2.0 * x.col(0) - x.col(1);
  const Matrix y = gaussian(30, 2, 4);
  CHECK_THROWS_AS(ridge_fit(x, y, 0.0), NumericError);
  CHECK_NOTHROW(ridge_fit(x, y, 1.0));
  CHECK_THROWS_AS(ridge_fit(x, y, -1.0), InvalidInputError);
  CHECK_THROWS_AS(ridge_fit(x, Matrix(gaussian(29, 2, 4)), 1.0), DimensionError);
}

TEST_CASE("ridge on independent noise explains almost nothing") {
  const Matrix x = gaussian(4000, 8, 5);
  const Matrix y = gaussian(4000, 6, 6);
  const double r2 = ridge_fit(x, y, 1.0).r2;
  CHECK(r2 <= 0.05);
  CHECK(std::abs(r2 - permutation_control(x, y, 1.0, std::uint64_t{7})) < 0.02);
}

TEST_CASE("R^2 is invariant under orthogonal rotations") {
  const Matrix x = gaussian(80, 6, 8);
  const Matrix y = x * gaussian(6, 4, 9) + 0.5 * gaussian(80, 4, 10);
  const double base = ridge_fit(x, y, 1.0).r2;
  const double rotated = ridge_fit(Matrix(x * random_rotation(6, 11)), Matrix(y * random_rotation(4, 12)), 1.0).r2;
  CHECK(rotated == doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("permutation control") {
  const Matrix x = gaussian(100, 6, 13);
  const Matrix y = x * gaussian(6, 4, 14) + 0.3 * gaussian(100, 4, 15);
  std::vector<std::size_t> identity(100);
  for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = i;
  CHECK(permutation_control(x, y, 1.0, std::span<const std::size_t>(identity)) == ridge_fit(x, y, 1.0).r2);
  const double shuffled = permutation_control(x, y, 1.0, std::uint64_t{16});
  CHECK(shuffled < ridge_fit(x, y, 1.0).r2 - 0.5);
  CHECK(shuffled == permutation_control(x, y, 1.0, std::uint64_t{16}));
}

TEST_CASE("cross-validated R^2") {
  const Matrix x = gaussian(200, 8, 19);
  const Matrix m = gaussian(8, 5, 20);
  CHECK(cross_validated_r2(x, Matrix(x * m), 0.0) >= 1.0 - 1e-9);

  // Out of sample, unrelated targets score at or below zero, unlike in-sample.
  const Matrix noise = gaussian(200, 5, 21);
  CHECK(cross_validated_r2(x, noise, 1.0) < 0.0);
  CHECK(ridge_fit(x, noise, 1.0).r2 > 0.0);

  const Matrix y = x * m + 2.0 * gaussian(200, 5, 22);
  const double cv = cross_validated_r2(x, y, 1.0);
  CHECK(cv > 0.3);
  CHECK(cv < ridge_fit(x, y, 1.0).r2);
  CHECK_THROWS_AS(cross_validated_r2(Matrix(x.topRows(9)), Matrix(y.topRows(9)), 1.0), InvalidInputError);
}

TEST_CASE("ridge works in single precision") {
  using MatF = DenseMatrix<float>;
  const MatF x = gaussian(50, 4, 17).cast<float>();
  const MatF y = x * gaussian(4, 2, 18).cast<float>();
  CHECK(ridge_fit(x, y, 0.0f).r2 > 0.9999f);
}

TEST_CASE("two-node gradient flow") {
  const auto src = frozen(tiny_node("a", 12, 3, 101, 30));
  const auto dst = frozen(tiny_node("e", 18, 6, 105, 38));
  const auto prompts = prompts_for(40);
  TwoNodeConfig cfg;
  cfg.seed = 21;

  const auto g = gradient_flow(src, dst, prompts[0], cfg, false);
  CHECK(g.ratio > 0.0);
  CHECK(std::isfinite(g.ratio));
  CHECK(g.w_grad_max >= g.w_grad_mean);
  CHECK(g.head_grad_max >= g.head_grad_mean);
  CHECK(!g.frozen_grad_detected);

  const double factor = skip_ablation(src, dst, prompts[0], cfg);
  CHECK(factor > 0.0);
  CHECK(std::isfinite(factor));
  CHECK(factor == skip_ablation(src, dst, prompts[0], cfg));

  TransformerNode unfrozen(tiny_node("e", 18, 6, 105, 38));
  CHECK_THROWS_AS(gradient_flow(src, unfrozen, prompts[0], cfg, false), StateError);
  // depth 0.75 and 0.90 meet at the same block of a four-layer node
  const auto shallow = frozen(tiny_node("b", 10, 4, 102, 32));
  CHECK_THROWS(gradient_flow(src, shallow, prompts[0], cfg, false));
}

TEST_CASE("two-node report json and text agree") {
  const auto src = frozen(tiny_node("a", 12, 3, 101, 30));
  const auto dst = frozen(tiny_node("d", 16, 5, 104, 36));
  const auto prompts = prompts_for(40);
  TwoNodeConfig cfg;
  cfg.n_pairs = 30;
  const auto report = two_node_validation(src, dst, prompts, cfg);
  CHECK(report.alignment.samples == 30);
  CHECK(report.alignment.ridge_r2 <= 1.0);
  CHECK(report.alignment.permutation_r2 <= 1.0);

  const auto j = two_node_report_json(report);
  const std::vector<std::string> labels = {
      "Ridge projection R²",  "Permutation control R²",     "W gradient max", "W gradient mean", "H gradient max",
      "H gradient mean", "Grad norm ratio (W / head)", "Skip connection improvement"};
  REQUIRE(j.at("rows").size() == labels.size());
  const std::string text = two_node_report_text(j);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& row = j.at("rows")[i];
    CHECK(row.at("label") == labels[i]);
    CHECK(std::isfinite(row.at("desk").get<double>()));
    CHECK(text.find(labels[i]) != std::string::npos);
    CHECK(text.find(fmt::format("{:>14.4g}", row.at("desk").get<double>())) != std::string::npos);
  }
  CHECK(j.at("rows")[6].at("desk").get<double>() == report.grad.ratio);
  CHECK(j.at("rows")[6].at("reference").get<double>() == 0.130);
}

TEST_CASE("routing report") {
  std::vector<StepMetrics> log(20);
  for (std::size_t i = 0; i < log.size(); ++i) {
    log[i].step = static_cast<long>(i);
    log[i].attention = {0.3, 0.7};
    log[i].gnorm = {1, 1, 1, i < 2 ? 4.0 : 1.0, 1.0};
  }
  const auto r = routing_report(log);
  CHECK(r.steps.size() == 20);
  CHECK(r.early_grad_ratio == doctest::Approx(4.0));
  CHECK(r.late_grad_ratio == doctest::Approx(1.0));
  CHECK(r.mean_grad_ratio == doctest::Approx(1.3));
  CHECK(r.mean_attention[0] == doctest::Approx(0.3));
  CHECK(r.dominant_node == "node4");
  CHECK(routing_report_json(r).at("dominant_node") == "node4");
  CHECK_THROWS_AS(routing_report(std::span<const StepMetrics>()), InvalidInputError);
}
