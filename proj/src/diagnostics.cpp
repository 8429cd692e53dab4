#include "flg/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numeric>
#include <sstream>

namespace flg {

namespace {

void require_frozen(const TransformerNode& node) {
  if (!node.frozen()) throw StateError("node '" + node.spec().name + "' must be frozen for validation");
}

bool any_grad_on(const TransformerNode& node) {
  for (const auto& [name, t] : node.named_parameters()) {
    (void)name;
    if (t->has_grad()) return true;
  }
  return false;
}

struct GradStats {
  double max = 0.0, mean = 0.0, norm = 0.0;
};

GradStats stats_of(const Matrix& g) {
  GradStats s;
  s.max = g.cwiseAbs().maxCoeff();
  s.mean = g.cwiseAbs().mean();
  s.norm = g.norm();
  return s;
}

}  // namespace

Matrix collect_states(const TransformerNode& node, std::span<const TokenSeq> prompts, int layer) {
  Matrix out(static_cast<Index>(prompts.size()), node.spec().d_model);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Matrix res = node.residual_at(prompts[i], layer);
    out.row(static_cast<Index>(i)) = res.row(res.rows() - 1);
  }
  return out;
}

AlignmentReport alignment_report(const TransformerNode& src, const TransformerNode& dst,
                                 std::span<const TokenSeq> prompts, const TwoNodeConfig& config) {
  const std::size_t n = std::min(prompts.size(), config.n_pairs);
  if (n < 2) throw InvalidInputError("alignment needs at least two prompts");
  const auto used = prompts.subspan(0, n);
  const Matrix x = collect_states(src, used, depth_to_layer(config.l_inject, src.spec().n_layers));
  const Matrix y = collect_states(dst, used, depth_to_layer(config.l_inject, dst.spec().n_layers));
  AlignmentReport report;
  report.samples = n;
  report.lambda = config.lambda;
  report.folds = config.folds;
  report.in_sample_r2 = ridge_fit(x, y, config.lambda).r2;
  report.ridge_r2 = cross_validated_r2(x, y, config.lambda, config.folds);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(config.seed, Stream::kPermutation));
  shuffle_in_place(perm, rng);
  Matrix shuffled(y.rows(), y.cols());
  for (std::size_t i = 0; i < n; ++i) shuffled.row(static_cast<Index>(i)) = y.row(static_cast<Index>(perm[i]));
  report.permutation_r2 = cross_validated_r2(x, shuffled, config.lambda, config.folds);
  return report;
}

GradFlowReport gradient_flow(const TransformerNode& src, const TransformerNode& dst, std::span<const int> prompt,
                             const TwoNodeConfig& config, bool skip) {
  require_frozen(src);
  require_frozen(dst);
  const int d_src = src.spec().d_model;
  const int d_dst = dst.spec().d_model;
  constexpr int kClasses = 4;
  if (config.target_class < 0 || config.target_class >= kClasses) throw InvalidInputError("target_class out of range");

  Rng w_rng(derive_seed(config.seed, Stream::kValidation, 0));
  Rng h_rng(derive_seed(config.seed, Stream::kValidation, 1));
  Tensor w({d_dst, d_src}, Matrix(random_normal<double>(d_dst, d_src, 0.01, w_rng)), true);
  Tensor head({kClasses, d_dst}, Matrix(random_normal<double>(kClasses, d_dst, 0.01, h_rng)), true);

  Tape tape;
  HookPlan encode;
  encode.extract_at = depth_to_layer(config.l_inject, src.spec().n_layers);
  const Var h_src = l2_normalize(src.forward_hooked(tape, prompt, encode));
  const Var zero_dst = tape.constant(Vector::Zero(d_dst));
  const Var z = affine(tape.leaf(w), zero_dst, h_src);

  HookPlan plan;
  plan.inject_at = depth_to_layer(config.l_inject, dst.spec().n_layers);
  plan.inject_vector = z;
  plan.alpha = config.alpha;
  plan.extract_at = depth_to_layer(config.l_extract, dst.spec().n_layers);
  Var h_dst = dst.forward_hooked(tape, prompt, plan);
  if (skip) h_dst = add(h_dst, z);

  const Var logits = affine(tape.leaf(head), tape.constant(Vector::Zero(kClasses)), h_dst);
  tape.backward(softmax_cross_entropy(logits, config.target_class));

  const GradStats gw = stats_of(w.grad());
  const GradStats gh = stats_of(head.grad());
  GradFlowReport report;
  report.w_grad_max = gw.max;
  report.w_grad_mean = gw.mean;
  report.head_grad_max = gh.max;
  report.head_grad_mean = gh.mean;
  if (gh.norm == 0.0) throw NumericError("head gradient vanished; ratio undefined");
  report.ratio = gw.norm / gh.norm;
  report.frozen_grad_detected = any_grad_on(src) || any_grad_on(dst);
  return report;
}

double skip_ablation(const TransformerNode& src, const TransformerNode& dst, std::span<const int> prompt,
                     const TwoNodeConfig& config) {
  const double without = gradient_flow(src, dst, prompt, config, false).ratio;
  const double with = gradient_flow(src, dst, prompt, config, true).ratio;
  if (without == 0.0) throw NumericError("skip ablation: ratio without skip is zero");
  return with / without;
}

TwoNodeReport two_node_validation(const TransformerNode& src, const TransformerNode& dst,
                                  std::span<const TokenSeq> prompts, const TwoNodeConfig& config) {
  if (prompts.empty()) throw InvalidInputError("two_node_validation needs at least one prompt");
  TwoNodeReport report;
  report.grad = gradient_flow(src, dst, prompts.front(), config, false);
  report.grad.skip_improvement = skip_ablation(src, dst, prompts.front(), config);
  report.alignment = alignment_report(src, dst, prompts, config);
  return report;
}

nlohmann::json two_node_report_json(const TwoNodeReport& report) {
  using nlohmann::json;
  auto row = [](const char* label, const char* key, double desk, double reference) {
    return json{{"label", label}, {"key", key}, {"desk", desk}, {"reference", reference}};
  };
  const auto& g = report.grad;
  const auto& a = report.alignment;
  json rows = json::array({
      row("Ridge projection R²", "ridge_r2", a.ridge_r2, 0.299),
      row("Permutation control R²", "permutation_r2", a.permutation_r2, -0.243),
      row("W gradient max", "w_grad_max", g.w_grad_max, 2.48e-1),
      row("W gradient mean", "w_grad_mean", g.w_grad_mean, 1.81e-3),
      row("H gradient max", "head_grad_max", g.head_grad_max, 1.91),
      row("H gradient mean", "head_grad_mean", g.head_grad_mean, 1.39e-2),
      row("Grad norm ratio (W / head)", "grad_norm_ratio", g.ratio, 0.130),
      row("Skip connection improvement", "skip_improvement", g.skip_improvement, 1.00),
  });
  return json{{"rows", rows},
              {"samples", a.samples},
              {"lambda", a.lambda},
              {"folds", a.folds},
              {"in_sample_r2", a.in_sample_r2},
              {"frozen_grad_detected", g.frozen_grad_detected}};
}

std::string two_node_report_text(const nlohmann::json& report) {
  std::ostringstream out;
  out << fmt::format("{:<30} {:>14} {:>14}\n", "Metric", "desk", "reference");
  for (const auto& r : report.at("rows")) {
    out << fmt::format("{:<30} {:>14.4g} {:>14.4g}\n", r.at("label").get<std::string>(), r.at("desk").get<double>(),
                       r.at("reference").get<double>());
  }
  out << fmt::format("pairs {}, lambda {}, {}-fold cross-validated R², in-sample R² {:.4g}\n",
                     report.at("samples").get<std::size_t>(), report.at("lambda").get<double>(),
                     report.at("folds").get<int>(), report.at("in_sample_r2").get<double>());
  out << fmt::format("frozen grad detected: {}\n", report.at("frozen_grad_detected").get<bool>() ? "yes" : "no");
  return out.str();
}

std::size_t edge_param_count(Index d_s, Index d_u) {
  if (d_s <= 0 || d_u <= 0) throw InvalidInputError("dimensions must be positive");
  return static_cast<std::size_t>(d_s * d_u + d_s);
}

std::size_t output_param_count(Index d_s, Index n_classes) {
  if (d_s <= 0 || n_classes <= 0) throw InvalidInputError("dimensions must be positive");
  return static_cast<std::size_t>(4 * (d_s * d_s + d_s) + (n_classes * d_s + n_classes) + d_s + 2 * d_s);
}

ParamCount count_params(const GraphDims& dims) {
  ParamCount count;
  for (int i = 0; i < kEdges; ++i) {
    count.edges[static_cast<std::size_t>(i)] = edge_param_count(dims.d_s, dims.d_u[static_cast<std::size_t>(i)]);
    count.total += count.edges[static_cast<std::size_t>(i)];
  }
  count.output = output_param_count(dims.d_s, dims.n_classes);
  count.total += count.output;
  return count;
}

GraphDims reference_dims() {
  GraphDims dims;
  dims.d_s = 1024;
  dims.d_u = {2048, 1536, 2304, 3072, 4096};
  dims.n_classes = 4;
  return dims;
}

RoutingReport routing_report(std::span<const StepMetrics> metrics) {
  if (metrics.empty()) throw InvalidInputError("routing_report needs a nonempty metrics log");
  RoutingReport report;
  double attn_sum[kLayer2Nodes] = {};
  for (const auto& m : metrics) {
    report.steps.push_back(m.step);
    report.attention.push_back(m.attention);
    const double g5 = m.gnorm[4];
    report.grad_ratio.push_back(g5 > 0.0 ? m.gnorm[3] / g5 : std::numeric_limits<double>::infinity());
    for (int j = 0; j < kLayer2Nodes; ++j) attn_sum[j] += m.attention[static_cast<std::size_t>(j)];
  }
  const auto n = report.grad_ratio.size();
  auto mean_of = [&](std::size_t begin, std::size_t end) {
    return std::accumulate(report.grad_ratio.begin() + static_cast<long>(begin),
                           report.grad_ratio.begin() + static_cast<long>(end), 0.0) /
           static_cast<double>(end - begin);
  };
  const std::size_t tenth = std::max<std::size_t>(1, n / 10);
  report.mean_grad_ratio = mean_of(0, n);
  report.early_grad_ratio = mean_of(0, tenth);
  report.late_grad_ratio = mean_of(n - tenth, n);
  for (int j = 0; j < kLayer2Nodes; ++j) report.mean_attention[j] = attn_sum[j] / static_cast<double>(n);
  if (report.mean_grad_ratio > 1.0) {
    report.dominant_node = "node4";
  } else if (report.mean_grad_ratio < 1.0) {
    report.dominant_node = "node5";
  } else {
    report.dominant_node = "none";
  }
  return report;
}

nlohmann::json routing_report_json(const RoutingReport& report) {
  return nlohmann::json{{"steps", report.steps.size()},
                        {"mean_attention_node4", report.mean_attention[0]},
                        {"mean_attention_node5", report.mean_attention[1]},
                        {"mean_grad_ratio_w4_w5", report.mean_grad_ratio},
                        {"early_grad_ratio_w4_w5", report.early_grad_ratio},
                        {"late_grad_ratio_w4_w5", report.late_grad_ratio},
                        {"dominant_node", report.dominant_node}};
}

}  // namespace flg
