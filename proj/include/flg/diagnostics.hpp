#pragma once

// Analysis tools: ridge alignment between node representations, two-node
// gradient-flow validation, parameter accounting, and routing summaries.

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flg/errors.hpp"
#include "flg/rng.hpp"
#include "flg/taskgen.hpp"
#include "flg/trainer.hpp"
#include "flg/transformer_node.hpp"

namespace flg {

template <typename Scalar>
using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
struct RidgeFit {
  DenseMatrix<Scalar> coef;                       // [d_src, d_tgt]
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> intercept;
  Scalar r2 = 0;
};

/// 1 - RSS / TSS pooled over every target entry, TSS taken around the column
/// means. Invariant under orthogonal rotations of the target space.
template <typename Scalar, typename DY, typename DP>
Scalar pooled_r2(const Eigen::MatrixBase<DY>& y, const Eigen::MatrixBase<DP>& pred) {
  const auto mu = y.colwise().mean();
  const Scalar tss = (y.rowwise() - mu).squaredNorm();
  const Scalar rss = (y - pred).squaredNorm();
  if (tss == Scalar(0)) throw NumericError("R^2 undefined for constant targets");
  return Scalar(1) - rss / tss;
}

/// Ridge regression with an unpenalized intercept: coef solves
/// (Xc^T Xc + lambda I) coef = Xc^T Yc on column-centered data via an LDLT
/// factorization; R^2 is in-sample.
template <typename Scalar, typename DX, typename DY>
RidgeFit<Scalar> ridge_fit(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DY>& y, Scalar lambda) {
  if (x.rows() != y.rows()) throw DimensionError("ridge_fit: X and Y need the same number of rows");
  if (x.rows() < 2) throw InvalidInputError("ridge_fit: need at least two samples");
  if (lambda < Scalar(0)) throw InvalidInputError("ridge_fit: lambda must be non-negative");
  const auto x_mu = x.colwise().mean();
  const auto y_mu = y.colwise().mean();
  const DenseMatrix<Scalar> xc = x.rowwise() - x_mu;
  const DenseMatrix<Scalar> yc = y.rowwise() - y_mu;
  DenseMatrix<Scalar> gram = xc.transpose() * xc;
  gram.diagonal().array() += lambda;
  const Eigen::LDLT<DenseMatrix<Scalar>> ldlt(gram);
  const auto d = ldlt.vectorD().cwiseAbs();
  const Scalar scale = std::max(d.maxCoeff(), Scalar(1));
  if (ldlt.info() != Eigen::Success || d.minCoeff() <= scale * Scalar(1e-12)) {
    throw NumericError("ridge_fit: singular normal equations; use lambda > 0");
  }
  RidgeFit<Scalar> fit;
  fit.coef = ldlt.solve(xc.transpose() * yc);
  fit.intercept = y_mu - x_mu * fit.coef;
  const DenseMatrix<Scalar> pred = (x * fit.coef).rowwise() + fit.intercept;
  fit.r2 = pooled_r2<Scalar>(y, pred);
  return fit;
}

/// Out-of-sample R^2: each of `folds` contiguous row blocks is predicted by a
/// ridge fit on the remaining rows, and the pooled residuals are scored
/// against the full-sample TSS. Can be negative.
template <typename Scalar, typename DX, typename DY>
Scalar cross_validated_r2(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DY>& y, Scalar lambda, int folds = 5) {
  const Eigen::Index n = x.rows();
  if (folds < 2 || n < 2 * folds) throw InvalidInputError("cross_validated_r2: need at least two rows per fold");
  if (x.rows() != y.rows()) throw DimensionError("cross_validated_r2: X and Y need the same number of rows");
  DenseMatrix<Scalar> pred(n, y.cols());
  for (int f = 0; f < folds; ++f) {
    const Eigen::Index begin = n * f / folds;
    const Eigen::Index end = n * (f + 1) / folds;
    const Eigen::Index held = end - begin;
    DenseMatrix<Scalar> xt(n - held, x.cols()), yt(n - held, y.cols());
    xt << x.topRows(begin), x.bottomRows(n - end);
    yt << y.topRows(begin), y.bottomRows(n - end);
    const auto fit = ridge_fit(xt, yt, lambda);
    pred.middleRows(begin, held) = (x.middleRows(begin, held) * fit.coef).rowwise() + fit.intercept;
  }
  return pooled_r2<Scalar>(y, pred);
}

/// ridge_fit after reordering the rows of Y by `perm`.
template <typename Scalar, typename DX, typename DY>
Scalar permutation_control(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DY>& y, Scalar lambda,
                           std::span<const std::size_t> perm) {
  if (perm.size() != static_cast<std::size_t>(y.rows())) throw DimensionError("permutation length must match rows");
  DenseMatrix<Scalar> shuffled(y.rows(), y.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) shuffled.row(static_cast<Eigen::Index>(i)) = y.row(static_cast<Eigen::Index>(perm[i]));
  return ridge_fit(x, shuffled, lambda).r2;
}

/// Seeded uniform row shuffle of Y.
template <typename Scalar, typename DX, typename DY>
Scalar permutation_control(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DY>& y, Scalar lambda,
                           std::uint64_t seed) {
  std::vector<std::size_t> perm(static_cast<std::size_t>(y.rows()));
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng rng(seed);
  shuffle_in_place(perm, rng);
  return permutation_control(x, y, lambda, std::span<const std::size_t>(perm));
}

/// R^2 values are cross-validated; the in-sample fit is kept for reference.
struct AlignmentReport {
  double ridge_r2 = 0.0;
  double permutation_r2 = 0.0;
  double in_sample_r2 = 0.0;
  std::size_t samples = 0;
  double lambda = 1.0;
  int folds = 5;
};

struct GradFlowReport {
  double w_grad_max = 0.0;
  double w_grad_mean = 0.0;
  double head_grad_max = 0.0;
  double head_grad_mean = 0.0;
  double ratio = 0.0;  // ||grad W||_F / ||grad H||_F
  double skip_improvement = 0.0;
  bool frozen_grad_detected = false;
};

struct TwoNodeConfig {
  double alpha = 0.25;
  double l_inject = 0.75;   // source encoding depth and destination injection depth
  double l_extract = 0.90;  // destination extraction depth
  double lambda = 1.0;
  std::size_t n_pairs = 200;
  int folds = 5;
  int target_class = 0;  // dummy class for the single gradient pass
  std::uint64_t seed = 0;
};

/// Final-token states (not normalized) of `node` at `layer` for each prompt,
/// one row per prompt.
Matrix collect_states(const TransformerNode& node, std::span<const TokenSeq> prompts, int layer);

/// Ridge map from src states to dst states, both at depth l_inject, scored by
/// cross-validation, with a seeded row-permutation control scored the same way.
AlignmentReport alignment_report(const TransformerNode& src, const TransformerNode& dst,
                                 std::span<const TokenSeq> prompts, const TwoNodeConfig& config);

/// One forward-backward pass of the two-node graph on `prompt`: encode with
/// src, project with W (normal * 0.01, no bias), inject into dst, extract,
/// apply head H (normal * 0.01), cross-entropy. With `skip`, z is also added
/// to the head input.
GradFlowReport gradient_flow(const TransformerNode& src, const TransformerNode& dst, std::span<const int> prompt,
                             const TwoNodeConfig& config, bool skip);

/// Ratio with skip divided by ratio without, on identical seeds.
double skip_ablation(const TransformerNode& src, const TransformerNode& dst, std::span<const int> prompt,
                     const TwoNodeConfig& config);

struct TwoNodeReport {
  GradFlowReport grad;
  AlignmentReport alignment;
};

/// Gradient statistics on the first prompt plus alignment over up to
/// config.n_pairs prompts. Both nodes must be frozen.
TwoNodeReport two_node_validation(const TransformerNode& src, const TransformerNode& dst,
                                  std::span<const TokenSeq> prompts, const TwoNodeConfig& config);

/// Table-3-style rows: label, desk value, reference value, plus
/// machine-readable keys.
nlohmann::json two_node_report_json(const TwoNodeReport& report);
std::string two_node_report_text(const nlohmann::json& report);

// ---------------------------------------------------------------------------
// Parameter accounting

struct GraphDims {
  Index d_s = 16;
  std::array<Index, kEdges> d_u{};
  Index n_classes = 4;
};

struct ParamCount {
  std::array<std::size_t, kEdges> edges{};
  std::size_t output = 0;
  std::size_t total = 0;
};

std::size_t edge_param_count(Index d_s, Index d_u);
/// 4 (d_s^2 + d_s) attention projections, n_classes (d_s + 1) classifier,
/// d_s learned query, 2 d_s LayerNorm.
std::size_t output_param_count(Index d_s, Index n_classes);
ParamCount count_params(const GraphDims& dims);

/// Widths of the full-scale graph: d_s 1024 and node widths 2048, 1536,
/// 2304, 3072, 4096.
GraphDims reference_dims();

// ---------------------------------------------------------------------------
// Routing

struct RoutingReport {
  std::vector<long> steps;
  std::vector<std::array<double, kLayer2Nodes>> attention;
  std::vector<double> grad_ratio;  // ||grad W_4|| / ||grad W_5||
  double mean_grad_ratio = 0.0;
  double early_grad_ratio = 0.0;  // first 10% of steps
  double late_grad_ratio = 0.0;   // last 10% of steps
  double mean_attention[kLayer2Nodes] = {};
  std::string dominant_node;
};

RoutingReport routing_report(std::span<const StepMetrics> metrics);
nlohmann::json routing_report_json(const RoutingReport& report);

}  // namespace flg
