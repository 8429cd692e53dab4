#include "flg/optim.hpp"

namespace flg {

void AdamW::add_param(Tensor& param, int group) {
  if (!param.requires_grad()) throw StateError("optimizer parameter must require grad");
  if (group < 0) throw InvalidInputError("negative optimizer group");
  slots_.push_back({&param, group, Matrix::Zero(param.value().rows(), param.value().cols()),
                    Matrix::Zero(param.value().rows(), param.value().cols())});
}

void AdamW::step(std::span<const double> lrs, double weight_decay) {
  for (const auto& s : slots_) {
    if (static_cast<std::size_t>(s.group) >= lrs.size()) throw InvalidInputError("missing learning rate for group");
    if (!s.param->grad().allFinite()) throw NumericError("non-finite gradient; optimizer step aborted");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
  for (auto& s : slots_) {
    const double lr = lrs[static_cast<std::size_t>(s.group)];
    const Matrix& g = s.param->grad();
    Matrix& w = s.param->value();
    w *= (1.0 - lr * weight_decay);
    s.m = hyper_.beta1 * s.m + (1.0 - hyper_.beta1) * g;
    s.v = hyper_.beta2 * s.v + (1.0 - hyper_.beta2) * g.cwiseProduct(g);
    w.array() -= lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + hyper_.eps);
  }
}

double global_grad_norm(std::span<Tensor* const> params) {
  double sq = 0.0;
  for (const Tensor* p : params) sq += p->grad().squaredNorm();
  return std::sqrt(sq);
}

double clip_grad_norm(std::span<Tensor* const> params, double max_norm) {
  if (!(max_norm > 0.0)) throw InvalidInputError("clip_grad_norm: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (Tensor* p : params) {
      Matrix scaled = p->grad() * factor;
      p->zero_grad();
      p->accumulate_grad(scaled);
    }
  }
  return norm;
}

}  // namespace flg
