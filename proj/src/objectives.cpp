#include "sonoalign/objectives.hpp"

#include <cmath>
#include <limits>

#include "sonoalign/errors.hpp"

namespace sonoalign::objectives {

BatchEmbeddings make_batch_embeddings(const ad::Tensor& images, const ad::Tensor& texts) {
  if (images.rows() != texts.rows() || images.cols() != texts.cols()) {
    throw DimensionError("image and text embeddings differ in shape: " + images.value().shape_string() + " vs " +
                         texts.value().shape_string());
  }
  ad::Tensor x = ad::l2_normalize(images);
  ad::Tensor t = ad::l2_normalize(texts);
  return {x, t, ad::matmul(x, ad::transpose(t))};
}

ad::Tensor temperature(const ad::Tensor& log_tau, double floor) {
  return ad::clamp_elem(ad::exp_elem(log_tau), floor, std::numeric_limits<double>::infinity());
}

ad::Tensor similarity_logits(const ad::Tensor& cosine, const ad::Tensor& tau) { return ad::div_scalar(cosine, tau); }

ad::Tensor clip_loss(const ad::Tensor& logits) {
  const std::size_t b = logits.rows();
  if (b == 0 || logits.cols() != b) throw DimensionError("clip_loss: logits must be square and non-empty");
  ad::Tensor rows = ad::sum(ad::diagonal(ad::row_log_softmax(logits)));
  ad::Tensor cols = ad::sum(ad::diagonal(ad::row_log_softmax(ad::transpose(logits))));
  return ad::scale(ad::add(rows, cols), -1.0 / (2.0 * static_cast<double>(b)));
}

namespace {

// matches row_log_softmax(scale(x, 1 / tau)) bit for bit
Matrix row_log_softmax_const(const Matrix& m, double tau) {
  const double inv = 1.0 / tau;
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : m.row(r)) mx = std::max(mx, v * inv);
    double z = 0.0;
    for (double v : m.row(r)) z += std::exp(v * inv - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(r, c) * inv - lse;
  }
  return out;
}

}  // namespace

SemanticTerms semantic_loss(const ad::Tensor& cosine, const Matrix& prior, double tau_semantic, double alpha_s) {
  if (!cosine.value().same_shape(prior)) {
    throw DimensionError("semantic_loss: cosine " + cosine.value().shape_string() + " vs prior " +
                         prior.shape_string());
  }
  if (!(tau_semantic > 0.0)) throw ArgumentError("semantic_loss: temperature must be positive");
  if (!(alpha_s >= 0.0 && alpha_s <= 1.0)) throw ArgumentError("semantic_loss: alpha_s must lie in [0,1]");
  const double b = static_cast<double>(prior.rows());

  ad::Tensor target = ad::Tensor::constant(prior);
  ad::Tensor diff = ad::sub(ad::clamp_elem(cosine, 0.0, 1.0), target);
  ad::Tensor mse = ad::scale(ad::sum(ad::hadamard(diff, diff)), 1.0 / (b * b));

  ad::Tensor log_p = ad::row_log_softmax(ad::scale(cosine, 1.0 / tau_semantic));
  ad::Tensor log_s = ad::Tensor::constant(row_log_softmax_const(prior, tau_semantic));
  ad::Tensor kl = ad::scale(ad::sum(ad::hadamard(ad::exp_elem(log_p), ad::sub(log_p, log_s))), 1.0 / b);

  ad::Tensor semantic = ad::add(ad::scale(mse, alpha_s), ad::scale(kl, 1.0 - alpha_s));
  return {mse, kl, semantic};
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"l_clip", l_clip}, {"l_mse", l_mse},     {"l_kl", l_kl},
          {"l_semantic", l_semantic}, {"l_total", l_total}, {"tau", tau}};
}

LossTerms total_loss(const BatchEmbeddings& emb, const Matrix* prior, const ad::Tensor& log_tau,
                     const ObjectiveConfig& cfg) {
  ad::Tensor tau = temperature(log_tau, cfg.tau_floor);
  ad::Tensor l_clip = clip_loss(similarity_logits(emb.cosine, tau));
  LossTerms out;
  out.breakdown.tau = tau.item();
  out.breakdown.l_clip = l_clip.item();
  if (prior == nullptr || cfg.lambda == 0.0) {
    out.total = l_clip;
    out.breakdown.l_total = out.breakdown.l_clip;
    return out;
  }
  SemanticTerms sem = semantic_loss(emb.cosine, *prior, cfg.tau_semantic, cfg.alpha_s);
  out.total = ad::add(l_clip, ad::scale(sem.semantic, cfg.lambda));
  out.breakdown.l_mse = sem.mse.item();
  out.breakdown.l_kl = sem.kl.item();
  out.breakdown.l_semantic = sem.semantic.item();
  out.breakdown.l_total = out.total.item();
  return out;
}

}  // namespace sonoalign::objectives
