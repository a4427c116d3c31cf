#pragma once

#include "json.hpp"
#include "sonoalign/autodiff.hpp"
#include "sonoalign/matrix.hpp"

namespace sonoalign::objectives {

struct ObjectiveConfig {
  double lambda = 0.2;      // weight of the semantic term
  double alpha_s = 0.6;     // MSE share inside the semantic term
  double tau_semantic = 0.07;
  double tau_floor = 0.01;
};

struct BatchEmbeddings {
  ad::Tensor images;  // B x D, unit rows
  ad::Tensor texts;   // B x D, unit rows
  ad::Tensor cosine;  // B x B = images * texts^T
};

// L2-normalizes both sides and forms the cosine matrix.
BatchEmbeddings make_batch_embeddings(const ad::Tensor& images, const ad::Tensor& texts);

// tau = max(exp(log_tau), floor).
ad::Tensor temperature(const ad::Tensor& log_tau, double floor = 0.01);

// P = C / tau.
ad::Tensor similarity_logits(const ad::Tensor& cosine, const ad::Tensor& tau);

// Symmetric cross-entropy over rows (image -> text) and columns
// (text -> image), averaged over both directions and the batch.
ad::Tensor clip_loss(const ad::Tensor& logits);

struct SemanticTerms {
  ad::Tensor mse;       // ||clamp(C,0,1) - S||_F^2 / B^2
  ad::Tensor kl;        // mean_i KL(softmax(C_i/tau) || softmax(S_i/tau))
  ad::Tensor semantic;  // alpha_s * mse + (1 - alpha_s) * kl
};

// `prior` is treated as a constant target.
SemanticTerms semantic_loss(const ad::Tensor& cosine, const Matrix& prior, double tau_semantic, double alpha_s);

struct LossBreakdown {
  double l_clip = 0.0;
  double l_mse = 0.0;
  double l_kl = 0.0;
  double l_semantic = 0.0;
  double l_total = 0.0;
  double tau = 0.0;

  nlohmann::json to_json() const;
};

struct LossTerms {
  ad::Tensor total;
  LossBreakdown breakdown;
};

// L = L_clip + lambda * L_semantic. A null `prior` (or lambda == 0) skips the
// semantic branch entirely and reports its terms as 0.
LossTerms total_loss(const BatchEmbeddings& emb, const Matrix* prior, const ad::Tensor& log_tau,
                     const ObjectiveConfig& cfg);

}  // namespace sonoalign::objectives
