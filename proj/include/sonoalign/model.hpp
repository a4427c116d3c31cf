#pragma once

// Model state shared by training and evaluation: configuration, parameters,
// vocabulary, optimizer moments, the batched forward pass and checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sonoalign/autodiff.hpp"
#include "sonoalign/dataset.hpp"
#include "sonoalign/encoders.hpp"
#include "sonoalign/grad_check.hpp"
#include "sonoalign/graph.hpp"
#include "sonoalign/objectives.hpp"
#include "sonoalign/optimizer.hpp"
#include "sonoalign/taxonomy.hpp"

namespace sonoalign::model {

// Ablation variants: the full model, without the semantic loss (Ds), without
// graph fusion (Dg), and without both (Dsg).
enum class Ablation { kFull, kNoSemantic, kNoGraph, kNeither };

const char* to_string(Ablation a);
Ablation ablation_from_string(const std::string& s);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double lambda = 0.2;
  double alpha_s = 0.6;
  double alpha_max = 0.2;
  double tau_init = 0.07;
  double tau_semantic = 0.07;
  graph::FusionMode fusion_mode = graph::FusionMode::kPooled;
  Ablation ablation = Ablation::kFull;
  std::uint64_t seed = 0;

  std::size_t dim = 32;
  std::size_t token_dim = 32;
  std::size_t hidden = 64;
  std::size_t pool_dim = 32;
  std::size_t heads = 4;
  std::size_t graph_layers = 1;

  bool graph_enabled() const { return ablation == Ablation::kFull || ablation == Ablation::kNoSemantic; }
  bool semantic_enabled() const {
    return (ablation == Ablation::kFull || ablation == Ablation::kNoGraph) && lambda != 0.0;
  }
  graph::GraphConfig graph_config() const;
  objectives::ObjectiveConfig objective_config() const;
  optim::AdamWConfig adamw_config() const;

  void validate() const;
  nlohmann::json to_json() const;
  // Strict: unknown keys raise ValidationError. Missing keys keep defaults.
  static TrainConfig from_json(const nlohmann::json& doc);
};

struct ModelState {
  TrainConfig config;
  std::size_t input_dim = 0;
  encoders::Vocabulary vocab;
  encoders::ImageEncoderParams image;
  encoders::TextEncoderParams text;
  graph::GraphEncoderParams graph;
  ad::Tensor log_tau;  // 1 x 1
  optim::AdamWState optimizer;

  // Every learnable tensor in a fixed order with stable names.
  std::vector<ad::NamedParam> named_parameters() const;
  std::vector<ad::Tensor> parameters() const;
  // Deep copy; the clone shares no tensors with the original.
  ModelState clone() const;
};

// Texts used to build the vocabulary: the given captions plus every
// zero-shot prompt in the catalog.
std::vector<std::string> vocabulary_sources(std::span<const dataset::SampleRecord> records,
                                            const taxonomy::TaxonomyCatalog& catalog);

// Glorot-uniform weights from `config.seed`, zero biases, log_tau = ln tau_init,
// gate 0 (alpha = alpha_max / 2), layer-norm gain 1 and bias 0.
ModelState init_state(const TrainConfig& config, const taxonomy::TaxonomyCatalog& catalog,
                      encoders::Vocabulary vocab, std::size_t input_dim);

using RecordRefs = std::vector<const dataset::SampleRecord*>;
RecordRefs refs(std::span<const dataset::SampleRecord> records);

struct ForwardResult {
  ad::Tensor images;       // B x D, raw
  ad::Tensor texts;        // B x D, raw t
  ad::Tensor fused_texts;  // B x D, t after graph fusion (or bypass)
};

// Batched forward pass. `use_graph` = false sends every text through the
// fusion bypass (LayerNorm only).
ForwardResult forward(const ModelState& state, const RecordRefs& batch, const taxonomy::TaxonomyCatalog& catalog,
                      bool use_graph);

// ---- checkpoints --------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

nlohmann::json checkpoint_to_json(const ModelState& state);
ModelState checkpoint_from_json(const nlohmann::json& doc, const taxonomy::TaxonomyCatalog& catalog);
void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path, const taxonomy::TaxonomyCatalog& catalog);

// FNV-1a over the file's bytes; used to compare checkpoints across runs.
std::uint64_t file_hash(const std::filesystem::path& path);

}  // namespace sonoalign::model
