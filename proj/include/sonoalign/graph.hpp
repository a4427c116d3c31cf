#pragma once

// Per-sample lesion-attribute graph and its fusion into the text embedding.
//
// Diagnosis (T3) labels form the diagnostic side, every other labeled task
// the attribute side, and the two sides are fully connected. A typed
// mean-aggregation layer encodes the nodes, attention pooling summarizes
// them, and multi-head cross-attention plus a gated residual folds the
// summary into the text vector:
//
//   t_fused = LayerNorm(t + alpha * tanh(h)),  alpha = alpha_max * sigmoid(a_gate)

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sonoalign/autodiff.hpp"
#include "sonoalign/rng.hpp"
#include "sonoalign/taxonomy.hpp"

namespace sonoalign::graph {

struct GraphNode {
  taxonomy::TaskId task;
  std::size_t label = 0;  // index within the task vocabulary
  std::size_t flat = 0;   // index within the catalog-wide label enumeration

  friend bool operator==(const GraphNode&, const GraphNode&) = default;
};

struct HeteroGraph {
  std::vector<GraphNode> diag_nodes;
  std::vector<GraphNode> attr_nodes;
  // (diag position, attr position); the full bipartite product.
  std::vector<std::pair<std::size_t, std::size_t>> edges;

  std::size_t node_count() const noexcept { return diag_nodes.size() + attr_nodes.size(); }
  bool empty() const noexcept { return node_count() == 0; }
};

HeteroGraph build_graph(const taxonomy::TaskLabels& labels, const taxonomy::TaxonomyCatalog& catalog);

// Deterministic text rendering (node list, then edge list).
std::string render_text(const HeteroGraph& g, const taxonomy::TaxonomyCatalog& catalog);
std::string render_dot(const HeteroGraph& g, const taxonomy::TaxonomyCatalog& catalog);

enum class FusionMode {
  kPooled,  // queries attend to the pooled graph vector (single key)
  kNodes,   // queries attend to every node embedding
};

const char* to_string(FusionMode m);
FusionMode fusion_mode_from_string(const std::string& s);

struct GraphConfig {
  std::size_t dim = 32;
  std::size_t pool_dim = 32;
  std::size_t heads = 4;
  std::size_t layers = 1;
  double alpha_max = 0.2;
  FusionMode mode = FusionMode::kPooled;
};

struct MessageLayer {
  ad::Tensor self_diag;     // D x D
  ad::Tensor self_attr;     // D x D
  ad::Tensor attr_to_diag;  // D x D
  ad::Tensor diag_to_attr;  // D x D
};

struct GraphEncoderParams {
  ad::Tensor node_embedding;  // total_labels x D
  std::vector<MessageLayer> layers;
  ad::Tensor pool_proj;  // D x D_a
  ad::Tensor pool_vec;   // D_a x 1
  ad::Tensor query_proj;  // W_t, D x D
  ad::Tensor kv_proj;     // W_g, D x D
  ad::Tensor out_proj;    // D x D
  ad::Tensor gate;        // 1 x 1 pre-activation of alpha
  ad::Tensor ln_gain;     // 1 x D
  ad::Tensor ln_bias;     // 1 x D

  static GraphEncoderParams init(std::size_t n_labels, const GraphConfig& cfg, Rng& rng);
};

// alpha = alpha_max * sigmoid(gate).
ad::Tensor gate_alpha(const GraphEncoderParams& params, double alpha_max);

// Node embeddings Z (n x D), diagnostic rows first. Throws ArgumentError for
// an empty graph.
ad::Tensor encode_nodes(const HeteroGraph& g, const GraphEncoderParams& params);

struct PoolResult {
  ad::Tensor pooled;   // 1 x D
  ad::Tensor weights;  // 1 x n, non-negative, sums to 1
};
PoolResult attention_pool(const ad::Tensor& nodes, const GraphEncoderParams& params);

// Multi-head cross-attention of one query row over `context` rows
// (K = V = context * W_g), followed by the output projection.
ad::Tensor cross_attend(const ad::Tensor& text, const ad::Tensor& context, const GraphEncoderParams& params,
                        std::size_t heads);

struct FusionResult {
  ad::Tensor fused;                    // 1 x D
  std::optional<ad::Tensor> attended;  // h; absent on bypass
};

// Gated residual fusion; `context` is the pooled vector or the node matrix
// depending on cfg.mode.
FusionResult fuse(const ad::Tensor& text, const ad::Tensor& context, const GraphEncoderParams& params,
                  const GraphConfig& cfg);
// Used when a sample has no graph: LayerNorm(t).
ad::Tensor fuse_bypass(const ad::Tensor& text, const GraphEncoderParams& params);

// Whole per-sample path: build, encode, pool and fuse, or bypass when the
// graph is empty.
FusionResult enhance_text(const ad::Tensor& text, const HeteroGraph& g, const GraphEncoderParams& params,
                          const GraphConfig& cfg);

}  // namespace sonoalign::graph
