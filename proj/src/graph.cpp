#include "sonoalign/graph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sonoalign/errors.hpp"
#include "sonoalign/init.hpp"

namespace sonoalign::graph {

using taxonomy::TaskId;

HeteroGraph build_graph(const taxonomy::TaskLabels& labels, const taxonomy::TaxonomyCatalog& catalog) {
  HeteroGraph g;
  for (std::size_t k = 0; k < taxonomy::kTaskCount; ++k) {
    const TaskId id = TaskId::from_index(k);
    const std::size_t offset = catalog.label_offset(id);
    auto& side = id == taxonomy::kDiagnosis ? g.diag_nodes : g.attr_nodes;
    taxonomy::LabelSet sorted = labels[k];
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (std::size_t l : sorted) side.push_back({id, l, offset + l});
  }
  g.edges.reserve(g.diag_nodes.size() * g.attr_nodes.size());
  for (std::size_t d = 0; d < g.diag_nodes.size(); ++d)
    for (std::size_t p = 0; p < g.attr_nodes.size(); ++p) g.edges.emplace_back(d, p);
  return g;
}

namespace {

std::string node_label(const GraphNode& n, const taxonomy::TaxonomyCatalog& catalog) {
  return n.task.str() + " " + catalog.task(n.task).labels.at(n.label);
}

}  // namespace

std::string render_text(const HeteroGraph& g, const taxonomy::TaxonomyCatalog& catalog) {
  std::ostringstream os;
  os << "graph: " << g.diag_nodes.size() << " diagnostic nodes, " << g.attr_nodes.size() << " attribute nodes, "
     << g.edges.size() << " edges\n";
  os << "nodes:\n";
  for (std::size_t i = 0; i < g.diag_nodes.size(); ++i) os << "  d" << i << "  " << node_label(g.diag_nodes[i], catalog) << '\n';
  for (std::size_t i = 0; i < g.attr_nodes.size(); ++i) os << "  a" << i << "  " << node_label(g.attr_nodes[i], catalog) << '\n';
  os << "edges:\n";
  for (const auto& [d, p] : g.edges) os << "  d" << d << " -- a" << p << '\n';
  return os.str();
}

std::string render_dot(const HeteroGraph& g, const taxonomy::TaxonomyCatalog& catalog) {
  std::ostringstream os;
  os << "graph lesion_attributes {\n";
  for (std::size_t i = 0; i < g.diag_nodes.size(); ++i)
    os << "  d" << i << " [shape=box, label=\"" << node_label(g.diag_nodes[i], catalog) << "\"];\n";
  for (std::size_t i = 0; i < g.attr_nodes.size(); ++i)
    os << "  a" << i << " [shape=ellipse, label=\"" << node_label(g.attr_nodes[i], catalog) << "\"];\n";
  for (const auto& [d, p] : g.edges) os << "  d" << d << " -- a" << p << ";\n";
  os << "}\n";
  return os.str();
}

const char* to_string(FusionMode m) { return m == FusionMode::kPooled ? "pooled" : "nodes"; }

FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "pooled") return FusionMode::kPooled;
  if (s == "nodes") return FusionMode::kNodes;
  throw ValidationError("unknown fusion mode '" + s + "' (expected pooled or nodes)");
}

GraphEncoderParams GraphEncoderParams::init(std::size_t n_labels, const GraphConfig& cfg, Rng& rng) {
  if (cfg.heads == 0 || cfg.dim % cfg.heads != 0) {
    throw ValidationError("attention heads (" + std::to_string(cfg.heads) + ") must divide the embedding dimension (" +
                          std::to_string(cfg.dim) + ")");
  }
  if (cfg.layers < 1) throw ValidationError("graph encoder needs at least one layer");
  if (!(cfg.alpha_max > 0.0)) throw ValidationError("alpha_max must be positive");
  const std::size_t d = cfg.dim;
  auto param = [](Matrix m) { return ad::Tensor::parameter(std::move(m)); };
  GraphEncoderParams p;
  p.node_embedding = param(glorot_uniform(n_labels, d, rng));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    MessageLayer layer;
    layer.self_diag = param(glorot_uniform(d, d, rng));
    layer.self_attr = param(glorot_uniform(d, d, rng));
    layer.attr_to_diag = param(glorot_uniform(d, d, rng));
    layer.diag_to_attr = param(glorot_uniform(d, d, rng));
    p.layers.push_back(std::move(layer));
  }
  p.pool_proj = param(glorot_uniform(d, cfg.pool_dim, rng));
  p.pool_vec = param(glorot_uniform(cfg.pool_dim, 1, rng));
  p.query_proj = param(glorot_uniform(d, d, rng));
  p.kv_proj = param(glorot_uniform(d, d, rng));
  p.out_proj = param(glorot_uniform(d, d, rng));
  p.gate = param(Matrix(1, 1, 0.0));
  p.ln_gain = param(Matrix(1, d, 1.0));
  p.ln_bias = param(Matrix(1, d, 0.0));
  return p;
}

ad::Tensor gate_alpha(const GraphEncoderParams& params, double alpha_max) {
  return ad::scale(ad::sigmoid_elem(params.gate), alpha_max);
}

ad::Tensor encode_nodes(const HeteroGraph& g, const GraphEncoderParams& params) {
  if (g.empty()) throw ArgumentError("encode_nodes: graph has no nodes");
  std::vector<std::size_t> diag_ids, attr_ids;
  for (const auto& n : g.diag_nodes) diag_ids.push_back(n.flat);
  for (const auto& n : g.attr_nodes) attr_ids.push_back(n.flat);

  ad::Tensor diag, attr;
  if (!diag_ids.empty()) diag = ad::gather_rows(params.node_embedding, diag_ids);
  if (!attr_ids.empty()) attr = ad::gather_rows(params.node_embedding, attr_ids);

  // Full bipartite edges: every node on one side has the whole other side as
  // its neighborhood, so one mean message serves the entire side.
  for (const auto& layer : params.layers) {
    ad::Tensor next_diag, next_attr;
    if (diag.defined()) {
      next_diag = ad::matmul(diag, layer.self_diag);
      if (attr.defined()) next_diag = ad::add_row(next_diag, ad::matmul(ad::mean_rows(attr), layer.attr_to_diag));
      next_diag = ad::tanh_elem(next_diag);
    }
    if (attr.defined()) {
      next_attr = ad::matmul(attr, layer.self_attr);
      if (diag.defined()) next_attr = ad::add_row(next_attr, ad::matmul(ad::mean_rows(diag), layer.diag_to_attr));
      next_attr = ad::tanh_elem(next_attr);
    }
    diag = std::move(next_diag);
    attr = std::move(next_attr);
  }
  if (!diag.defined()) return attr;
  if (!attr.defined()) return diag;
  const ad::Tensor parts[] = {diag, attr};
  return ad::concat_rows(parts);
}

PoolResult attention_pool(const ad::Tensor& nodes, const GraphEncoderParams& params) {
  ad::Tensor scores = ad::matmul(ad::tanh_elem(ad::matmul(nodes, params.pool_proj)), params.pool_vec);  // n x 1
  ad::Tensor weights = ad::row_softmax(ad::transpose(scores));                                          // 1 x n
  return {ad::matmul(weights, nodes), weights};
}

ad::Tensor cross_attend(const ad::Tensor& text, const ad::Tensor& context, const GraphEncoderParams& params,
                        std::size_t heads) {
  const std::size_t d = params.query_proj.cols();
  if (text.cols() != params.query_proj.rows() || context.cols() != params.kv_proj.rows()) {
    throw DimensionError("cross_attend: embedding width does not match the projections");
  }
  if (heads == 0 || d % heads != 0) throw DimensionError("cross_attend: heads must divide the embedding width");
  const std::size_t head_dim = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  ad::Tensor q = ad::matmul(text, params.query_proj);
  ad::Tensor kv = ad::matmul(context, params.kv_proj);
  std::vector<ad::Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    ad::Tensor qh = ad::slice_cols(q, h * head_dim, head_dim);
    ad::Tensor kh = ad::slice_cols(kv, h * head_dim, head_dim);
    ad::Tensor attn = ad::row_softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
    outs.push_back(ad::matmul(attn, kh));
  }
  return ad::matmul(ad::concat_cols(outs), params.out_proj);
}

ad::Tensor fuse_bypass(const ad::Tensor& text, const GraphEncoderParams& params) {
  return ad::layer_norm(text, params.ln_gain, params.ln_bias);
}

FusionResult fuse(const ad::Tensor& text, const ad::Tensor& context, const GraphEncoderParams& params,
                  const GraphConfig& cfg) {
  if (text.rows() != 1) throw DimensionError("fuse: text must be a single row");
  ad::Tensor h = cross_attend(text, context, params, cfg.heads);
  ad::Tensor gated = ad::mul_scalar(ad::tanh_elem(h), gate_alpha(params, cfg.alpha_max));
  return {ad::layer_norm(ad::add(text, gated), params.ln_gain, params.ln_bias), h};
}

FusionResult enhance_text(const ad::Tensor& text, const HeteroGraph& g, const GraphEncoderParams& params,
                          const GraphConfig& cfg) {
  if (g.empty()) return {fuse_bypass(text, params), std::nullopt};
  ad::Tensor nodes = encode_nodes(g, params);
  if (cfg.mode == FusionMode::kNodes) return fuse(text, nodes, params, cfg);
  return fuse(text, attention_pool(nodes, params).pooled, params, cfg);
}

}  // namespace sonoalign::graph
