#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "sonoalign/errors.hpp"
#include "sonoalign/graph.hpp"

using namespace sonoalign;
using namespace sonoalign::graph;
using ad::Tensor;
using taxonomy::default_catalog;
using taxonomy::TaskLabels;

namespace {

TaskLabels labels_with(std::initializer_list<std::pair<taxonomy::TaskId, taxonomy::LabelSet>> entries) {
  TaskLabels l;
  for (const auto& [id, set] : entries) l[id.index()] = set;
  return l;
}

GraphEncoderParams params_for(const GraphConfig& cfg, std::uint64_t seed = 1) {
  Rng rng(seed);
  return GraphEncoderParams::init(default_catalog().total_labels(), cfg, rng);
}

void set_identity(Tensor& t) { t.mutable_value() = Matrix::identity(t.rows()); }

}  // namespace

TEST_CASE("build_graph products") {
  const auto& cat = default_catalog();
  auto g = build_graph(labels_with({{taxonomy::kDiagnosis, {0}}, {taxonomy::kEchogenicity, {1}}, {taxonomy::kMargins, {0}}}),
                       cat);
  CHECK(g.diag_nodes.size() == 1);
  CHECK(g.attr_nodes.size() == 2);
  CHECK(g.edges.size() == 2);

  g = build_graph(labels_with({{taxonomy::kShape, {0}}, {taxonomy::kEchogenicity, {1}}, {taxonomy::kMargins, {0}}}), cat);
  CHECK(g.diag_nodes.empty());
  CHECK(g.attr_nodes.size() == 3);
  CHECK(g.edges.empty());

  g = build_graph(labels_with({{taxonomy::kDiagnosis, {0, 1}},
                               {taxonomy::kShape, {0}},
                               {taxonomy::kEchogenicity, {1}},
                               {taxonomy::kMargins, {0}}}),
                  cat);
  CHECK(g.edges.size() == 6);
  CHECK(render_text(g, cat).rfind("graph: 2 diagnostic nodes, 3 attribute nodes, 6 edges", 0) == 0);
  CHECK(render_dot(g, cat).find("d1 -- a2;") != std::string::npos);
  CHECK(build_graph(TaskLabels{}, cat).empty());
}

TEST_CASE("edge count equals the product on random draws") {
  const auto& cat = default_catalog();
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    TaskLabels l;
    for (std::size_t k = 0; k < taxonomy::kTaskCount; ++k) {
      const auto n = cat.tasks()[k].labels.size();
      for (std::size_t i = 0; i < n; ++i)
        if (rng.bernoulli(0.2)) l[k].push_back(i);
    }
    const auto g = build_graph(l, cat);
    CHECK(g.edges.size() == g.diag_nodes.size() * g.attr_nodes.size());
  }
}

TEST_CASE("encode_nodes hand oracle") {
  GraphConfig cfg;
  cfg.dim = 4;
  cfg.heads = 2;
  auto p = params_for(cfg);
  const auto& cat = default_catalog();

  SUBCASE("isolated node uses only the self term") {
    const auto g = build_graph(labels_with({{taxonomy::kShape, {2}}}), cat);
    const auto z = encode_nodes(g, p).value();
    const Matrix e = ad::gather_rows(p.node_embedding, std::vector<std::size_t>{g.attr_nodes[0].flat}).value();
    const Matrix expect = ad::tanh_elem(ad::matmul(Tensor::constant(e), p.layers[0].self_attr)).value();
    CHECK(z == expect);
  }
  SUBCASE("identity weights on one edge give tanh(e_d + e_p)") {
    auto& l = p.layers[0];
    set_identity(l.self_diag);
    set_identity(l.self_attr);
    set_identity(l.attr_to_diag);
    set_identity(l.diag_to_attr);
    const auto g = build_graph(labels_with({{taxonomy::kDiagnosis, {1}}, {taxonomy::kMargins, {0}}}), cat);
    const auto z = encode_nodes(g, p).value();
    const Matrix& e = p.node_embedding.value();
    const auto d = g.diag_nodes[0].flat, a = g.attr_nodes[0].flat;
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(z(0, c) == std::tanh(e(d, c) + e(a, c)));
      CHECK(z(1, c) == std::tanh(e(a, c) + e(d, c)));
    }
  }
  SUBCASE("shape and canonical order") {
    const auto g = build_graph(labels_with({{taxonomy::kDiagnosis, {1, 0}},
                                            {taxonomy::kShape, {0}},
                                            {taxonomy::kEchogenicity, {1}},
                                            {taxonomy::kMargins, {0}}}),
                               cat);
    CHECK(encode_nodes(g, p).rows() == 5);
    CHECK(g.diag_nodes[0].label == 0);
    const auto h = build_graph(labels_with({{taxonomy::kMargins, {0}},
                                            {taxonomy::kEchogenicity, {1}},
                                            {taxonomy::kShape, {0}},
                                            {taxonomy::kDiagnosis, {0, 1}}}),
                               cat);
    CHECK(encode_nodes(g, p).value() == encode_nodes(h, p).value());
  }
  CHECK_THROWS_AS(encode_nodes(build_graph(TaskLabels{}, cat), p), ArgumentError);
}

TEST_CASE("attention_pool") {
  GraphConfig cfg;
  cfg.dim = 4;
  cfg.heads = 2;
  auto p = params_for(cfg);
  Rng rng(3);
  const Matrix one = testutil::random_matrix(1, 4, rng);
  CHECK(attention_pool(Tensor::constant(one), p).pooled.value() == one);

  Matrix same(3, 4);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) same(r, c) = one(0, c);
  const auto pooled = attention_pool(Tensor::constant(same), p).pooled.value();
  for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(pooled(0, c) - one(0, c)) < 1e-15);

  const Matrix z = testutil::random_matrix(5, 4, rng);
  const auto res = attention_pool(Tensor::constant(z), p);
  double s = 0.0;
  for (double w : res.weights.value().data()) {
    CHECK(w >= 0.0);
    s += w;
  }
  CHECK(std::abs(s - 1.0) < 1e-12);

  p.pool_vec.mutable_value().fill(0.0);
  const auto uniform = attention_pool(Tensor::constant(z), p).pooled.value();
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < 5; ++r) mean += z(r, c) / 5.0;
    CHECK(std::abs(uniform(0, c) - mean) < 1e-12);
  }
}

TEST_CASE("pooled fusion ignores the text when attending") {
  GraphConfig cfg;
  auto p = params_for(cfg);
  Rng rng(9);
  const Tensor g = Tensor::constant(testutil::random_matrix(1, cfg.dim, rng));
  const Tensor t1 = Tensor::constant(testutil::random_matrix(1, cfg.dim, rng));
  Matrix t2m = t1.value();
  t2m(0, 3) += 0.75;
  const Tensor t2 = Tensor::constant(t2m);
  const auto h1 = cross_attend(t1, g, p, cfg.heads).value();
  const auto h2 = cross_attend(t2, g, p, cfg.heads).value();
  CHECK(h1 == h2);
  const auto f = fuse(t1, g, p, cfg);
  REQUIRE(f.attended.has_value());
  CHECK(f.attended->value() == h1);
}

TEST_CASE("nodes mode depends on the text") {
  GraphConfig cfg;
  cfg.mode = FusionMode::kNodes;
  auto p = params_for(cfg);
  Rng rng(10);
  const Tensor z = Tensor::constant(testutil::random_matrix(3, cfg.dim, rng));
  const Tensor t1 = Tensor::constant(testutil::random_matrix(1, cfg.dim, rng));
  const Tensor t2 = Tensor::constant(testutil::random_matrix(1, cfg.dim, rng));
  CHECK_FALSE(cross_attend(t1, z, p, cfg.heads).value() == cross_attend(t2, z, p, cfg.heads).value());
}

TEST_CASE("gate range and closure") {
  GraphConfig cfg;
  auto p = params_for(cfg);
  CHECK(gate_alpha(p, cfg.alpha_max).item() == 0.1);
  for (double a : {-30.0, -3.0, 0.0, 3.0, 30.0}) {
    p.gate.mutable_value()(0, 0) = a;
    const double alpha = gate_alpha(p, cfg.alpha_max).item();
    CHECK(alpha > 0.0);
    CHECK(alpha < 0.2);
  }
  p.gate.mutable_value()(0, 0) = -40.0;
  Rng rng(12);
  const Tensor t = Tensor::constant(testutil::random_matrix(1, cfg.dim, rng));
  const Tensor g = Tensor::constant(testutil::random_matrix(1, cfg.dim, rng));
  const auto fused = fuse(t, g, p, cfg).fused.value();
  const auto ln = fuse_bypass(t, p).value();
  for (std::size_t c = 0; c < cfg.dim; ++c) CHECK(std::abs(fused(0, c) - ln(0, c)) < 1e-12);
}

TEST_CASE("empty graph takes the bypass exactly") {
  GraphConfig cfg;
  auto p = params_for(cfg);
  Rng rng(13);
  const Tensor t = Tensor::constant(testutil::random_matrix(1, cfg.dim, rng));
  const auto res = enhance_text(t, build_graph(TaskLabels{}, default_catalog()), p, cfg);
  CHECK_FALSE(res.attended.has_value());
  CHECK(res.fused.value() == ad::layer_norm(t, p.ln_gain, p.ln_bias).value());
}

TEST_CASE("fusion gradients against finite differences") {
  for (FusionMode mode : {FusionMode::kPooled, FusionMode::kNodes}) {
    GraphConfig cfg;
    cfg.dim = 8;
    cfg.pool_dim = 6;
    cfg.heads = 2;
    cfg.mode = mode;
    auto p = params_for(cfg, 5);
    p.gate.mutable_value()(0, 0) = 0.3;
    Rng rng(14);
    Tensor t = testutil::random_param(1, cfg.dim, rng);
    const Matrix w = testutil::random_matrix(1, cfg.dim, rng);
    const auto g = build_graph(labels_with({{taxonomy::kDiagnosis, {0, 2}},
                                            {taxonomy::kShape, {1}},
                                            {taxonomy::kVascularity, {3}}}),
                               default_catalog());
    std::vector<ad::NamedParam> params{{"t", t},
                                       {"node_embedding", p.node_embedding},
                                       {"self_diag", p.layers[0].self_diag},
                                       {"self_attr", p.layers[0].self_attr},
                                       {"attr_to_diag", p.layers[0].attr_to_diag},
                                       {"diag_to_attr", p.layers[0].diag_to_attr},
                                       {"pool_proj", p.pool_proj},
                                       {"pool_vec", p.pool_vec},
                                       {"query_proj", p.query_proj},
                                       {"kv_proj", p.kv_proj},
                                       {"out_proj", p.out_proj},
                                       {"gate", p.gate},
                                       {"ln_gain", p.ln_gain},
                                       {"ln_bias", p.ln_bias}};
    const auto rep =
        ad::grad_check([&] { return testutil::weighted_sum(enhance_text(t, g, p, cfg).fused, w); }, params);
    CHECK_MESSAGE(rep.passed, to_string(mode), " worst ", rep.worst.param, " rel ", rep.max_rel_error);
  }
}

TEST_CASE("graph config validation") {
  GraphConfig cfg;
  cfg.heads = 3;
  Rng rng(0);
  CHECK_THROWS_AS(GraphEncoderParams::init(10, cfg, rng), ValidationError);
  CHECK(fusion_mode_from_string("nodes") == FusionMode::kNodes);
  CHECK_THROWS_AS(fusion_mode_from_string("x"), ValidationError);
}
