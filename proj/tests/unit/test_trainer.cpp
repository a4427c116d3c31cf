#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "sonoalign/errors.hpp"
#include "sonoalign/optimizer.hpp"
#include "sonoalign/trainer.hpp"

using namespace sonoalign;
using ad::Tensor;
using taxonomy::default_catalog;

namespace {

model::TrainConfig tiny_config() {
  model::TrainConfig cfg;
  cfg.dim = 8;
  cfg.token_dim = 8;
  cfg.hidden = 12;
  cfg.pool_dim = 8;
  cfg.heads = 2;
  cfg.batch_size = 8;
  cfg.epochs = 3;
  cfg.seed = 5;
  return cfg;
}

model::ModelState tiny_state(const std::vector<dataset::SampleRecord>& recs, model::TrainConfig cfg = tiny_config()) {
  return trainer::initial_state(recs, cfg, default_catalog());
}

bool same_parameters(const model::ModelState& a, const model::ModelState& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!(pa[i].value() == pb[i].value())) return false;
  return true;
}

}  // namespace

TEST_CASE("AdamW matches a scalar oracle on a quadratic") {
  for (double wd : {0.0, 0.05}) {
    const optim::AdamWConfig cfg{0.1, 0.9, 0.999, 1e-8, wd};
    Tensor w = Tensor::parameter(Matrix(1, 1, 0.0));
    std::vector<Tensor> params{w};
    auto state = optim::make_adamw_state(params);
    double ow = 0.0, om = 0.0, ov = 0.0;
    for (int t = 1; t <= 25; ++t) {
      w.zero_grad();
      ad::Tape tape;
      {
        ad::TapeScope scope(tape);
        const Tensor d = ad::sub(w, Tensor::scalar(3.0));
        tape.backward(ad::hadamard(d, d));
      }
      optim::adamw_step(params, state, cfg);

      const double g = 2.0 * (ow - 3.0);
      ow *= 1.0 - cfg.lr * wd;
      om = 0.9 * om + (1.0 - 0.9) * g;
      ov = 0.999 * ov + (1.0 - 0.999) * g * g;
      const double mhat = om / (1.0 - std::pow(0.9, t));
      const double vhat = ov / (1.0 - std::pow(0.999, t));
      ow -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
      CHECK(w.item() == ow);
    }
    CHECK(state.step == 25);
  }
}

TEST_CASE("AdamW skips parameters without gradients") {
  Tensor a = Tensor::parameter(Matrix(1, 1, 1.0));
  std::vector<Tensor> params{a};
  auto state = optim::make_adamw_state(params);
  optim::adamw_step(params, state, {0.1, 0.9, 0.999, 1e-8, 0.5});
  CHECK(a.item() == 1.0);
}

TEST_CASE("init_state") {
  const auto recs = testutil::small_corpus(6);
  const auto a = tiny_state(recs);
  const auto b = tiny_state(recs);
  CHECK(same_parameters(a, b));
  CHECK(std::abs(objectives::temperature(a.log_tau).item() - 0.07) <= 1e-15);
  CHECK(std::abs(graph::gate_alpha(a.graph, a.config.alpha_max).item() - 0.1) <= 1e-15);
  CHECK(a.graph.ln_gain.value() == Matrix(1, 8, 1.0));
  CHECK(a.graph.ln_bias.value() == Matrix(1, 8, 0.0));
  CHECK(a.image.b1.value() == Matrix(1, 12, 0.0));
  const double s = std::sqrt(6.0 / (32.0 + 12.0));
  for (double v : a.image.w1.value().data()) CHECK(std::abs(v) <= s);
  for (std::size_t k = 0; k < a.optimizer.first.size(); ++k)
    CHECK(a.optimizer.first[k].same_shape(a.parameters()[k].value()));

  auto c = a.clone();
  c.image.w1.mutable_value()(0, 0) += 1.0;
  CHECK_FALSE(same_parameters(a, c));
}

TEST_CASE("TrainConfig JSON") {
  const auto cfg = tiny_config();
  CHECK(model::TrainConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  auto j = cfg.to_json();
  j["lerning_rate"] = 1;
  CHECK_THROWS_AS(model::TrainConfig::from_json(j), ValidationError);
  j = cfg.to_json();
  j["ablation"] = "nope";
  CHECK_THROWS_AS(model::TrainConfig::from_json(j), ValidationError);
  j = cfg.to_json();
  j["heads"] = 3;
  CHECK_THROWS_AS(model::TrainConfig::from_json(j), ValidationError);
  j = cfg.to_json();
  j["batch_size"] = 0;
  CHECK_THROWS_AS(model::TrainConfig::from_json(j), ValidationError);

  model::TrainConfig abl;
  abl.ablation = model::Ablation::kNoSemantic;
  CHECK(abl.graph_enabled());
  CHECK_FALSE(abl.semantic_enabled());
  CHECK(abl.objective_config().lambda == 0.0);
  abl.ablation = model::Ablation::kNoGraph;
  CHECK_FALSE(abl.graph_enabled());
  CHECK(abl.semantic_enabled());
  abl.ablation = model::Ablation::kNeither;
  CHECK_FALSE(abl.graph_enabled());
  CHECK_FALSE(abl.semantic_enabled());
  CHECK(model::ablation_from_string("Dsg") == model::Ablation::kNeither);
}

TEST_CASE("train_step") {
  const auto& cat = default_catalog();
  const auto recs = testutil::small_corpus(6);

  SUBCASE("lr = 0 leaves parameters bitwise unchanged") {
    auto cfg = tiny_config();
    cfg.lr = 0.0;
    auto s = tiny_state(recs, cfg);
    const auto before = s.clone();
    trainer::train_step(s, model::refs(recs), cat);
    CHECK(same_parameters(s, before));
    CHECK(s.optimizer.step == 1);
  }
  SUBCASE("repeated steps on one batch reduce the loss") {
    auto cfg = tiny_config();
    cfg.lr = 5e-3;
    auto s = tiny_state(recs, cfg);
    std::vector<dataset::SampleRecord> batch;
    for (std::size_t i = 0; i < recs.size(); i += 3) batch.push_back(recs[i]);
    batch.resize(4);
    const auto refs = model::refs(batch);
    double prev = trainer::evaluate_loss(s, refs, cat).l_total;
    const double first = prev;
    for (int step = 0; step < 20; ++step) trainer::train_step(s, refs, cat);
    const double last = trainer::evaluate_loss(s, refs, cat).l_total;
    CHECK(last < first);
    for (int step = 0; step < 20; ++step) {
      trainer::train_step(s, refs, cat);
      const double now = trainer::evaluate_loss(s, refs, cat).l_total;
      CHECK(now < prev);
      prev = now;
    }
  }
  SUBCASE("Dsg uses no semantic loss and bypasses fusion") {
    auto cfg = tiny_config();
    cfg.ablation = model::Ablation::kNeither;
    auto s = tiny_state(recs, cfg);
    const auto refs = model::refs(recs);
    const auto b = trainer::train_step(s, refs, cat);
    CHECK(b.l_semantic == 0.0);
    CHECK(b.l_total == b.l_clip);
    const auto fw = model::forward(s, refs, cat, s.config.graph_enabled());
    CHECK(fw.fused_texts.value() == ad::layer_norm(fw.texts, s.graph.ln_gain, s.graph.ln_bias).value());
    CHECK(s.graph.node_embedding.grad() == nullptr);
  }
  CHECK_THROWS_AS([&] {
    auto s = tiny_state(recs);
    trainer::train_step(s, {}, cat);
  }(), ArgumentError);
}

TEST_CASE("fit") {
  const auto& cat = default_catalog();
  const auto recs = testutil::small_corpus(12);
  std::vector<std::string> cases;
  for (const auto& r : recs) cases.push_back(r.case_id);
  const auto split = dataset::split_cases(cases, dataset::kDefaultRatios, 1);
  auto cfg = tiny_config();
  cfg.lr = 1e-2;

  std::ostringstream log1, log2;
  const auto a = trainer::fit(recs, split, cfg, cat, &log1);
  const auto b = trainer::fit(recs, split, cfg, cat, &log2);
  CHECK(a.train_losses() == b.train_losses());
  CHECK(log1.str() == log2.str());
  CHECK(a.epochs.size() == cfg.epochs + 1);
  CHECK(a.epochs.back().train_loss < a.epochs.front().train_loss);
  CHECK(a.epochs.front().val.has_value());
  CHECK(model::checkpoint_to_json(a.best) == model::checkpoint_to_json(b.best));

  std::istringstream lines(log1.str());
  std::string line;
  std::size_t steps = 0, epochs = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.at("type") == "step") ++steps;
    if (j.at("type") == "epoch") ++epochs;
  }
  CHECK(epochs == cfg.epochs + 1);
  CHECK(steps > 0);

  cfg.epochs = 0;
  const auto z = trainer::fit(recs, split, cfg, cat);
  CHECK(z.epochs.size() == 1);
  CHECK(z.best_epoch == 0);
  CHECK(same_parameters(z.best, trainer::initial_state(dataset::select_split(recs, split, dataset::Split::kTrain),
                                                       cfg, cat)));

  dataset::SplitAssignment partial = split;
  partial.by_case.erase(partial.by_case.begin());
  CHECK_THROWS_AS(trainer::fit(recs, partial, cfg, cat), ValidationError);
}

TEST_CASE("checkpoint round trip") {
  const auto& cat = default_catalog();
  const auto recs = testutil::small_corpus(6);
  auto s = tiny_state(recs);
  trainer::train_step(s, model::refs(recs), cat);
  const auto dir = std::filesystem::temp_directory_path();
  const auto p1 = dir / "sonoalign_ck1.json", p2 = dir / "sonoalign_ck2.json";
  model::save_checkpoint(s, p1);
  const auto loaded = model::load_checkpoint(p1, cat);
  model::save_checkpoint(loaded, p2);
  CHECK(model::file_hash(p1) == model::file_hash(p2));
  CHECK(same_parameters(s, loaded));
  CHECK(loaded.vocab == s.vocab);
  CHECK(loaded.optimizer.step == s.optimizer.step);
  CHECK(loaded.optimizer.second == s.optimizer.second);
  CHECK(eval::retrieval_eval(s, recs, cat).to_json() == eval::retrieval_eval(loaded, recs, cat).to_json());

  auto doc = model::checkpoint_to_json(s);
  doc["format_version"] = model::kCheckpointVersion + 1;
  CHECK_THROWS_AS(model::checkpoint_from_json(doc, cat), VersionError);
  doc = model::checkpoint_to_json(s);
  doc["parameters"][0]["data"] = "zz";
  CHECK_THROWS_AS(model::checkpoint_from_json(doc, cat), ValidationError);
  std::ofstream(p2) << "{truncated";
  CHECK_THROWS_AS(model::load_checkpoint(p2, cat), ValidationError);
  CHECK_THROWS_AS(model::load_checkpoint(dir / "sonoalign_missing.json", cat), IoError);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}
