#include "sonoalign/trainer.hpp"

#include <cmath>

#include "sonoalign/errors.hpp"
#include "sonoalign/prior.hpp"

namespace sonoalign::trainer {

namespace {

objectives::LossTerms batch_loss(const model::ModelState& state, const model::RecordRefs& batch,
                                 const taxonomy::TaxonomyCatalog& catalog) {
  const auto& cfg = state.config;
  const auto fw = model::forward(state, batch, catalog, cfg.graph_enabled());
  const auto emb = objectives::make_batch_embeddings(fw.images, fw.fused_texts);
  const auto obj = cfg.objective_config();
  std::optional<Matrix> prior;
  if (obj.lambda != 0.0) {
    std::vector<taxonomy::TaskLabels> labels;
    labels.reserve(batch.size());
    for (const auto* r : batch) labels.push_back(r->labels);
    prior = prior::prior_matrix(labels, catalog).values;
  }
  auto terms = objectives::total_loss(emb, prior ? &*prior : nullptr, state.log_tau, obj);
  if (!std::isfinite(terms.breakdown.l_total)) {
    throw NumericError("non-finite training loss (op '" + terms.total.op_name() + "')");
  }
  return terms;
}

void accumulate(objectives::LossBreakdown& acc, const objectives::LossBreakdown& b) {
  acc.l_clip += b.l_clip;
  acc.l_mse += b.l_mse;
  acc.l_kl += b.l_kl;
  acc.l_semantic += b.l_semantic;
  acc.l_total += b.l_total;
  acc.tau += b.tau;
}

void divide(objectives::LossBreakdown& acc, double n) {
  acc.l_clip /= n;
  acc.l_mse /= n;
  acc.l_kl /= n;
  acc.l_semantic /= n;
  acc.l_total /= n;
  acc.tau /= n;
}

}  // namespace

objectives::LossBreakdown train_step(model::ModelState& state, const model::RecordRefs& batch,
                                     const taxonomy::TaxonomyCatalog& catalog) {
  if (batch.empty()) throw ArgumentError("train_step: empty batch");
  auto params = state.parameters();
  for (auto& p : params) p.zero_grad();
  ad::Tape tape;
  ad::TapeScope scope(tape);
  const auto terms = batch_loss(state, batch, catalog);
  tape.backward(terms.total);
  optim::adamw_step(params, state.optimizer, state.config.adamw_config());
  return terms.breakdown;
}

objectives::LossBreakdown evaluate_loss(const model::ModelState& state, const model::RecordRefs& batch,
                                        const taxonomy::TaxonomyCatalog& catalog) {
  if (batch.empty()) throw ArgumentError("evaluate_loss: empty batch");
  return batch_loss(state, batch, catalog).breakdown;
}

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json j = {{"type", "epoch"}, {"epoch", epoch}, {"train_loss", train_loss}, {"terms", mean_terms.to_json()}};
  if (val) {
    j["val"] = val->to_json();
    j["val_score"] = val_score;
  }
  return j;
}

std::vector<double> FitReport::train_losses() const {
  std::vector<double> out;
  out.reserve(epochs.size());
  for (const auto& e : epochs) out.push_back(e.train_loss);
  return out;
}

FitReport fit(model::ModelState state, std::span<const dataset::SampleRecord> train,
              std::span<const dataset::SampleRecord> val, const taxonomy::TaxonomyCatalog& catalog, std::ostream* log) {
  if (train.empty()) throw ValidationError("fit: no training records");
  state.config.validate();
  const auto& cfg = state.config;

  auto batches_of = [&](std::size_t epoch) {
    std::vector<model::RecordRefs> out;
    for (const auto& idx : dataset::batch_iter(train.size(), cfg.batch_size, cfg.seed, epoch)) {
      model::RecordRefs b;
      b.reserve(idx.size());
      for (std::size_t i : idx) b.push_back(&train[i]);
      out.push_back(std::move(b));
    }
    return out;
  };
  auto score = [&](EpochRecord& rec, const model::ModelState& s) {
    if (val.empty()) return;
    rec.val = eval::retrieval_eval(s, val, catalog);
    rec.val_score = 0.5 * (rec.val->i2t_at(10) + rec.val->t2i_at(10));
  };

  FitReport report;
  {
    EpochRecord init;
    const auto batches = batches_of(0);
    for (const auto& b : batches) accumulate(init.mean_terms, evaluate_loss(state, b, catalog));
    divide(init.mean_terms, static_cast<double>(batches.size()));
    init.train_loss = init.mean_terms.l_total;
    score(init, state);
    if (log) *log << init.to_json().dump() << '\n';
    report.epochs.push_back(std::move(init));
  }
  report.best = state.clone();
  report.best_epoch = 0;
  double best_score = report.epochs.front().val_score;

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    const auto batches = batches_of(epoch);
    for (const auto& b : batches) {
      const auto terms = train_step(state, b, catalog);
      accumulate(rec.mean_terms, terms);
      if (log) {
        nlohmann::json j = {{"type", "step"}, {"epoch", epoch}, {"step", ++step}, {"batch_size", b.size()}};
        j.update(terms.to_json());
        *log << j.dump() << '\n';
      }
    }
    divide(rec.mean_terms, static_cast<double>(batches.size()));
    rec.train_loss = rec.mean_terms.l_total;
    score(rec, state);
    if (log) *log << rec.to_json().dump() << '\n';
    if (val.empty() || rec.val_score > best_score) {
      best_score = rec.val_score;
      report.best_epoch = epoch;
      report.best = state.clone();
    }
    report.epochs.push_back(std::move(rec));
  }
  report.final = std::move(state);
  return report;
}

model::ModelState initial_state(std::span<const dataset::SampleRecord> train, const model::TrainConfig& config,
                                const taxonomy::TaxonomyCatalog& catalog) {
  if (train.empty()) throw ValidationError("no training records");
  const auto sources = model::vocabulary_sources(train, catalog);
  return model::init_state(config, catalog, encoders::Vocabulary::build(sources), train.front().features.size());
}

FitReport fit(std::span<const dataset::SampleRecord> records, const dataset::SplitAssignment& split,
              const model::TrainConfig& config, const taxonomy::TaxonomyCatalog& catalog, std::ostream* log) {
  const std::vector<dataset::SampleRecord> all(records.begin(), records.end());
  for (const auto& r : all) {
    if (!split.by_case.contains(r.case_id)) throw ValidationError("split does not cover case " + r.case_id);
  }
  const auto train = dataset::select_split(all, split, dataset::Split::kTrain);
  const auto val = dataset::select_split(all, split, dataset::Split::kVal);
  return fit(initial_state(train, config, catalog), train, val, catalog, log);
}

}  // namespace sonoalign::trainer
