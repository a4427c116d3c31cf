#pragma once

// AdamW training loop: forward, prior, loss, backward, update; plus the
// epoch driver with validation-based model selection.

#include <cstddef>
#include <optional>
#include <ostream>
#include <vector>

#include "json.hpp"
#include "sonoalign/dataset.hpp"
#include "sonoalign/eval.hpp"
#include "sonoalign/model.hpp"
#include "sonoalign/objectives.hpp"
#include "sonoalign/taxonomy.hpp"

namespace sonoalign::trainer {

// One optimization step on `batch`. Throws NumericError (naming the failing
// op) when the forward pass or the loss becomes non-finite; the state is not
// updated in that case.
objectives::LossBreakdown train_step(model::ModelState& state, const model::RecordRefs& batch,
                                     const taxonomy::TaxonomyCatalog& catalog);

// Loss of `batch` under the current parameters without updating them.
objectives::LossBreakdown evaluate_loss(const model::ModelState& state, const model::RecordRefs& batch,
                                        const taxonomy::TaxonomyCatalog& catalog);

struct EpochRecord {
  std::size_t epoch = 0;   // 0 = initialization, before any update
  double train_loss = 0.0; // mean total loss over the epoch's batches
  objectives::LossBreakdown mean_terms;
  std::optional<eval::RetrievalReport> val;
  double val_score = 0.0;  // mean of I2T and T2I R@10 on validation

  nlohmann::json to_json() const;
};

struct FitReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  model::ModelState best;   // state at best_epoch
  model::ModelState final;  // state after the last epoch

  std::vector<double> train_losses() const;
};

// Trains `state` for state.config.epochs epochs on `train`, scoring `val`
// after every epoch (and at initialization). The best epoch is the first one
// reaching the highest validation score; an empty `val` selects the last
// epoch. When `log` is given, one JSON line is written per step and per epoch.
FitReport fit(model::ModelState state, std::span<const dataset::SampleRecord> train,
              std::span<const dataset::SampleRecord> val, const taxonomy::TaxonomyCatalog& catalog,
              std::ostream* log = nullptr);

// Convenience: splits `records` by `split`, builds the vocabulary from the
// training captions plus all prompts and initializes from `config`.
FitReport fit(std::span<const dataset::SampleRecord> records, const dataset::SplitAssignment& split,
              const model::TrainConfig& config, const taxonomy::TaxonomyCatalog& catalog,
              std::ostream* log = nullptr);

model::ModelState initial_state(std::span<const dataset::SampleRecord> train, const model::TrainConfig& config,
                                const taxonomy::TaxonomyCatalog& catalog);

}  // namespace sonoalign::trainer
