#pragma once

// Zero-shot classification, linear probing, image-text retrieval and
// embedding export over a frozen model.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sonoalign/dataset.hpp"
#include "sonoalign/matrix.hpp"
#include "sonoalign/model.hpp"
#include "sonoalign/taxonomy.hpp"

namespace sonoalign::eval {

struct Embeddings {
  Matrix images;  // raw image embeddings
  Matrix texts;   // raw text embeddings t
  Matrix fused;   // t after fusion (bypass when the model runs without graph)
};

// Runs the forward pass without recording, in chunks of `chunk` records.
Embeddings embed(const model::ModelState& state, std::span<const dataset::SampleRecord> records,
                 const taxonomy::TaxonomyCatalog& catalog, std::size_t chunk = 256);

// Copy of `m` with every row scaled to unit length (zero rows stay zero).
Matrix normalize_rows(const Matrix& m);

// One prompt per vocabulary label of every task.
struct PromptSet {
  std::array<std::vector<std::string>, taxonomy::kTaskCount> prompts;

  static PromptSet from_catalog(const taxonomy::TaxonomyCatalog& catalog);
  const std::vector<std::string>& of(taxonomy::TaskId id) const { return prompts[id.index()]; }
  // Throws ValidationError unless each task has exactly one prompt per label.
  void validate(const taxonomy::TaxonomyCatalog& catalog) const;
};

struct ZeroShotOptions {
  // Encode each prompt with a one-node graph of its own label instead of the
  // fusion bypass.
  bool singleton_graph_prompts = false;
};

// Unit-norm prompt embeddings for one task, one row per label.
Matrix prompt_embeddings(const model::ModelState& state, const taxonomy::TaxonomyCatalog& catalog,
                         const PromptSet& prompts, taxonomy::TaskId task, const ZeroShotOptions& opts = {});

// Index of the row of `prompts_unit` with the largest dot product against
// `image`; ties go to the lowest index.
std::size_t predict(std::span<const double> image, const Matrix& prompts_unit);

// Mean over classes present in the truth sets of per-class recall. A truth
// instance of class c counts as recalled when the prediction equals c.
// Returns 0 when no class is present.
double macro_recall(std::span<const std::size_t> predictions, std::span<const taxonomy::LabelSet> truth,
                    std::size_t n_classes);

struct TaskMetrics {
  taxonomy::TaskId task;
  std::size_t n_eval = 0;  // samples carrying labels for the task
  bool skipped = true;     // no labeled samples
  double accuracy = 0.0;
  double macro_recall = 0.0;

  nlohmann::json to_json() const;
};

// Scores single predictions against label sets: correct when the prediction
// is in the set. Samples with an empty set are ignored.
TaskMetrics score_predictions(taxonomy::TaskId task, std::span<const std::size_t> predictions,
                              std::span<const taxonomy::LabelSet> truth, std::size_t n_classes);

struct ZeroShotResult {
  std::vector<std::size_t> predictions;  // one per record
  TaskMetrics metrics;
};

ZeroShotResult zero_shot_from_embeddings(const Matrix& images, std::span<const dataset::SampleRecord> records,
                                         const Matrix& prompts_unit, taxonomy::TaskId task);
ZeroShotResult zero_shot_classify(const model::ModelState& state, std::span<const dataset::SampleRecord> records,
                                  const taxonomy::TaxonomyCatalog& catalog, const PromptSet& prompts,
                                  taxonomy::TaskId task, const ZeroShotOptions& opts = {});

inline const std::vector<std::size_t> kDefaultKs{5, 10, 50};

struct RetrievalReport {
  std::size_t n = 0;
  std::vector<std::size_t> ks;
  std::vector<double> i2t;  // R@K per entry of ks
  std::vector<double> t2i;

  double i2t_at(std::size_t k) const;
  double t2i_at(std::size_t k) const;
  nlohmann::json to_json() const;
};

// Query i is paired with candidate i. Candidates are ranked by cosine,
// descending, ties broken by lower index.
RetrievalReport retrieval_from_embeddings(const Matrix& images, const Matrix& texts,
                                          const std::vector<std::size_t>& ks = kDefaultKs);
RetrievalReport retrieval_eval(const model::ModelState& state, std::span<const dataset::SampleRecord> records,
                               const taxonomy::TaxonomyCatalog& catalog,
                               const std::vector<std::size_t>& ks = kDefaultKs);

struct LinearProbeConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr = 1e-2;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

// Softmax classifier on frozen unit image embeddings; multi-label training
// samples use their lowest label index as target.
TaskMetrics linear_probe_from_embeddings(const Matrix& train_images, std::span<const taxonomy::LabelSet> train_truth,
                                         const Matrix& eval_images, std::span<const taxonomy::LabelSet> eval_truth,
                                         taxonomy::TaskId task, std::size_t n_classes, const LinearProbeConfig& cfg);
TaskMetrics linear_probe(const model::ModelState& state, std::span<const dataset::SampleRecord> train,
                         std::span<const dataset::SampleRecord> eval_records, const taxonomy::TaxonomyCatalog& catalog,
                         taxonomy::TaskId task, const LinearProbeConfig& cfg);

struct MetricReport {
  std::string split;
  std::size_t n_records = 0;
  std::vector<TaskMetrics> tasks;  // T1..T9
  RetrievalReport retrieval;

  nlohmann::json to_json() const;
  // Aligned-column tables: per-task Acc/Recall, then retrieval R@K.
  std::string to_text(const taxonomy::TaxonomyCatalog& catalog) const;
};

MetricReport evaluate(const model::ModelState& state, std::span<const dataset::SampleRecord> records,
                      const taxonomy::TaxonomyCatalog& catalog, const std::string& split_name,
                      const ZeroShotOptions& opts = {});

// CSV: image_id, case_id, t3_labels, img_*, text_*, fused_* with 17
// significant digits.
void write_embeddings_csv(std::ostream& out, std::span<const dataset::SampleRecord> records,
                          const Embeddings& emb, const taxonomy::TaxonomyCatalog& catalog);
void export_embeddings(const model::ModelState& state, std::span<const dataset::SampleRecord> records,
                       const taxonomy::TaxonomyCatalog& catalog, const std::filesystem::path& path);

}  // namespace sonoalign::eval
