#include "sonoalign/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "sonoalign/errors.hpp"
#include "sonoalign/init.hpp"
#include "sonoalign/optimizer.hpp"
#include "sonoalign/rng.hpp"

namespace sonoalign::eval {

using taxonomy::LabelSet;
using taxonomy::TaskId;

Embeddings embed(const model::ModelState& state, std::span<const dataset::SampleRecord> records,
                 const taxonomy::TaxonomyCatalog& catalog, std::size_t chunk) {
  if (records.empty()) throw ArgumentError("embed: no records");
  if (chunk == 0) throw ArgumentError("embed: chunk size must be positive");
  const std::size_t d = state.config.dim;
  Embeddings out{Matrix(records.size(), d), Matrix(records.size(), d), Matrix(records.size(), d)};
  const bool use_graph = state.config.graph_enabled();
  for (std::size_t begin = 0; begin < records.size(); begin += chunk) {
    const auto part = records.subspan(begin, std::min(chunk, records.size() - begin));
    const auto fw = model::forward(state, model::refs(part), catalog, use_graph);
    for (std::size_t i = 0; i < part.size(); ++i) {
      std::copy_n(fw.images.value().row(i).begin(), d, out.images.row(begin + i).begin());
      std::copy_n(fw.texts.value().row(i).begin(), d, out.texts.row(begin + i).begin());
      std::copy_n(fw.fused_texts.value().row(i).begin(), d, out.fused.row(begin + i).begin());
    }
  }
  return out;
}

Matrix normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double sq = 0.0;
    for (double v : m.row(r)) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm == 0.0) continue;
    for (double& v : out.row(r)) v /= norm;
  }
  return out;
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

bool contains(const LabelSet& s, std::size_t v) { return std::binary_search(s.begin(), s.end(), v); }

std::vector<LabelSet> truth_sets(std::span<const dataset::SampleRecord> records, TaskId task) {
  std::vector<LabelSet> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.labels[task.index()]);
  return out;
}

}  // namespace

// ---- zero-shot ------------------------------------------------------------------

PromptSet PromptSet::from_catalog(const taxonomy::TaxonomyCatalog& catalog) {
  PromptSet p;
  for (const auto& t : catalog.tasks()) p.prompts[t.id.index()] = t.prompts;
  return p;
}

void PromptSet::validate(const taxonomy::TaxonomyCatalog& catalog) const {
  for (const auto& t : catalog.tasks()) {
    if (prompts[t.id.index()].size() != t.labels.size()) {
      throw ValidationError("prompt set for " + t.id.str() + " has " + std::to_string(prompts[t.id.index()].size()) +
                            " prompts for " + std::to_string(t.labels.size()) + " labels");
    }
  }
}

Matrix prompt_embeddings(const model::ModelState& state, const taxonomy::TaxonomyCatalog& catalog,
                         const PromptSet& prompts, TaskId task, const ZeroShotOptions& opts) {
  prompts.validate(catalog);
  const auto& texts = prompts.of(task);
  std::vector<std::vector<std::size_t>> bags;
  bags.reserve(texts.size());
  for (const auto& t : texts) bags.push_back(state.vocab.tokenize(t));
  const ad::Tensor raw = encoders::encode_texts(bags, state.text);
  Matrix fused(texts.size(), state.config.dim);
  if (!opts.singleton_graph_prompts) {
    fused = graph::fuse_bypass(raw, state.graph).value();
  } else {
    const auto gcfg = state.config.graph_config();
    for (std::size_t l = 0; l < texts.size(); ++l) {
      taxonomy::TaskLabels labels;
      labels[task.index()] = {l};
      const auto g = graph::build_graph(labels, catalog);
      const auto row = graph::enhance_text(ad::slice_rows(raw, l, 1), g, state.graph, gcfg).fused.value();
      std::copy(row.data().begin(), row.data().end(), fused.row(l).begin());
    }
  }
  return normalize_rows(fused);
}

std::size_t predict(std::span<const double> image, const Matrix& prompts_unit) {
  if (prompts_unit.rows() == 0) throw ArgumentError("predict: no prompts");
  if (prompts_unit.cols() != image.size()) throw DimensionError("predict: embedding width mismatch");
  std::size_t best = 0;
  double best_score = dot(image, prompts_unit.row(0));
  for (std::size_t l = 1; l < prompts_unit.rows(); ++l) {
    const double s = dot(image, prompts_unit.row(l));
    if (s > best_score) {
      best = l;
      best_score = s;
    }
  }
  return best;
}

double macro_recall(std::span<const std::size_t> predictions, std::span<const LabelSet> truth, std::size_t n_classes) {
  if (n_classes < 1) throw ArgumentError("macro_recall: n_classes must be at least 1");
  if (predictions.size() != truth.size()) throw DimensionError("macro_recall: predictions and truth differ in length");
  std::vector<std::size_t> support(n_classes, 0), hits(n_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (std::size_t c : truth[i]) {
      if (c >= n_classes) throw ArgumentError("macro_recall: class index out of range");
      ++support[c];
      if (predictions[i] == c) ++hits[c];
    }
  }
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (support[c] == 0) continue;
    total += static_cast<double>(hits[c]) / static_cast<double>(support[c]);
    ++present;
  }
  return present == 0 ? 0.0 : total / static_cast<double>(present);
}

nlohmann::json TaskMetrics::to_json() const {
  nlohmann::json j = {{"task", task.str()}, {"n_eval", n_eval}, {"skipped", skipped}};
  if (!skipped) {
    j["accuracy"] = accuracy;
    j["macro_recall"] = macro_recall;
  }
  return j;
}

TaskMetrics score_predictions(TaskId task, std::span<const std::size_t> predictions, std::span<const LabelSet> truth,
                              std::size_t n_classes) {
  if (predictions.size() != truth.size()) throw DimensionError("score_predictions: length mismatch");
  TaskMetrics m;
  m.task = task;
  std::vector<std::size_t> preds;
  std::vector<LabelSet> sets;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i].empty()) continue;
    preds.push_back(predictions[i]);
    sets.push_back(truth[i]);
    if (contains(truth[i], predictions[i])) ++correct;
  }
  m.n_eval = sets.size();
  m.skipped = sets.empty();
  if (!m.skipped) {
    m.accuracy = static_cast<double>(correct) / static_cast<double>(m.n_eval);
    m.macro_recall = macro_recall(preds, sets, n_classes);
  }
  return m;
}

ZeroShotResult zero_shot_from_embeddings(const Matrix& images, std::span<const dataset::SampleRecord> records,
                                         const Matrix& prompts_unit, TaskId task) {
  if (images.rows() != records.size()) throw DimensionError("zero_shot: one image embedding per record expected");
  ZeroShotResult res;
  res.predictions.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) res.predictions.push_back(predict(images.row(i), prompts_unit));
  const auto truth = truth_sets(records, task);
  res.metrics = score_predictions(task, res.predictions, truth, prompts_unit.rows());
  return res;
}

ZeroShotResult zero_shot_classify(const model::ModelState& state, std::span<const dataset::SampleRecord> records,
                                  const taxonomy::TaxonomyCatalog& catalog, const PromptSet& prompts, TaskId task,
                                  const ZeroShotOptions& opts) {
  const auto emb = embed(state, records, catalog);
  return zero_shot_from_embeddings(emb.images, records, prompt_embeddings(state, catalog, prompts, task, opts), task);
}

// ---- retrieval --------------------------------------------------------------------

namespace {

std::size_t k_index(const std::vector<std::size_t>& ks, std::size_t k) {
  const auto it = std::find(ks.begin(), ks.end(), k);
  if (it == ks.end()) throw ArgumentError("R@" + std::to_string(k) + " was not computed");
  return static_cast<std::size_t>(it - ks.begin());
}

// 1-based rank of candidate `query` in `scores` under descending score,
// lower index first on ties.
std::size_t paired_rank(std::span<const double> scores, std::size_t query) {
  const double s = scores[query];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > s || (scores[j] == s && j < query)) ++rank;
  }
  return rank;
}

}  // namespace

double RetrievalReport::i2t_at(std::size_t k) const { return i2t.at(k_index(ks, k)); }
double RetrievalReport::t2i_at(std::size_t k) const { return t2i.at(k_index(ks, k)); }

nlohmann::json RetrievalReport::to_json() const {
  nlohmann::json i = nlohmann::json::object(), t = nlohmann::json::object();
  for (std::size_t n_k = 0; n_k < ks.size(); ++n_k) {
    i["R@" + std::to_string(ks[n_k])] = i2t[n_k];
    t["R@" + std::to_string(ks[n_k])] = t2i[n_k];
  }
  return {{"n", n}, {"i2t", i}, {"t2i", t}};
}

RetrievalReport retrieval_from_embeddings(const Matrix& images, const Matrix& texts, const std::vector<std::size_t>& ks) {
  if (images.rows() == 0) throw ArgumentError("retrieval: empty record list");
  if (!images.same_shape(texts)) throw DimensionError("retrieval: image and text embeddings differ in shape");
  for (std::size_t k : ks) {
    if (k == 0) throw ArgumentError("retrieval: K must be positive");
  }
  const std::size_t n = images.rows();
  const Matrix a = normalize_rows(images);
  const Matrix b = normalize_rows(texts);
  Matrix sim(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sim(i, j) = dot(a.row(i), b.row(j));

  std::vector<std::size_t> rank_i2t(n), rank_t2i(n);
  std::vector<double> column(n);
  for (std::size_t i = 0; i < n; ++i) {
    rank_i2t[i] = paired_rank(sim.row(i), i);
    for (std::size_t j = 0; j < n; ++j) column[j] = sim(j, i);
    rank_t2i[i] = paired_rank(column, i);
  }
  RetrievalReport r;
  r.n = n;
  r.ks = ks;
  for (std::size_t k : ks) {
    const auto hits_i = std::count_if(rank_i2t.begin(), rank_i2t.end(), [k](std::size_t rk) { return rk <= k; });
    const auto hits_t = std::count_if(rank_t2i.begin(), rank_t2i.end(), [k](std::size_t rk) { return rk <= k; });
    r.i2t.push_back(static_cast<double>(hits_i) / static_cast<double>(n));
    r.t2i.push_back(static_cast<double>(hits_t) / static_cast<double>(n));
  }
  return r;
}

RetrievalReport retrieval_eval(const model::ModelState& state, std::span<const dataset::SampleRecord> records,
                               const taxonomy::TaxonomyCatalog& catalog, const std::vector<std::size_t>& ks) {
  if (records.empty()) throw ArgumentError("retrieval: empty record list");
  const auto emb = embed(state, records, catalog);
  return retrieval_from_embeddings(emb.images, emb.fused, ks);
}

// ---- linear probe -------------------------------------------------------------------

TaskMetrics linear_probe_from_embeddings(const Matrix& train_images, std::span<const LabelSet> train_truth,
                                         const Matrix& eval_images, std::span<const LabelSet> eval_truth, TaskId task,
                                         std::size_t n_classes, const LinearProbeConfig& cfg) {
  if (train_images.rows() != train_truth.size() || eval_images.rows() != eval_truth.size()) {
    throw DimensionError("linear_probe: one label set per embedding expected");
  }
  if (train_images.cols() != eval_images.cols()) throw DimensionError("linear_probe: embedding width mismatch");
  if (cfg.batch_size == 0) throw ArgumentError("linear_probe: batch_size must be positive");

  std::vector<std::size_t> rows, targets;
  for (std::size_t i = 0; i < train_truth.size(); ++i) {
    if (train_truth[i].empty()) continue;
    rows.push_back(i);
    targets.push_back(train_truth[i].front());
  }
  if (rows.empty()) throw ValidationError("linear_probe: task " + task.str() + " is absent from the training records");

  const Matrix train_unit = normalize_rows(train_images);
  const std::size_t d = train_images.cols();
  Rng rng(cfg.seed);
  std::vector<ad::Tensor> params{ad::Tensor::parameter(glorot_uniform(d, n_classes, rng)),
                                 ad::Tensor::parameter(Matrix(1, n_classes))};
  auto state = optim::make_adamw_state(params);
  const optim::AdamWConfig opt{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : dataset::batch_iter(rows.size(), cfg.batch_size, cfg.seed, epoch)) {
      Matrix x(batch.size(), d), onehot(batch.size(), n_classes);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto src = train_unit.row(rows[batch[b]]);
        std::copy(src.begin(), src.end(), x.row(b).begin());
        onehot(b, targets[batch[b]]) = 1.0;
      }
      for (auto& p : params) p.zero_grad();
      ad::Tape tape;
      ad::TapeScope scope(tape);
      const auto logits = ad::add_row(ad::matmul(ad::Tensor::constant(std::move(x)), params[0]), params[1]);
      const auto nll = ad::scale(ad::sum(ad::hadamard(ad::row_log_softmax(logits), ad::Tensor::constant(onehot))),
                                 -1.0 / static_cast<double>(batch.size()));
      tape.backward(nll);
      optim::adamw_step(params, state, opt);
    }
  }

  const Matrix eval_unit = normalize_rows(eval_images);
  const Matrix& w = params[0].value();
  const Matrix& bias = params[1].value();
  std::vector<std::size_t> preds(eval_truth.size());
  for (std::size_t i = 0; i < eval_truth.size(); ++i) {
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n_classes; ++c) {
      double s = bias(0, c);
      for (std::size_t k = 0; k < d; ++k) s += eval_unit(i, k) * w(k, c);
      if (s > best_score) {
        best = c;
        best_score = s;
      }
    }
    preds[i] = best;
  }
  return score_predictions(task, preds, eval_truth, n_classes);
}

TaskMetrics linear_probe(const model::ModelState& state, std::span<const dataset::SampleRecord> train,
                         std::span<const dataset::SampleRecord> eval_records, const taxonomy::TaxonomyCatalog& catalog,
                         TaskId task, const LinearProbeConfig& cfg) {
  const auto tr = embed(state, train, catalog);
  const auto ev = embed(state, eval_records, catalog);
  return linear_probe_from_embeddings(tr.images, truth_sets(train, task), ev.images, truth_sets(eval_records, task),
                                      task, catalog.task(task).labels.size(), cfg);
}

// ---- reports ---------------------------------------------------------------------------

nlohmann::json MetricReport::to_json() const {
  nlohmann::json t = nlohmann::json::array();
  std::vector<std::string> skipped;
  for (const auto& m : tasks) {
    t.push_back(m.to_json());
    if (m.skipped) skipped.push_back(m.task.str());
  }
  return {{"split", split}, {"n_records", n_records}, {"zero_shot", t}, {"skipped_tasks", skipped},
          {"retrieval", retrieval.to_json()}};
}

std::string MetricReport::to_text(const taxonomy::TaxonomyCatalog& catalog) const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "zero-shot (" << split << ", " << n_records << " records)\n";
  os << std::left << std::setw(5) << "task" << std::setw(32) << "name" << std::right << std::setw(8) << "n"
     << std::setw(10) << "acc" << std::setw(10) << "recall" << '\n';
  double acc_sum = 0.0;
  std::size_t scored = 0;
  for (const auto& m : tasks) {
    os << std::left << std::setw(5) << m.task.str() << std::setw(32) << catalog.task(m.task).name << std::right
       << std::setw(8) << m.n_eval;
    if (m.skipped) {
      os << std::setw(20) << "skipped" << '\n';
      continue;
    }
    os << std::setw(10) << m.accuracy << std::setw(10) << m.macro_recall << '\n';
    acc_sum += m.accuracy;
    ++scored;
  }
  if (scored > 0) {
    os << std::left << std::setw(37) << "avg" << std::right << std::setw(8) << "" << std::setw(10)
       << acc_sum / static_cast<double>(scored) << '\n';
  }
  os << "\nretrieval (" << retrieval.n << " pairs)\n";
  os << std::left << std::setw(6) << "dir";
  for (std::size_t k : retrieval.ks) os << std::right << std::setw(10) << ("R@" + std::to_string(k));
  os << '\n';
  os << std::left << std::setw(6) << "I2T";
  for (double v : retrieval.i2t) os << std::right << std::setw(10) << v;
  os << '\n' << std::left << std::setw(6) << "T2I";
  for (double v : retrieval.t2i) os << std::right << std::setw(10) << v;
  os << '\n';
  return os.str();
}

MetricReport evaluate(const model::ModelState& state, std::span<const dataset::SampleRecord> records,
                      const taxonomy::TaxonomyCatalog& catalog, const std::string& split_name,
                      const ZeroShotOptions& opts) {
  const auto emb = embed(state, records, catalog);
  const PromptSet prompts = PromptSet::from_catalog(catalog);
  MetricReport rep;
  rep.split = split_name;
  rep.n_records = records.size();
  for (const auto& t : catalog.tasks()) {
    rep.tasks.push_back(
        zero_shot_from_embeddings(emb.images, records, prompt_embeddings(state, catalog, prompts, t.id, opts), t.id)
            .metrics);
  }
  rep.retrieval = retrieval_from_embeddings(emb.images, emb.fused);
  return rep;
}

// ---- export ---------------------------------------------------------------------------------

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

void put_number(std::ostream& os, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  os << ',' << buf;
}

}  // namespace

void write_embeddings_csv(std::ostream& out, std::span<const dataset::SampleRecord> records, const Embeddings& emb,
                          const taxonomy::TaxonomyCatalog& catalog) {
  if (emb.images.rows() != records.size()) throw DimensionError("export: one embedding row per record expected");
  const std::size_t d = emb.images.cols();
  out << "image_id,case_id,t3_labels";
  for (const char* prefix : {"img_", "text_", "fused_"})
    for (std::size_t k = 0; k < d; ++k) out << ',' << prefix << k;
  out << '\n';
  const auto& diag = catalog.task(taxonomy::kDiagnosis);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    std::string labels;
    for (std::size_t l : r.labels[taxonomy::kDiagnosis.index()]) {
      if (!labels.empty()) labels += ';';
      labels += diag.labels.at(l);
    }
    out << csv_field(r.image_id) << ',' << csv_field(r.case_id) << ',' << csv_field(labels);
    for (const Matrix* m : {&emb.images, &emb.texts, &emb.fused})
      for (double v : m->row(i)) put_number(out, v);
    out << '\n';
  }
}

void export_embeddings(const model::ModelState& state, std::span<const dataset::SampleRecord> records,
                       const taxonomy::TaxonomyCatalog& catalog, const std::filesystem::path& path) {
  const auto emb = embed(state, records, catalog);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_embeddings_csv(out, records, emb, catalog);
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace sonoalign::eval
