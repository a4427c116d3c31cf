#include "sonoalign/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "sonoalign/errors.hpp"
#include "sonoalign/rng.hpp"

namespace sonoalign::dataset {

using taxonomy::TaskId;
using taxonomy::TaxonomyCatalog;

namespace {

const nlohmann::json& require_field(const nlohmann::json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(std::string("missing required field \"") + key + "\"");
  return *it;
}

std::string require_string(const nlohmann::json& obj, const char* key) {
  const auto& v = require_field(obj, key);
  if (!v.is_string()) throw ValidationError(std::string("field \"") + key + "\" must be a string");
  return v.get<std::string>();
}

}  // namespace

SampleRecord record_from_json(const nlohmann::json& obj, const TaxonomyCatalog& catalog) {
  if (!obj.is_object()) throw ValidationError("record must be a JSON object");
  SampleRecord r;
  r.case_id = require_string(obj, "case_id");
  if (r.case_id.empty()) throw ValidationError("case_id must be non-empty");
  r.image_id = require_string(obj, "image_id");
  r.caption = require_string(obj, "caption");
  const auto& feats = require_field(obj, "features");
  if (!feats.is_array()) throw ValidationError("field \"features\" must be an array");
  r.features.reserve(feats.size());
  for (const auto& f : feats) {
    if (!f.is_number()) throw ValidationError("field \"features\" must contain only numbers");
    r.features.push_back(f.get<double>());
  }
  if (auto it = obj.find("labels"); it != obj.end()) {
    if (!it->is_object()) throw ValidationError("field \"labels\" must be an object");
    for (const auto& [key, value] : it->items()) {
      const TaskId id = TaskId::parse(key);
      if (!value.is_array()) throw ValidationError("labels for " + key + " must be an array of strings");
      std::vector<std::string> raw;
      for (const auto& v : value) {
        if (!v.is_string()) throw ValidationError("labels for " + key + " must be an array of strings");
        raw.push_back(v.get<std::string>());
      }
      auto idx = catalog.resolve_labels(id, raw);
      std::sort(idx.begin(), idx.end());
      idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
      r.labels[id.index()] = std::move(idx);
    }
  }
  return r;
}

nlohmann::json record_to_json(const SampleRecord& record, const TaxonomyCatalog& catalog) {
  nlohmann::json labels = nlohmann::json::object();
  for (std::size_t k = 0; k < taxonomy::kTaskCount; ++k) {
    if (record.labels[k].empty()) continue;
    const auto& task = catalog.tasks()[k];
    auto arr = nlohmann::json::array();
    for (std::size_t i : record.labels[k]) arr.push_back(task.labels.at(i));
    labels[task.id.str()] = std::move(arr);
  }
  return {{"case_id", record.case_id},
          {"image_id", record.image_id},
          {"features", record.features},
          {"caption", record.caption},
          {"labels", std::move(labels)}};
}

std::vector<SampleRecord> read_jsonl(std::istream& in, const TaxonomyCatalog& catalog) {
  std::vector<SampleRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
    }
    try {
      records.push_back(record_from_json(obj, catalog));
    } catch (const ValidationError& e) {
      throw ParseError(line_no, e.what());
    }
    if (records.size() > 1 && records.back().features.size() != records.front().features.size()) {
      throw ParseError(line_no, "inconsistent feature dimension: " + std::to_string(records.back().features.size()) +
                                    " (earlier records have " + std::to_string(records.front().features.size()) +
                                    ")");
    }
  }
  return records;
}

std::vector<SampleRecord> load_jsonl(const std::filesystem::path& path, const TaxonomyCatalog& catalog) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return read_jsonl(in, catalog);
}

void write_jsonl(std::ostream& out, const std::vector<SampleRecord>& records, const TaxonomyCatalog& catalog) {
  for (const auto& r : records) out << record_to_json(r, catalog).dump() << '\n';
}

void save_jsonl(const std::filesystem::path& path, const std::vector<SampleRecord>& records,
                const TaxonomyCatalog& catalog) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_jsonl(out, records, catalog);
  if (!out) throw IoError("write failed for " + path.string());
}

// ---- splits -------------------------------------------------------------------

const char* to_string(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val" || s == "validation") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ValidationError("unknown split name '" + s + "'");
}

Split SplitAssignment::of(const std::string& case_id) const {
  auto it = by_case.find(case_id);
  if (it == by_case.end()) throw ValidationError("case '" + case_id + "' is not covered by the split manifest");
  return it->second;
}

std::array<std::size_t, 3> SplitAssignment::counts() const {
  std::array<std::size_t, 3> c{};
  for (const auto& [id, s] : by_case) ++c[static_cast<std::size_t>(s)];
  return c;
}

nlohmann::json SplitAssignment::to_json() const {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [id, s] : by_case) doc[id] = to_string(s);
  return doc;
}

SplitAssignment SplitAssignment::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ValidationError("split manifest must be a JSON object");
  SplitAssignment a;
  for (const auto& [id, v] : doc.items()) {
    if (!v.is_string()) throw ValidationError("split for case '" + id + "' must be a string");
    a.by_case[id] = split_from_string(v.get<std::string>());
  }
  return a;
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios) {
  double total = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0)) throw ValidationError("split ratios must be positive");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ValidationError("split ratios must sum to 1 (got " + std::to_string(total) + ")");
  }
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double quota = static_cast<double>(n) * ratios[k];
    sizes[k] = static_cast<std::size_t>(std::floor(quota + 1e-9));
    remainder[k] = std::max(0.0, quota - static_cast<double>(sizes[k]));
    assigned += sizes[k];
  }
  // Evaluation splits (val, test) take leftovers before train.
  std::array<std::size_t, 3> order{1, 2, 0};
  std::stable_sort(order.begin(), order.end() - 1,
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < n; i = (i + 1) % 3, ++assigned) ++sizes[order[i]];
  return sizes;
}

SplitAssignment split_cases(const std::vector<std::string>& case_ids, const SplitRatios& ratios, std::uint64_t seed) {
  std::vector<std::string> unique(case_ids.begin(), case_ids.end());
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  if (unique.size() < 3) {
    throw ValidationError("need at least 3 cases to split, got " + std::to_string(unique.size()));
  }
  const auto sizes = split_sizes(unique.size(), ratios);
  Rng rng(seed);
  rng.shuffle(std::span<std::string>(unique));
  SplitAssignment a;
  std::size_t at = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < sizes[k]; ++i) a.by_case[unique[at++]] = static_cast<Split>(k);
  }
  return a;
}

std::vector<SampleRecord> select_split(const std::vector<SampleRecord>& records, const SplitAssignment& split,
                                       Split which) {
  std::vector<SampleRecord> out;
  for (const auto& r : records) {
    if (split.of(r.case_id) == which) out.push_back(r);
  }
  return out;
}

// ---- synthetic corpus ---------------------------------------------------------

void SynthConfig::validate() const {
  if (n_cases < 3) throw ValidationError("synth.n_cases must be at least 3");
  if (images_min < 1 || images_max < images_min) throw ValidationError("synth.images_per_case range is invalid");
  if (d_in < 1) throw ValidationError("synth.d_in must be positive");
  if (!(noise_sigma >= 0.0)) throw ValidationError("synth.noise_sigma must be non-negative");
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError(std::string("synth.") + name + " must lie in [0,1]");
  };
  prob(attribute_presence, "attribute_presence");
  prob(cooccurrence, "cooccurrence");
  prob(second_diagnosis, "second_diagnosis");
}

namespace {

std::string join_labels(const taxonomy::LabelSet& set, const taxonomy::UdafTask& task, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (i) s += sep;
    s += task.labels[set[i]];
  }
  return s;
}

std::string case_name(std::size_t i) {
  std::ostringstream os;
  os << "case-" << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

std::string render_caption(const TaskLabels& labels, const TaxonomyCatalog& catalog) {
  auto part = [&](TaskId id, const char* sep) { return join_labels(labels[id.index()], catalog.task(id), sep); };
  std::string caption = "a";
  for (TaskId id : {taxonomy::kShape, taxonomy::kEchogenicity}) {
    const auto p = part(id, " ");
    if (!p.empty()) caption += " " + p;
  }
  const auto diag = part(taxonomy::kDiagnosis, " and ");
  caption += " " + (diag.empty() ? std::string("finding") : diag);
  const auto margins = part(taxonomy::kMargins, " ");
  if (!margins.empty()) caption += " with " + margins + " margins";
  const auto organ = part(taxonomy::kOrgan, " and ");
  if (!organ.empty()) caption += " in the " + organ;
  return caption;
}

std::vector<SampleRecord> generate_synthetic(const TaxonomyCatalog& catalog, const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t n_labels = catalog.total_labels();

  // Fixed unit-norm prototype per label.
  std::vector<std::vector<double>> prototypes(n_labels, std::vector<double>(cfg.d_in));
  {
    Rng rng(Rng::derive(cfg.seed, 0xA11CE));
    for (auto& p : prototypes) {
      double sq = 0.0;
      for (double& v : p) {
        v = rng.normal();
        sq += v * v;
      }
      const double inv = 1.0 / std::sqrt(sq);
      for (double& v : p) v *= inv;
    }
  }

  // Diagnosis-specific preferred label for each attribute task.
  const auto& diag_task = catalog.task(taxonomy::kDiagnosis);
  std::vector<std::array<std::size_t, taxonomy::kTaskCount>> preferred(diag_task.labels.size());
  {
    Rng rng(Rng::derive(cfg.seed, 0xC0FFEE));
    for (auto& row : preferred) {
      for (std::size_t k = 0; k < taxonomy::kTaskCount; ++k) {
        row[k] = static_cast<std::size_t>(rng.below(catalog.tasks()[k].labels.size()));
      }
    }
  }

  std::vector<std::vector<std::size_t>> organs_of_system(catalog.systems().size());
  for (std::size_t o = 0; o < catalog.organs().size(); ++o) organs_of_system[catalog.organs()[o].system].push_back(o);

  std::vector<SampleRecord> records;
  for (std::size_t c = 0; c < cfg.n_cases; ++c) {
    Rng rng(Rng::derive(cfg.seed, c));
    TaskLabels labels;
    std::size_t system = 0;
    do {
      system = static_cast<std::size_t>(rng.below(catalog.systems().size()));
    } while (organs_of_system[system].empty());
    const auto& candidates = organs_of_system[system];
    labels[taxonomy::kBodySystem.index()] = {system};
    labels[taxonomy::kOrgan.index()] = {candidates[rng.below(candidates.size())]};

    const std::size_t n_diag = diag_task.labels.size();
    const std::size_t diagnosis = static_cast<std::size_t>(rng.below(n_diag));
    labels[taxonomy::kDiagnosis.index()] = {diagnosis};
    if (n_diag > 1 && rng.bernoulli(cfg.second_diagnosis)) {
      std::size_t other = static_cast<std::size_t>(rng.below(n_diag - 1));
      if (other >= diagnosis) ++other;
      labels[taxonomy::kDiagnosis.index()] = {std::min(diagnosis, other), std::max(diagnosis, other)};
    }
    for (std::size_t k = taxonomy::kShape.index(); k < taxonomy::kTaskCount; ++k) {
      const bool present = rng.bernoulli(cfg.attribute_presence);
      const bool use_preferred = rng.bernoulli(cfg.cooccurrence);
      const auto draw = static_cast<std::size_t>(rng.below(catalog.tasks()[k].labels.size()));
      if (present) labels[k] = {use_preferred ? preferred[diagnosis][k] : draw};
    }

    std::vector<double> clean(cfg.d_in, 0.0);
    for (std::size_t k = 0; k < taxonomy::kTaskCount; ++k) {
      const std::size_t offset = catalog.label_offset(TaskId::from_index(k));
      for (std::size_t l : labels[k]) {
        const auto& p = prototypes[offset + l];
        for (std::size_t d = 0; d < cfg.d_in; ++d) clean[d] += p[d];
      }
    }

    const std::string caption = render_caption(labels, catalog);
    const std::size_t n_images =
        cfg.images_min + static_cast<std::size_t>(rng.below(cfg.images_max - cfg.images_min + 1));
    const std::string cid = case_name(c);
    for (std::size_t i = 0; i < n_images; ++i) {
      SampleRecord r;
      r.case_id = cid;
      r.image_id = cid + "-img-" + std::to_string(i);
      r.caption = caption;
      r.labels = labels;
      r.features = clean;
      if (cfg.noise_sigma > 0.0) {
        for (double& v : r.features) v += cfg.noise_sigma * rng.normal();
      }
      records.push_back(std::move(r));
    }
  }
  return records;
}

// ---- batching -----------------------------------------------------------------

std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                 std::uint64_t epoch) {
  if (batch_size < 1) throw ValidationError("batch size must be at least 1");
  if (n == 0) throw ValidationError("cannot batch an empty record list");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(Rng::derive(seed, 0xE90C0000ULL + epoch));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < n; at += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, at + batch_size)));
  }
  return batches;
}

}  // namespace sonoalign::dataset
