#include "sonoalign/taxonomy.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "sonoalign/errors.hpp"

namespace sonoalign::taxonomy {

namespace detail {
extern const char* const kDefaultCatalogJson;
}

namespace {

std::string cell_name(const std::vector<std::string>* labels, std::size_t a, std::size_t b) {
  std::string s = "cell (" + std::to_string(a) + ", " + std::to_string(b) + ")";
  if (labels != nullptr && a < labels->size() && b < labels->size()) {
    s += " [" + (*labels)[a] + " / " + (*labels)[b] + "]";
  }
  return s;
}

SimTable validate_with_names(Matrix m, double tol, const std::vector<std::string>* labels) {
  if (m.rows() != m.cols()) throw ValidationError("similarity table must be square, got " + m.shape_string());
  const std::size_t n = m.rows();
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      const double v = m(a, b);
      if (!std::isfinite(v)) throw ValidationError("similarity " + cell_name(labels, a, b) + " is not finite");
      if (a == b && v != 1.0) {
        throw ValidationError("similarity " + cell_name(labels, a, b) + " is on the diagonal and must be 1, got " +
                              std::to_string(v));
      }
      if (v < 0.0 || v > 1.0) {
        throw ValidationError("similarity " + cell_name(labels, a, b) + " = " + std::to_string(v) +
                              " lies outside [0,1]");
      }
      if (std::abs(v - m(b, a)) > tol) {
        throw ValidationError("similarity " + cell_name(labels, a, b) + " is not symmetric (" +
                              std::to_string(v) + " vs " + std::to_string(m(b, a)) + ")");
      }
    }
  }
  return SimTable::validated(std::move(m), tol);
}

}  // namespace

TaskId TaskId::parse(std::string_view text) {
  if (text.size() == 2 && (text[0] == 'T' || text[0] == 't') && text[1] >= '1' && text[1] <= '9') {
    return TaskId{text[1] - '0'};
  }
  throw ValidationError("unknown task id '" + std::string(text) + "' (expected T1..T9)");
}

std::string normalize_label(std::string_view raw) {
  std::size_t b = 0, e = raw.size();
  while (b < e && std::isspace(static_cast<unsigned char>(raw[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(raw[e - 1]))) --e;
  std::string out(raw.substr(b, e - b));
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

SimTable SimTable::identity(std::size_t n) { return SimTable(Matrix::identity(n)); }

SimTable SimTable::validated(Matrix m, double symmetry_tol) {
  if (m.rows() != m.cols()) throw ValidationError("similarity table must be square, got " + m.shape_string());
  for (std::size_t a = 0; a < m.rows(); ++a) {
    for (std::size_t b = 0; b < m.cols(); ++b) {
      const double v = m(a, b);
      if (!std::isfinite(v) || (a == b && v != 1.0) || v < 0.0 || v > 1.0 ||
          std::abs(v - m(b, a)) > symmetry_tol) {
        // Re-run through the naming validator for the message.
        return validate_with_names(std::move(m), symmetry_tol, nullptr);
      }
    }
  }
  return SimTable(std::move(m));
}

std::optional<std::size_t> UdafTask::index_of(std::string_view label) const {
  const std::string key = normalize_label(label);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == key) return i;
  }
  return std::nullopt;
}

const UdafTask& TaxonomyCatalog::task(TaskId id) const {
  if (id.value < 1 || id.value > static_cast<int>(kTaskCount)) {
    throw ValidationError("task id out of range: " + std::to_string(id.value));
  }
  return tasks_[id.index()];
}

std::vector<std::size_t> TaxonomyCatalog::resolve_labels(TaskId id, const std::vector<std::string>& raw) const {
  const UdafTask& t = task(id);
  std::vector<std::size_t> out;
  out.reserve(raw.size());
  for (const auto& r : raw) {
    auto idx = t.index_of(r);
    if (!idx) {
      std::string candidates;
      for (const auto& l : t.labels) candidates += (candidates.empty() ? "" : ", ") + l;
      throw ResolutionError("unknown " + id.str() + " label '" + r + "'; candidates: " + candidates);
    }
    out.push_back(*idx);
  }
  return out;
}

void TaxonomyCatalog::set_similarity(TaskId id, SimTable table) {
  UdafTask& t = tasks_.at(id.index());
  if (table.size() != t.labels.size()) {
    throw ValidationError(id.str() + " similarity must be " + std::to_string(t.labels.size()) + "x" +
                          std::to_string(t.labels.size()));
  }
  t.similarity = std::move(table);
}

std::size_t TaxonomyCatalog::total_labels() const noexcept {
  std::size_t n = 0;
  for (const auto& t : tasks_) n += t.labels.size();
  return n;
}

std::size_t TaxonomyCatalog::label_offset(TaskId id) const {
  std::size_t n = 0;
  for (std::size_t k = 0; k < id.index(); ++k) n += tasks_[k].labels.size();
  return n;
}

TaxonomyCatalog TaxonomyCatalog::from_json(const nlohmann::json& doc) {
  TaxonomyCatalog c;
  try {
    c.format_version_ = doc.at("format_version").get<int>();
    c.systems_ = doc.at("systems").get<std::vector<std::string>>();
    for (const auto& o : doc.at("organs")) {
      const auto sys = o.at("system").get<std::string>();
      auto it = std::find(c.systems_.begin(), c.systems_.end(), sys);
      if (it == c.systems_.end()) throw ValidationError("organ parent system '" + sys + "' is not a listed system");
      c.organs_.push_back({o.at("name").get<std::string>(), static_cast<std::size_t>(it - c.systems_.begin())});
    }
    const auto& tasks = doc.at("tasks");
    if (tasks.size() != kTaskCount) {
      throw ValidationError("catalog must define exactly 9 tasks, got " + std::to_string(tasks.size()));
    }
    for (std::size_t k = 0; k < kTaskCount; ++k) {
      const auto& tj = tasks[k];
      UdafTask t;
      t.id = TaskId::parse(tj.at("id").get<std::string>());
      if (t.id.index() != k) throw ValidationError("tasks must be listed in order T1..T9");
      t.name = tj.at("name").get<std::string>();
      std::unordered_set<std::string> seen;
      for (const auto& lj : tj.at("labels")) {
        std::string label = normalize_label(lj.at("label").get<std::string>());
        if (label.empty()) throw ValidationError(t.id.str() + " has an empty label");
        if (!seen.insert(label).second) throw ValidationError(t.id.str() + " repeats label '" + label + "'");
        t.labels.push_back(std::move(label));
        t.prompts.push_back(lj.at("prompt").get<std::string>());
      }
      if (t.labels.empty()) throw ValidationError(t.id.str() + " has no labels");
      t.similarity = SimTable::identity(t.labels.size());
      c.tasks_[k] = std::move(t);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed catalog: ") + e.what());
  }

  const auto& t1 = c.tasks_[kBodySystem.index()].labels;
  if (t1.size() != c.systems_.size()) throw ValidationError("T1 vocabulary must equal the system list");
  for (std::size_t i = 0; i < t1.size(); ++i) {
    if (t1[i] != normalize_label(c.systems_[i])) throw ValidationError("T1 vocabulary must equal the system list");
  }
  const auto& t2 = c.tasks_[kOrgan.index()].labels;
  if (t2.size() != c.organs_.size()) throw ValidationError("T2 vocabulary must equal the organ list");
  for (std::size_t i = 0; i < t2.size(); ++i) {
    if (t2[i] != normalize_label(c.organs_[i].name)) throw ValidationError("T2 vocabulary must equal the organ list");
  }
  return c;
}

nlohmann::json TaxonomyCatalog::to_json() const {
  nlohmann::json doc;
  doc["format_version"] = format_version_;
  doc["systems"] = systems_;
  auto organs = nlohmann::json::array();
  for (const auto& o : organs_) organs.push_back({{"name", o.name}, {"system", systems_[o.system]}});
  doc["organs"] = std::move(organs);
  auto tasks = nlohmann::json::array();
  for (const auto& t : tasks_) {
    auto labels = nlohmann::json::array();
    for (std::size_t i = 0; i < t.labels.size(); ++i) {
      labels.push_back({{"label", t.labels[i]}, {"prompt", t.prompts[i]}});
    }
    tasks.push_back({{"id", t.id.str()}, {"name", t.name}, {"labels", std::move(labels)}});
  }
  doc["tasks"] = std::move(tasks);
  return doc;
}

const TaxonomyCatalog& default_catalog() {
  static const TaxonomyCatalog catalog =
      TaxonomyCatalog::from_json(nlohmann::json::parse(detail::kDefaultCatalogJson));
  return catalog;
}

SimTable sim_table_from_json(const TaxonomyCatalog& catalog, TaskId id, const nlohmann::json& doc) {
  const UdafTask& t = catalog.task(id);
  std::vector<std::string> labels;
  std::vector<std::vector<double>> rows;
  try {
    if (TaskId::parse(doc.at("task").get<std::string>()) != id) {
      throw ValidationError("similarity file is for " + doc.at("task").get<std::string>() + ", expected " + id.str());
    }
    labels = doc.at("labels").get<std::vector<std::string>>();
    rows = doc.at("matrix").get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed similarity file: ") + e.what());
  }
  const std::size_t n = t.labels.size();
  if (labels.size() != n || rows.size() != n) {
    throw ValidationError(id.str() + " similarity must list " + std::to_string(n) + " labels and rows");
  }
  std::vector<std::size_t> perm(n);
  std::vector<bool> used(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    auto idx = t.index_of(labels[i]);
    if (!idx) throw ResolutionError("unknown " + id.str() + " label '" + labels[i] + "' in similarity file");
    if (used[*idx]) throw ValidationError("label '" + labels[i] + "' listed twice in similarity file");
    used[*idx] = true;
    perm[i] = *idx;
  }
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i].size() != n) throw ValidationError("similarity row " + std::to_string(i) + " has wrong length");
    for (std::size_t j = 0; j < n; ++j) m(perm[i], perm[j]) = rows[i][j];
  }
  return validate_with_names(std::move(m), 1e-9, &t.labels);
}

SimTable load_sim_table(const TaxonomyCatalog& catalog, TaskId id, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open similarity file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return sim_table_from_json(catalog, id, doc);
}

SimTable hierarchical_sim(const TaxonomyCatalog& catalog, double same_system) {
  const auto& organs = catalog.organs();
  const std::size_t n = organs.size();
  Matrix m(n, n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b) {
        m(a, b) = 1.0;
      } else if (organs[a].system == organs[b].system) {
        m(a, b) = same_system;
      }
    }
  }
  return SimTable::validated(std::move(m));
}

}  // namespace sonoalign::taxonomy
