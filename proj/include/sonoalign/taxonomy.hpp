#pragma once

// Ultrasound diagnostic taxonomy: the two-level anatomy tree (body system ->
// organ) and the nine closed diagnostic-attribute vocabularies T1..T9, each
// carrying a label-similarity table.

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "sonoalign/matrix.hpp"

namespace sonoalign::taxonomy {

inline constexpr std::size_t kTaskCount = 9;

// Diagnostic dimension identifier, 1-based ("T1".."T9").
struct TaskId {
  int value = 1;

  constexpr std::size_t index() const { return static_cast<std::size_t>(value - 1); }
  static constexpr TaskId from_index(std::size_t i) { return TaskId{static_cast<int>(i) + 1}; }
  // Parses "T3" (case-insensitive); throws ValidationError otherwise.
  static TaskId parse(std::string_view text);
  std::string str() const { return "T" + std::to_string(value); }

  friend constexpr bool operator==(TaskId, TaskId) = default;
};

inline constexpr TaskId kBodySystem{1};
inline constexpr TaskId kOrgan{2};
inline constexpr TaskId kDiagnosis{3};
inline constexpr TaskId kShape{4};
inline constexpr TaskId kMargins{5};
inline constexpr TaskId kEchogenicity{6};
inline constexpr TaskId kInternal{7};
inline constexpr TaskId kPosterior{8};
inline constexpr TaskId kVascularity{9};

// Sorted, duplicate-free label indices for one task; empty = task absent.
using LabelSet = std::vector<std::size_t>;
using TaskLabels = std::array<LabelSet, kTaskCount>;

// Symmetric label-similarity matrix with unit diagonal and entries in [0,1].
class SimTable {
 public:
  SimTable() = default;
  static SimTable identity(std::size_t n);
  // Validates and wraps `m`. Asymmetry beyond `symmetry_tol`, a diagonal entry
  // other than 1 or an entry outside [0,1] raises ValidationError naming the
  // first offending cell.
  static SimTable validated(Matrix m, double symmetry_tol = 1e-9);

  std::size_t size() const noexcept { return matrix_.rows(); }
  double operator()(std::size_t a, std::size_t b) const { return matrix_(a, b); }
  const Matrix& matrix() const noexcept { return matrix_; }

 private:
  explicit SimTable(Matrix m) : matrix_(std::move(m)) {}
  Matrix matrix_;
};

struct UdafTask {
  TaskId id;
  std::string name;
  std::vector<std::string> labels;   // lowercase-normalized, unique
  std::vector<std::string> prompts;  // one zero-shot prompt per label
  SimTable similarity;

  std::optional<std::size_t> index_of(std::string_view label) const;
};

struct Organ {
  std::string name;
  std::size_t system = 0;  // index into TaxonomyCatalog::systems
};

class TaxonomyCatalog {
 public:
  // Builds and validates a catalog from its JSON document form.
  static TaxonomyCatalog from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;

  int format_version() const noexcept { return format_version_; }
  const std::vector<std::string>& systems() const noexcept { return systems_; }
  const std::vector<Organ>& organs() const noexcept { return organs_; }
  const std::array<UdafTask, kTaskCount>& tasks() const noexcept { return tasks_; }
  const UdafTask& task(TaskId id) const;

  // Case-insensitive, whitespace-trimmed exact match against the task's
  // vocabulary. Unknown labels raise ResolutionError listing the candidates.
  std::vector<std::size_t> resolve_labels(TaskId id, const std::vector<std::string>& raw) const;

  // Replaces a task's similarity table (dimensions must match).
  void set_similarity(TaskId id, SimTable table);

  // Total number of labels across all tasks, and the offset of each task's
  // first label in that flat enumeration.
  std::size_t total_labels() const noexcept;
  std::size_t label_offset(TaskId id) const;

 private:
  int format_version_ = 1;
  std::vector<std::string> systems_;
  std::vector<Organ> organs_;
  std::array<UdafTask, kTaskCount> tasks_;
};

// The embedded catalog: 9 systems, 52 organs and the nine task vocabularies
// with their evaluation prompts. All similarity tables are identity.
const TaxonomyCatalog& default_catalog();

// Reads a similarity override file {"task": "T3", "labels": [...],
// "matrix": [[...]]}. The label list must be a permutation of the task's
// vocabulary; the matrix is reordered into vocabulary order.
SimTable load_sim_table(const TaxonomyCatalog& catalog, TaskId id, const std::filesystem::path& path);
SimTable sim_table_from_json(const TaxonomyCatalog& catalog, TaskId id, const nlohmann::json& doc);

// Organ-level table: 1 on the diagonal, `same_system` for distinct organs with
// the same parent system, 0 otherwise.
SimTable hierarchical_sim(const TaxonomyCatalog& catalog, double same_system = 0.5);

// Lowercases and trims a label for vocabulary matching.
std::string normalize_label(std::string_view raw);

}  // namespace sonoalign::taxonomy
