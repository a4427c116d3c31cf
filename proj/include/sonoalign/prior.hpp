#pragma once

// Batch-level soft prior built from per-task label similarity.

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "sonoalign/dataset.hpp"
#include "sonoalign/matrix.hpp"
#include "sonoalign/taxonomy.hpp"

namespace sonoalign::prior {

struct PriorMatrix {
  Matrix values;                    // B x B affinities in [0,1], unit diagonal
  std::vector<std::size_t> coverage;  // B x B row-major: tasks labeled in both samples

  std::size_t size() const noexcept { return values.rows(); }
  std::size_t coverage_at(std::size_t i, std::size_t j) const { return coverage[i * size() + j]; }
};

// Mean similarity over all label pairs (a in lhs, b in rhs), accumulated in
// ascending index order. Both sets must be non-empty.
double task_affinity(const taxonomy::LabelSet& lhs, const taxonomy::LabelSet& rhs, const taxonomy::SimTable& sim);

// Off-diagonal entries average task_affinity over the tasks labeled in both
// samples; pairs sharing no labeled task get 0. The diagonal is 1.
PriorMatrix prior_matrix(std::span<const taxonomy::TaskLabels> labels, const taxonomy::TaxonomyCatalog& catalog);
PriorMatrix prior_matrix(std::span<const dataset::SampleRecord> batch, const taxonomy::TaxonomyCatalog& catalog);

// Writes `path` (affinities) and a sidecar "<stem>.coverage.csv" next to it.
// Values are printed with 17 significant digits.
void export_prior(const PriorMatrix& prior, const std::filesystem::path& path);
PriorMatrix import_prior(const std::filesystem::path& path);
std::filesystem::path coverage_path(const std::filesystem::path& path);

}  // namespace sonoalign::prior
