#include "sonoalign/prior.hpp"

#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>

#include "sonoalign/errors.hpp"

namespace sonoalign::prior {

double task_affinity(const taxonomy::LabelSet& lhs, const taxonomy::LabelSet& rhs, const taxonomy::SimTable& sim) {
  if (lhs.empty() || rhs.empty()) throw ArgumentError("task_affinity: label sets must be non-empty");
  double total = 0.0;
  for (std::size_t a : lhs) {
    for (std::size_t b : rhs) total += sim(a, b);
  }
  return total / static_cast<double>(lhs.size() * rhs.size());
}

PriorMatrix prior_matrix(std::span<const taxonomy::TaskLabels> labels, const taxonomy::TaxonomyCatalog& catalog) {
  const std::size_t n = labels.size();
  PriorMatrix p{Matrix(n, n), std::vector<std::size_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i) {
    p.values(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double total = 0.0;
      std::size_t shared = 0;
      for (std::size_t k = 0; k < taxonomy::kTaskCount; ++k) {
        if (labels[i][k].empty() || labels[j][k].empty()) continue;
        total += task_affinity(labels[i][k], labels[j][k], catalog.tasks()[k].similarity);
        ++shared;
      }
      const double v = shared == 0 ? 0.0 : total / static_cast<double>(shared);
      p.values(i, j) = v;
      p.values(j, i) = v;
      p.coverage[i * n + j] = shared;
      p.coverage[j * n + i] = shared;
    }
    std::size_t self = 0;
    for (const auto& set : labels[i]) self += set.empty() ? 0 : 1;
    p.coverage[i * n + i] = self;
  }
  return p;
}

PriorMatrix prior_matrix(std::span<const dataset::SampleRecord> batch, const taxonomy::TaxonomyCatalog& catalog) {
  std::vector<taxonomy::TaskLabels> labels;
  labels.reserve(batch.size());
  for (const auto& r : batch) labels.push_back(r.labels);
  return prior_matrix(labels, catalog);
}

std::filesystem::path coverage_path(const std::filesystem::path& path) {
  auto out = path;
  out.replace_filename(path.stem().string() + ".coverage.csv");
  return out;
}

namespace {

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace

void export_prior(const PriorMatrix& prior, const std::filesystem::path& path) {
  const std::size_t n = prior.size();
  std::ofstream out(path);
  std::ofstream cov(coverage_path(path));
  if (!out || !cov) throw IoError("cannot write prior export to " + path.string());
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j) {
        out << ',';
        cov << ',';
      }
      out << prior.values(i, j);
      cov << prior.coverage_at(i, j);
    }
    out << '\n';
    cov << '\n';
  }
  if (!out || !cov) throw IoError("write failed for " + path.string());
}

PriorMatrix import_prior(const std::filesystem::path& path) {
  const auto values = read_csv(path);
  const auto counts = read_csv(coverage_path(path));
  const std::size_t n = values.size();
  if (counts.size() != n) throw ValidationError("prior and coverage files disagree in size");
  PriorMatrix p{Matrix(n, n), std::vector<std::size_t>(n * n)};
  for (std::size_t i = 0; i < n; ++i) {
    if (values[i].size() != n || counts[i].size() != n) throw ValidationError("prior CSV is not square");
    for (std::size_t j = 0; j < n; ++j) {
      try {
        p.values(i, j) = std::stod(values[i][j]);
        p.coverage[i * n + j] = static_cast<std::size_t>(std::stoull(counts[i][j]));
      } catch (const std::exception&) {
        throw ValidationError("prior CSV has a non-numeric cell at (" + std::to_string(i) + ", " +
                              std::to_string(j) + ")");
      }
    }
  }
  return p;
}

}  // namespace sonoalign::prior
