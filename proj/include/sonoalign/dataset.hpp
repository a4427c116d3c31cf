#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "sonoalign/taxonomy.hpp"

namespace sonoalign::dataset {

using taxonomy::TaskLabels;

// One image-text pair.
struct SampleRecord {
  std::string case_id;
  std::string image_id;
  std::vector<double> features;
  std::string caption;
  TaskLabels labels;  // per task: sorted label indices, empty when absent

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

SampleRecord record_from_json(const nlohmann::json& obj, const taxonomy::TaxonomyCatalog& catalog);
nlohmann::json record_to_json(const SampleRecord& record, const taxonomy::TaxonomyCatalog& catalog);

// Reads JSON-lines records. Every error carries its 1-based line number
// (ParseError); all records must share one feature dimension. Blank lines are
// skipped.
std::vector<SampleRecord> read_jsonl(std::istream& in, const taxonomy::TaxonomyCatalog& catalog);
std::vector<SampleRecord> load_jsonl(const std::filesystem::path& path, const taxonomy::TaxonomyCatalog& catalog);
void write_jsonl(std::ostream& out, const std::vector<SampleRecord>& records,
                 const taxonomy::TaxonomyCatalog& catalog);
void save_jsonl(const std::filesystem::path& path, const std::vector<SampleRecord>& records,
                const taxonomy::TaxonomyCatalog& catalog);

// ---- splits -----------------------------------------------------------------

enum class Split { kTrain = 0, kVal = 1, kTest = 2 };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct SplitAssignment {
  std::map<std::string, Split> by_case;

  Split of(const std::string& case_id) const;
  std::array<std::size_t, 3> counts() const;
  nlohmann::json to_json() const;
  static SplitAssignment from_json(const nlohmann::json& doc);
};

using SplitRatios = std::array<double, 3>;
inline constexpr SplitRatios kDefaultRatios{0.6, 0.2, 0.2};

// Exact split sizes for `n` cases: every quota is floored, then leftover
// cases go one at a time to the splits with the largest fractional
// remainders, validation and test before train (ties by split order).
// 11,676 cases at 6:2:2 give 7,005 / 2,336 / 2,335.
std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios);

// Case-level split: unique case ids are sorted, shuffled by `seed`, then cut
// into consecutive blocks of split_sizes(). Throws ValidationError on bad
// ratios or fewer than three cases.
SplitAssignment split_cases(const std::vector<std::string>& case_ids, const SplitRatios& ratios,
                            std::uint64_t seed);

std::vector<SampleRecord> select_split(const std::vector<SampleRecord>& records, const SplitAssignment& split,
                                       Split which);

// ---- synthetic corpus -------------------------------------------------------

struct SynthConfig {
  std::size_t n_cases = 200;
  std::size_t images_min = 8;
  std::size_t images_max = 12;
  std::size_t d_in = 32;
  double noise_sigma = 0.3;
  std::uint64_t seed = 7;
  // Probability that an attribute task (T4..T9) is annotated for a case.
  double attribute_presence = 0.85;
  // Probability that an attribute takes the diagnosis-specific preferred
  // label instead of a uniformly drawn one.
  double cooccurrence = 0.6;
  // Probability of a second, distinct diagnosis label.
  double second_diagnosis = 0.1;

  void validate() const;
};

// Deterministic in (catalog, cfg). Image features are the sum of fixed unit
// prototype vectors of every drawn label plus N(0, noise_sigma^2) noise;
// captions are rendered from a template over diagnosis, shape, echogenicity,
// margins and organ.
std::vector<SampleRecord> generate_synthetic(const taxonomy::TaxonomyCatalog& catalog, const SynthConfig& cfg);

// Caption template used by the generator.
std::string render_caption(const TaskLabels& labels, const taxonomy::TaxonomyCatalog& catalog);

// ---- batching ---------------------------------------------------------------

// Index batches over `n` records for one epoch, shuffled by (seed, epoch).
// The final short batch is kept.
std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                 std::uint64_t epoch);

}  // namespace sonoalign::dataset
