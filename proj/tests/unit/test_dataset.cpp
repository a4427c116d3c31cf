#include <set>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "sonoalign/errors.hpp"

using namespace sonoalign;
using namespace sonoalign::dataset;
using taxonomy::default_catalog;

TEST_CASE("read_jsonl minimal line") {
  std::istringstream in(
      R"({"case_id":"c1","image_id":"i1","features":[0,0],"caption":"a cyst","labels":{"T3":["cyst"]}})"
      "\n\n");
  const auto recs = read_jsonl(in, default_catalog());
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].case_id == "c1");
  CHECK(recs[0].features == std::vector<double>{0, 0});
  CHECK(recs[0].labels[taxonomy::kDiagnosis.index()] == taxonomy::LabelSet{1});
  CHECK(recs[0].labels[taxonomy::kShape.index()].empty());
}

TEST_CASE("read_jsonl errors carry line numbers") {
  const std::string ok = R"({"case_id":"c1","image_id":"i1","features":[0,0],"caption":"a","labels":{}})";
  auto line_of = [](const std::string& text) -> std::size_t {
    std::istringstream in(text);
    try {
      read_jsonl(in, default_catalog());
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };
  CHECK(line_of(ok + "\n" + R"({"case_id":"c1","image_id":"i2","features":[0,0],"labels":{}})") == 2);
  CHECK(line_of(ok + "\n" + R"({"case_id":"c1","image_id":"i2","features":[0,0,1],"caption":"a","labels":{}})") == 2);
  CHECK(line_of(ok + "\n\n{not json") == 3);
  CHECK(line_of(R"({"case_id":"c1","image_id":"i1","features":[0],"caption":"a","labels":{"T3":["tumor"]}})") == 1);
  CHECK(line_of(R"({"case_id":"","image_id":"i1","features":[0],"caption":"a","labels":{}})") == 1);
}

TEST_CASE("jsonl round trip is the identity") {
  const auto recs = testutil::small_corpus(6);
  std::stringstream ss;
  write_jsonl(ss, recs, default_catalog());
  CHECK(read_jsonl(ss, default_catalog()) == recs);
}

TEST_CASE("split sizes") {
  CHECK(split_sizes(10, kDefaultRatios) == std::array<std::size_t, 3>{6, 2, 2});
  CHECK(split_sizes(11676, kDefaultRatios) == std::array<std::size_t, 3>{7005, 2336, 2335});
  CHECK(split_sizes(3, kDefaultRatios) == std::array<std::size_t, 3>{1, 1, 1});
  CHECK_THROWS_AS(split_sizes(10, {0.5, 0.2, 0.2}), ValidationError);
  CHECK_THROWS_AS(split_sizes(10, {1.0, 0.0, 0.0}), ValidationError);
}

TEST_CASE("split_cases") {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("case-" + std::to_string(i));
  const auto a = split_cases(ids, kDefaultRatios, 3);
  CHECK(a.counts() == std::array<std::size_t, 3>{6, 2, 2});
  CHECK(a.by_case == split_cases(ids, kDefaultRatios, 3).by_case);
  CHECK(SplitAssignment::from_json(a.to_json()).by_case == a.by_case);
  CHECK_THROWS_AS(split_cases({"a", "b", "a"}, kDefaultRatios, 0), ValidationError);
  CHECK_THROWS_AS(a.of("nope"), ValidationError);
}

TEST_CASE("split manifest JSON shape") {
  const auto a = split_cases({"a", "b", "c"}, kDefaultRatios, 0);
  const auto j = a.to_json();
  CHECK(j.is_object());
  std::multiset<std::string> values;
  for (const auto& [k, v] : j.items()) values.insert(v.get<std::string>());
  CHECK(values == std::multiset<std::string>{"train", "val", "test"});
}

TEST_CASE("synthetic generator") {
  const auto& cat = default_catalog();
  SynthConfig cfg;
  const auto recs = generate_synthetic(cat, cfg);
  CHECK(recs.size() >= 1600);
  CHECK(recs.size() <= 2400);
  std::set<std::string> cases;
  for (const auto& r : recs) {
    cases.insert(r.case_id);
    CHECK(r.features.size() == cfg.d_in);
    REQUIRE(r.labels[taxonomy::kOrgan.index()].size() == 1);
    REQUIRE(r.labels[taxonomy::kBodySystem.index()].size() == 1);
    CHECK(cat.organs()[r.labels[taxonomy::kOrgan.index()][0]].system == r.labels[taxonomy::kBodySystem.index()][0]);
    CHECK_FALSE(r.labels[taxonomy::kDiagnosis.index()].empty());
    CHECK(r.caption == render_caption(r.labels, cat));
  }
  CHECK(cases.size() == 200);

  std::stringstream a, b;
  write_jsonl(a, recs, cat);
  write_jsonl(b, generate_synthetic(cat, cfg), cat);
  CHECK(a.str() == b.str());
}

TEST_CASE("noiseless records with identical labels share features") {
  const auto recs = testutil::small_corpus(5, 7, 0.0);
  REQUIRE(recs.size() >= 2);
  CHECK(recs[0].labels == recs[1].labels);
  CHECK(recs[0].features == recs[1].features);
}

TEST_CASE("synth config validation") {
  SynthConfig cfg;
  cfg.n_cases = 2;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = SynthConfig{};
  cfg.noise_sigma = -1;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("caption template") {
  const auto& cat = default_catalog();
  taxonomy::TaskLabels l;
  l[taxonomy::kShape.index()] = {1};
  l[taxonomy::kEchogenicity.index()] = {1};
  l[taxonomy::kDiagnosis.index()] = {0};
  l[taxonomy::kMargins.index()] = {0};
  l[taxonomy::kOrgan.index()] = {*cat.task(taxonomy::kOrgan).index_of("thyroid gland")};
  CHECK(render_caption(l, cat) == "a oval hypoechoic nodule with well-defined margins in the thyroid gland");
  taxonomy::TaskLabels empty;
  CHECK(render_caption(empty, cat) == "a finding");
}

TEST_CASE("batch_iter") {
  const auto b = batch_iter(10, 4, 42, 0);
  REQUIRE(b.size() == 3);
  CHECK(b[0].size() == 4);
  CHECK(b[1].size() == 4);
  CHECK(b[2].size() == 2);
  CHECK(b == batch_iter(10, 4, 42, 0));
  // Captured once from the seeded shuffler.
  CHECK(b == std::vector<std::vector<std::size_t>>{{2, 7, 0, 3}, {9, 6, 1, 4}, {5, 8}});
  CHECK(batch_iter(10, 4, 42, 1) == std::vector<std::vector<std::size_t>>{{3, 5, 0, 4}, {7, 8, 2, 1}, {9, 6}});
  CHECK_THROWS_AS(batch_iter(0, 4, 0, 0), ValidationError);
  CHECK_THROWS_AS(batch_iter(4, 0, 0, 0), ValidationError);
}
