#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <sys/wait.h>

#include "doctest.h"
#include "helpers.hpp"
#include "schema_check.hpp"
#include "sonoalign/cli.hpp"
#include "sonoalign/run_config.hpp"
#include "sonoalign/model.hpp"
#include "sonoalign/trainer.hpp"

namespace fs = std::filesystem;
using namespace sonoalign;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("sonoalign_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

// Small run config next to the data so every command resolves paths against it.
fs::path small_config(const fs::path& dir, const std::string& extra_train = "") {
  const auto path = dir / "run.json";
  write(path, R"({"synth": {"n_cases": 10, "d_in": 6, "images_min": 2, "images_max": 2, "seed": 3},
  "train": {"dim": 8, "token_dim": 8, "hidden": 8, "pool_dim": 8, "heads": 2, "epochs": 2, "batch_size": 4)" +
                  extra_train + R"(},
  "split": {"seed": 1}})");
  return path;
}

const char* kRecord =
    R"({"case_id":"c1","image_id":"%ID%","features":[1,0,0,0.5,0.25,-1],"caption":"two findings",)"
    R"("labels":{"T3":["nodule","cyst"],"T4":["oval"],"T5":["well-defined"],"T6":["hypoechoic"]}})";

std::string record_line(const std::string& id) {
  std::string s = kRecord;
  s.replace(s.find("%ID%"), 4, id);
  return s + "\n";
}

}  // namespace

TEST_CASE("cli gen-data") {
  const auto dir = fresh_dir("gen");
  const auto cfg = small_config(dir);
  const auto a = run({"gen-data", "--config", cfg.string(), "--out", (dir / "a").string()});
  REQUIRE(a.code == 0);
  CHECK(a.out.find("records: 20") != std::string::npos);
  CHECK(a.out.find("(train 6, val 2, test 2)") != std::string::npos);
  const auto manifest = nlohmann::json::parse(slurp(dir / "a" / "split.json"));
  std::map<std::string, int> counts;
  for (const auto& [k, v] : manifest.items()) ++counts[v.get<std::string>()];
  CHECK(counts["train"] == 6);
  CHECK(counts["val"] == 2);
  CHECK(counts["test"] == 2);

  REQUIRE(run({"gen-data", "--config", cfg.string(), "--out", (dir / "b").string()}).code == 0);
  CHECK(slurp(dir / "a" / "records.jsonl") == slurp(dir / "b" / "records.jsonl"));
  CHECK(slurp(dir / "a" / "split.json") == slurp(dir / "b" / "split.json"));

  write(dir / "bad.json", R"({"split": {"ratios": [0.6, 0.2, 0.3]}})");
  const auto bad = run({"gen-data", "--config", (dir / "bad.json").string(), "--out", (dir / "c").string()});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("ratios") != std::string::npos);

  write(dir / "typo.json", R"({"synth": {"n_case": 10}})");
  CHECK(run({"gen-data", "--config", (dir / "typo.json").string(), "--out", (dir / "d").string()}).code == 2);
  write(dir / "typo2.json", R"({"trian": {}})");
  CHECK(run({"gen-data", "--config", (dir / "typo2.json").string(), "--out", (dir / "d").string()}).code == 2);
  CHECK(run({"gen-data", "--config", (dir / "missing.json").string()}).code == 1);
  CHECK(run({"no-such-command"}).code == 2);
}

TEST_CASE("cli train") {
  const auto dir = fresh_dir("train");
  const auto cfg = small_config(dir);
  REQUIRE(run({"gen-data", "--config", cfg.string(), "--out", dir.string()}).code == 0);
  const std::string data = (dir / "records.jsonl").string(), split = (dir / "split.json").string();

  SUBCASE("zero epochs gives the initialization") {
    const auto r = run({"train", "--config", cfg.string(), "--data", data, "--split", split, "--out",
                        (dir / "init.ckpt").string(), "--epochs", "0"});
    REQUIRE(r.code == 0);
    const auto& cat = taxonomy::default_catalog();
    const auto records = dataset::load_jsonl(data, cat);
    const auto manifest = dataset::SplitAssignment::from_json(nlohmann::json::parse(slurp(split)));
    const auto rc = cli::RunConfig::load(cfg);
    auto tc = rc.train;
    tc.epochs = 0;
    const auto init =
        trainer::initial_state(dataset::select_split(records, manifest, dataset::Split::kTrain), tc, cat);
    const auto loaded = model::load_checkpoint(dir / "init.ckpt", cat);
    CHECK(model::checkpoint_to_json(loaded) == model::checkpoint_to_json(init));
  }
  SUBCASE("Dsg logs zero semantic loss") {
    REQUIRE(run({"train", "--config", cfg.string(), "--data", data, "--split", split, "--out",
                 (dir / "dsg.ckpt").string(), "--ablation", "Dsg"})
                .code == 0);
    std::istringstream log(slurp(dir / "dsg.ckpt.log.jsonl"));
    std::string line;
    std::size_t steps = 0;
    while (std::getline(log, line)) {
      const auto j = nlohmann::json::parse(line);
      if (j.at("type") != "step") continue;
      CHECK(j.at("l_semantic").get<double>() == 0.0);
      ++steps;
    }
    CHECK(steps > 0);
  }
  SUBCASE("reruns give the same checkpoint") {
    const auto a = run({"train", "--config", cfg.string(), "--data", data, "--split", split, "--out",
                        (dir / "a.ckpt").string()});
    const auto b = run({"train", "--config", cfg.string(), "--data", data, "--split", split, "--out",
                        (dir / "b.ckpt").string()});
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    CHECK(model::file_hash(dir / "a.ckpt") == model::file_hash(dir / "b.ckpt"));
    CHECK(slurp(dir / "a.ckpt.log.jsonl") == slurp(dir / "b.ckpt.log.jsonl"));
    CHECK(a.out.find("R@10") != std::string::npos);
  }
  SUBCASE("errors") {
    CHECK(run({"train", "--config", cfg.string(), "--data", data, "--split", split, "--out",
               (dir / "x.ckpt").string(), "--ablation", "Dx"})
              .code == 2);
    CHECK(run({"train", "--config", cfg.string(), "--data", (dir / "none.jsonl").string(), "--split", split,
               "--out", (dir / "x.ckpt").string()})
              .code == 1);
    const auto huge = small_config(dir, R"(, "lr": 1e300, "tau_init": 1e-300)");
    CHECK(run({"train", "--config", huge.string(), "--data", data, "--split", split, "--out",
               (dir / "x.ckpt").string()})
              .code != 0);
  }
}

TEST_CASE("cli eval and export") {
  const auto dir = fresh_dir("eval");
  const auto cfg = small_config(dir);
  REQUIRE(run({"gen-data", "--config", cfg.string(), "--out", dir.string()}).code == 0);
  const std::string data = (dir / "records.jsonl").string(), split = (dir / "split.json").string();
  const std::string ckpt = (dir / "m.ckpt").string();
  REQUIRE(run({"train", "--config", cfg.string(), "--data", data, "--split", split, "--out", ckpt}).code == 0);

  SUBCASE("test split report") {
    const auto report = dir / "report.json";
    const auto r = run({"eval", "--config", cfg.string(), "--checkpoint", ckpt, "--data", data, "--manifest", split,
                        "--split", "test", "--report", report.string()});
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(slurp(report));
    std::ifstream schema_in(std::string(SONOALIGN_SOURCE_DIR) + "/schemas/metric_report.schema.json");
    const auto errors = testutil::SchemaChecker(nlohmann::json::parse(schema_in)).check(j);
    CHECK(errors.empty());
    CHECK(j.at("n_records") == 4);
    // two cases with two images each: every pair is inside the top 5
    for (const char* dirn : {"i2t", "t2i"})
      for (const char* k : {"R@5", "R@10", "R@50"}) CHECK(j.at("retrieval").at(dirn).at(k) == 1.0);
    CHECK(r.out.find("R@10") != std::string::npos);
  }
  SUBCASE("task without labels is listed as skipped") {
    const auto& cat = taxonomy::default_catalog();
    auto records = dataset::load_jsonl(data, cat);
    for (auto& rec : records) rec.labels[taxonomy::kVascularity.index()].clear();
    dataset::save_jsonl(dir / "no_t9.jsonl", records, cat);
    const auto report = dir / "skip.json";
    REQUIRE(run({"eval", "--config", cfg.string(), "--checkpoint", ckpt, "--data", (dir / "no_t9.jsonl").string(),
                 "--manifest", split, "--split", "test", "--report", report.string()})
                .code == 0);
    CHECK(nlohmann::json::parse(slurp(report)).at("skipped_tasks") == nlohmann::json::array({"T9"}));
  }
  SUBCASE("mismatched checkpoint") {
    write(dir / "wide.jsonl", record_line("w1") + record_line("w2"));
    auto lines = slurp(dir / "wide.jsonl");
    lines.replace(lines.find("[1,0,0,0.5,0.25,-1]"), 19, "[1,0,0,0.5,0.25,-1,2]");
    lines.replace(lines.find("[1,0,0,0.5,0.25,-1]"), 19, "[1,0,0,0.5,0.25,-1,2]");
    write(dir / "wide.jsonl", lines);
    const auto r = run({"eval", "--config", cfg.string(), "--checkpoint", ckpt, "--data", (dir / "wide.jsonl").string()});
    CHECK(r.code == 2);
    auto doc = nlohmann::json::parse(slurp(ckpt));
    doc["format_version"] = 99;
    write(dir / "v99.ckpt", doc.dump());
    CHECK(run({"eval", "--config", cfg.string(), "--checkpoint", (dir / "v99.ckpt").string(), "--data", data}).code ==
          2);
  }
  SUBCASE("export") {
    const auto out = dir / "emb.csv";
    const auto r = run({"export-embeddings", "--config", cfg.string(), "--checkpoint", ckpt, "--data", data,
                        "--manifest", split, "--split", "val", "--out", out.string()});
    REQUIRE(r.code == 0);
    std::istringstream in(slurp(out));
    std::string line;
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 1 + 4);
  }
}

TEST_CASE("cli show-prior and inspect-graph") {
  const auto dir = fresh_dir("inspect");
  const auto data = dir / "recs.jsonl";
  write(data, record_line("x1") + record_line("x2"));

  auto single = record_line("s1") + record_line("s2");
  for (std::size_t at; (at = single.find("\"nodule\",\"cyst\"")) != std::string::npos;)
    single.replace(at, 15, "\"nodule\"");
  write(dir / "single.jsonl", single);
  auto prior_row = [](const std::string& out) {
    std::istringstream lines(out);
    std::string line;
    for (int i = 0; i < 3; ++i) std::getline(lines, line);
    return line;
  };
  const auto p = run({"show-prior", "--data", (dir / "single.jsonl").string(), "--batch-ids", "s1,s2"});
  REQUIRE(p.code == 0);
  CHECK(prior_row(p.out).rfind("s1", 0) == 0);
  CHECK(prior_row(p.out).find("1.0000    1.0000") != std::string::npos);
  CHECK(p.out.find("coverage") != std::string::npos);
  CHECK(p.out.find("s1             4         4") != std::string::npos);

  // T3 {nodule, cyst} against itself under identity similarity: (1 + 0 + 0 + 1) / 4, averaged with three exact matches
  const auto multi = run({"show-prior", "--data", data.string(), "--batch-ids", "x1,x2"});
  REQUIRE(multi.code == 0);
  CHECK(prior_row(multi.out).find("1.0000    0.8750") != std::string::npos);

  const auto g = run({"inspect-graph", "--data", data.string(), "--image-id", "x1", "--dot", (dir / "g.dot").string()});
  REQUIRE(g.code == 0);
  CHECK(g.out.find("2 diagnostic nodes, 3 attribute nodes, 6 edges") != std::string::npos);
  CHECK(slurp(dir / "g.dot").find("graph lesion_attributes") != std::string::npos);

  CHECK(run({"inspect-graph", "--data", data.string(), "--image-id", "nope"}).code == 2);
  CHECK(run({"show-prior", "--data", data.string(), "--batch-ids", "x1,nope"}).code == 2);
}

TEST_CASE("cli binary exit codes") {
  const std::string exe = SONOALIGN_CLI_PATH;
  CHECK(std::system((exe + " --help > /dev/null").c_str()) == 0);
  const int status = std::system((exe + " inspect-graph --data /nonexistent.jsonl --image-id a 2> /dev/null").c_str());
  CHECK(WEXITSTATUS(status) == 1);
}
