#include "sonoalign/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "sonoalign/errors.hpp"
#include "sonoalign/eval.hpp"
#include "sonoalign/graph.hpp"
#include "sonoalign/prior.hpp"
#include "sonoalign/run_config.hpp"
#include "sonoalign/trainer.hpp"

namespace sonoalign::cli {

namespace {

namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::string out;
  std::string data;
  std::string split;
  std::string manifest;
  std::string checkpoint;
  std::string report;
  std::string log;
  std::string batch_ids;
  std::string image_id;
  std::string dot;
  std::string ablation;
  long long epochs = -1;
};

RunConfig load_config(const Options& o, std::ostream& err) {
  RunConfig rc = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (const auto seed = rc.apply_seed_override()) err << "SONO_ALIGN_SEED=" << *seed << " overrides train.seed\n";
  return rc;
}

fs::path pick(const std::string& flag, const fs::path& from_config, const char* what) {
  if (!flag.empty()) return flag;
  if (!from_config.empty()) return from_config;
  throw ValidationError(std::string("missing ") + what + " (pass the flag or set it in the config)");
}

dataset::SplitAssignment load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split manifest " + path.string());
  try {
    return dataset::SplitAssignment::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("split manifest " + path.string() + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, ',')) {
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

const dataset::SampleRecord& find_record(const std::vector<dataset::SampleRecord>& records, const std::string& id) {
  for (const auto& r : records) {
    if (r.image_id == id) return r;
  }
  throw ValidationError("unknown image id '" + id + "'");
}

// Records of the named split, or every record when no manifest is given.
std::vector<dataset::SampleRecord> records_for(const std::vector<dataset::SampleRecord>& all,
                                               const std::string& manifest, const std::string& split) {
  if (manifest.empty()) {
    if (!split.empty() && split != "all") throw ValidationError("--split " + split + " needs --manifest");
    return all;
  }
  return dataset::select_split(all, load_manifest(manifest), dataset::split_from_string(split.empty() ? "test" : split));
}

int cmd_gen_data(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig rc = load_config(o, err);
  const auto catalog = rc.catalog();
  const auto records = dataset::generate_synthetic(catalog, rc.synth);
  std::vector<std::string> cases;
  for (const auto& r : records) cases.push_back(r.case_id);
  const auto split = dataset::split_cases(cases, rc.ratios, rc.split_seed);

  fs::path data_path, split_path;
  if (!o.out.empty()) {
    data_path = fs::path(o.out) / "records.jsonl";
    split_path = fs::path(o.out) / "split.json";
  } else {
    data_path = pick("", rc.paths.data, "output location (--out)");
    split_path = pick("", rc.paths.split, "split manifest path");
  }
  if (data_path.has_parent_path()) fs::create_directories(data_path.parent_path());
  dataset::save_jsonl(data_path, records, catalog);
  write_text(split_path, split.to_json().dump(2) + "\n");
  const auto counts = split.counts();
  out << "records: " << records.size() << "\n"
      << "cases: " << split.by_case.size() << " (train " << counts[0] << ", val " << counts[1] << ", test "
      << counts[2] << ")\n"
      << "wrote " << data_path.string() << " and " << split_path.string() << "\n";
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig rc = load_config(o, err);
  if (o.epochs >= 0) rc.train.epochs = static_cast<std::size_t>(o.epochs);
  if (!o.ablation.empty()) rc.train.ablation = model::ablation_from_string(o.ablation);
  rc.train.validate();
  const auto catalog = rc.catalog();
  const auto records = dataset::load_jsonl(pick(o.data, rc.paths.data, "data (--data)"), catalog);
  const auto split = load_manifest(pick(o.split, rc.paths.split, "split manifest (--split)"));
  const fs::path ckpt = pick(o.out, rc.paths.checkpoint, "checkpoint output (--out)");
  fs::path log_path = !o.log.empty() ? fs::path(o.log) : rc.paths.log;
  if (log_path.empty()) log_path = fs::path(ckpt.string() + ".log.jsonl");

  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw IoError("cannot write log " + log_path.string());
  log << nlohmann::json{{"type", "config"}, {"train", rc.train.to_json()}}.dump() << '\n';

  const auto report = trainer::fit(records, split, rc.train, catalog, &log);
  model::save_checkpoint(report.best, ckpt);

  const auto val = dataset::select_split(records, split, dataset::Split::kVal);
  out << "trained " << rc.train.epochs << " epochs (" << model::to_string(rc.train.ablation) << "), best epoch "
      << report.best_epoch << ", final train loss " << report.epochs.back().train_loss << "\n";
  if (!val.empty()) {
    const auto metrics = eval::evaluate(report.best, val, catalog, "val", rc.zero_shot);
    out << metrics.to_text(catalog);
  }
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(model::file_hash(ckpt)));
  out << "checkpoint " << ckpt.string() << " (fnv1a " << hash << ")\nlog " << log_path.string() << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig rc = load_config(o, err);
  const auto catalog = rc.catalog();
  const auto state = model::load_checkpoint(pick(o.checkpoint, rc.paths.checkpoint, "checkpoint (--checkpoint)"), catalog);
  const auto all = dataset::load_jsonl(pick(o.data, rc.paths.data, "data (--data)"), catalog);
  const std::string manifest = !o.manifest.empty() ? o.manifest : rc.paths.split.string();
  const std::string split_name = o.split.empty() ? (manifest.empty() ? "all" : "test") : o.split;
  const auto records = records_for(all, manifest, split_name);
  if (records.empty()) throw ValidationError("split '" + split_name + "' has no records");
  for (const auto& r : records) {
    if (r.features.size() != state.input_dim) {
      throw ValidationError("record " + r.image_id + " has " + std::to_string(r.features.size()) +
                            " features but the checkpoint expects " + std::to_string(state.input_dim));
    }
  }
  const auto report = eval::evaluate(state, records, catalog, split_name, rc.zero_shot);
  out << report.to_text(catalog);
  const fs::path report_path = !o.report.empty() ? fs::path(o.report) : rc.paths.report;
  if (!report_path.empty()) {
    write_text(report_path, report.to_json().dump(2) + "\n");
    out << "report " << report_path.string() << "\n";
  }
  return kExitOk;
}

int cmd_show_prior(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig rc = load_config(o, err);
  const auto catalog = rc.catalog();
  const auto all = dataset::load_jsonl(pick(o.data, rc.paths.data, "data (--data)"), catalog);
  const auto ids = split_list(o.batch_ids);
  if (ids.empty()) throw ValidationError("--batch-ids must name at least one image id");
  std::vector<dataset::SampleRecord> batch;
  for (const auto& id : ids) batch.push_back(find_record(all, id));
  const auto prior = prior::prior_matrix(batch, catalog);
  std::size_t width = 6;
  for (const auto& id : ids) width = std::max(width, id.size() + 2);
  auto table = [&](const char* title, auto cell) {
    out << title << "\n" << std::setw(static_cast<int>(width)) << "";
    for (std::size_t j = 0; j < ids.size(); ++j) out << std::setw(10) << j;
    out << '\n';
    for (std::size_t i = 0; i < ids.size(); ++i) {
      out << std::left << std::setw(static_cast<int>(width)) << ids[i] << std::right;
      for (std::size_t j = 0; j < ids.size(); ++j) out << std::setw(10) << cell(i, j);
      out << '\n';
    }
  };
  out << std::fixed << std::setprecision(4);
  table("prior", [&](std::size_t i, std::size_t j) { return prior.values(i, j); });
  out << '\n';
  table("coverage (shared labeled tasks)", [&](std::size_t i, std::size_t j) { return prior.coverage_at(i, j); });
  return kExitOk;
}

int cmd_inspect_graph(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig rc = load_config(o, err);
  const auto catalog = rc.catalog();
  const auto all = dataset::load_jsonl(pick(o.data, rc.paths.data, "data (--data)"), catalog);
  if (o.image_id.empty()) throw ValidationError("--image-id is required");
  const auto& r = find_record(all, o.image_id);
  const auto g = graph::build_graph(r.labels, catalog);
  out << r.image_id << " (" << r.case_id << ")\n" << graph::render_text(g, catalog);
  if (!o.dot.empty()) {
    write_text(o.dot, graph::render_dot(g, catalog));
    out << "dot " << o.dot << "\n";
  }
  return kExitOk;
}

int cmd_export(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig rc = load_config(o, err);
  const auto catalog = rc.catalog();
  const auto state = model::load_checkpoint(pick(o.checkpoint, rc.paths.checkpoint, "checkpoint (--checkpoint)"), catalog);
  const auto all = dataset::load_jsonl(pick(o.data, rc.paths.data, "data (--data)"), catalog);
  const auto records = records_for(all, o.manifest, o.split);
  if (records.empty()) throw ValidationError("no records to export");
  if (o.out.empty()) throw ValidationError("--out is required");
  const fs::path path(o.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  eval::export_embeddings(state, records, catalog, path);
  out << "wrote " << records.size() << " rows to " << path.string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"sonoalign: ultrasound image-text alignment toolkit", "sonoalign"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic corpus and a 6:2:2 case-level split manifest");
  gen->add_option("--config", o.config, "Run configuration JSON");
  gen->add_option("--out", o.out, "Output directory (records.jsonl, split.json)");

  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint and JSON-lines log");
  train->add_option("--config", o.config, "Run configuration JSON");
  train->add_option("--data", o.data, "Records JSONL");
  train->add_option("--split", o.split, "Split manifest JSON");
  train->add_option("--out", o.out, "Checkpoint path");
  train->add_option("--log", o.log, "Training log path");
  train->add_option("--epochs", o.epochs, "Override train.epochs");
  train->add_option("--ablation", o.ablation, "Override train.ablation (full, Ds, Dg, Dsg)");

  auto* ev = app.add_subcommand("eval", "Zero-shot and retrieval metrics for a checkpoint");
  ev->add_option("--config", o.config, "Run configuration JSON");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint path");
  ev->add_option("--data", o.data, "Records JSONL");
  ev->add_option("--split", o.split, "Split to evaluate (train, val, test)");
  ev->add_option("--manifest", o.manifest, "Split manifest JSON");
  ev->add_option("--report", o.report, "Metric report JSON output");

  auto* sp = app.add_subcommand("show-prior", "Print the prior matrix and coverage for a set of records");
  sp->add_option("--config", o.config, "Run configuration JSON");
  sp->add_option("--data", o.data, "Records JSONL");
  sp->add_option("--batch-ids", o.batch_ids, "Comma-separated image ids")->required();

  auto* ig = app.add_subcommand("inspect-graph", "Print a record's lesion-attribute graph");
  ig->add_option("--config", o.config, "Run configuration JSON");
  ig->add_option("--data", o.data, "Records JSONL");
  ig->add_option("--image-id", o.image_id, "Image id")->required();
  ig->add_option("--dot", o.dot, "Also write Graphviz DOT to this path");

  auto* ex = app.add_subcommand("export-embeddings", "Write image, text and fused embeddings as CSV");
  ex->add_option("--config", o.config, "Run configuration JSON");
  ex->add_option("--checkpoint", o.checkpoint, "Checkpoint path");
  ex->add_option("--data", o.data, "Records JSONL");
  ex->add_option("--split", o.split, "Split to export");
  ex->add_option("--manifest", o.manifest, "Split manifest JSON");
  ex->add_option("--out", o.out, "CSV output path");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(o, out, err);
    if (train->parsed()) return cmd_train(o, out, err);
    if (ev->parsed()) return cmd_eval(o, out, err);
    if (sp->parsed()) return cmd_show_prior(o, out, err);
    if (ig->parsed()) return cmd_inspect_graph(o, out, err);
    if (ex->parsed()) return cmd_export(o, out, err);
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::runtime_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace sonoalign::cli
