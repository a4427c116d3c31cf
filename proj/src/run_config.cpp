#include "sonoalign/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>

#include "sonoalign/errors.hpp"

namespace sonoalign::cli {

namespace {

using Setter = std::function<void(const nlohmann::json&)>;

void apply_strict(const nlohmann::json& doc, const std::string& section, const std::map<std::string, Setter>& setters) {
  if (!doc.is_object()) throw ValidationError("config section '" + section + "' must be an object");
  for (const auto& [key, value] : doc.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ValidationError("unknown config key '" + section + "." + key + "'");
    try {
      it->second(value);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("config key '" + section + "." + key + "' has the wrong type");
    }
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

}  // namespace

dataset::SynthConfig synth_config_from_json(const nlohmann::json& doc) {
  dataset::SynthConfig c;
  apply_strict(doc, "synth",
               {{"n_cases", [&](const nlohmann::json& v) { c.n_cases = v.get<std::size_t>(); }},
                {"images_min", [&](const nlohmann::json& v) { c.images_min = v.get<std::size_t>(); }},
                {"images_max", [&](const nlohmann::json& v) { c.images_max = v.get<std::size_t>(); }},
                {"d_in", [&](const nlohmann::json& v) { c.d_in = v.get<std::size_t>(); }},
                {"noise_sigma", [&](const nlohmann::json& v) { c.noise_sigma = v.get<double>(); }},
                {"seed", [&](const nlohmann::json& v) { c.seed = v.get<std::uint64_t>(); }},
                {"attribute_presence", [&](const nlohmann::json& v) { c.attribute_presence = v.get<double>(); }},
                {"cooccurrence", [&](const nlohmann::json& v) { c.cooccurrence = v.get<double>(); }},
                {"second_diagnosis", [&](const nlohmann::json& v) { c.second_diagnosis = v.get<double>(); }}});
  c.validate();
  return c;
}

nlohmann::json synth_config_to_json(const dataset::SynthConfig& c) {
  return {{"n_cases", c.n_cases},
          {"images_min", c.images_min},
          {"images_max", c.images_max},
          {"d_in", c.d_in},
          {"noise_sigma", c.noise_sigma},
          {"seed", c.seed},
          {"attribute_presence", c.attribute_presence},
          {"cooccurrence", c.cooccurrence},
          {"second_diagnosis", c.second_diagnosis}};
}

RunConfig RunConfig::from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
  RunConfig c;
  auto path_setter = [&](std::filesystem::path& dst) {
    return Setter([&dst, &base_dir](const nlohmann::json& v) { dst = resolve(base_dir, v.get<std::string>()); });
  };
  apply_strict(
      doc, "config",
      {{"train", [&](const nlohmann::json& v) { c.train = model::TrainConfig::from_json(v); }},
       {"synth", [&](const nlohmann::json& v) { c.synth = synth_config_from_json(v); }},
       {"split",
        [&](const nlohmann::json& v) {
          apply_strict(v, "split",
                       {{"ratios",
                         [&](const nlohmann::json& r) {
                           const auto values = r.get<std::vector<double>>();
                           if (values.size() != 3) throw ValidationError("split.ratios must have three entries");
                           c.ratios = {values[0], values[1], values[2]};
                         }},
                        {"seed", [&](const nlohmann::json& s) { c.split_seed = s.get<std::uint64_t>(); }}});
          // Probe the ratios now so bad values surface as config errors.
          dataset::split_sizes(10, c.ratios);
        }},
       {"eval",
        [&](const nlohmann::json& v) {
          apply_strict(v, "eval", {{"singleton_graph_prompts", [&](const nlohmann::json& b) {
                                      c.zero_shot.singleton_graph_prompts = b.get<bool>();
                                    }}});
        }},
       {"paths", [&](const nlohmann::json& v) {
          auto& p = c.paths;
          apply_strict(v, "paths",
                       {{"data", path_setter(p.data)},
                        {"split", path_setter(p.split)},
                        {"checkpoint", path_setter(p.checkpoint)},
                        {"log", path_setter(p.log)},
                        {"report", path_setter(p.report)},
                        {"catalog", path_setter(p.catalog)},
                        {"sim_tables", [&](const nlohmann::json& tables) {
                           if (!tables.is_object()) throw ValidationError("paths.sim_tables must be an object");
                           for (const auto& [task, file] : tables.items()) {
                             taxonomy::TaskId::parse(task);
                             p.sim_tables[task] = resolve(base_dir, file.get<std::string>());
                           }
                         }}});
        }}});
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(doc, std::filesystem::absolute(path).parent_path());
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json paths_json = nlohmann::json::object();
  auto put = [&](const char* key, const std::filesystem::path& p) {
    if (!p.empty()) paths_json[key] = p.string();
  };
  put("data", paths.data);
  put("split", paths.split);
  put("checkpoint", paths.checkpoint);
  put("log", paths.log);
  put("report", paths.report);
  put("catalog", paths.catalog);
  if (!paths.sim_tables.empty()) {
    nlohmann::json t = nlohmann::json::object();
    for (const auto& [k, v] : paths.sim_tables) t[k] = v.string();
    paths_json["sim_tables"] = t;
  }
  return {{"train", train.to_json()},
          {"synth", synth_config_to_json(synth)},
          {"split", {{"ratios", ratios}, {"seed", split_seed}}},
          {"eval", {{"singleton_graph_prompts", zero_shot.singleton_graph_prompts}}},
          {"paths", paths_json}};
}

taxonomy::TaxonomyCatalog RunConfig::catalog() const {
  taxonomy::TaxonomyCatalog cat = taxonomy::default_catalog();
  if (!paths.catalog.empty()) {
    std::ifstream in(paths.catalog);
    if (!in) throw IoError("cannot open catalog " + paths.catalog.string());
    try {
      cat = taxonomy::TaxonomyCatalog::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("catalog " + paths.catalog.string() + " is not valid JSON: " + e.what());
    }
  }
  for (const auto& [task, file] : paths.sim_tables) {
    const auto id = taxonomy::TaskId::parse(task);
    cat.set_similarity(id, taxonomy::load_sim_table(cat, id, file));
  }
  return cat;
}

std::optional<std::uint64_t> RunConfig::apply_seed_override() {
  const char* env = std::getenv("SONO_ALIGN_SEED");
  if (env == nullptr || *env == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == nullptr || *end != '\0') throw ValidationError(std::string("SONO_ALIGN_SEED is not an integer: ") + env);
  train.seed = v;
  return v;
}

}  // namespace sonoalign::cli
