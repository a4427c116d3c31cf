#include "sonoalign/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <set>

#include "sonoalign/errors.hpp"
#include "sonoalign/rng.hpp"

namespace sonoalign::model {

const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::kFull:
      return "full";
    case Ablation::kNoSemantic:
      return "Ds";
    case Ablation::kNoGraph:
      return "Dg";
    case Ablation::kNeither:
      return "Dsg";
  }
  return "?";
}

Ablation ablation_from_string(const std::string& s) {
  if (s == "full") return Ablation::kFull;
  if (s == "Ds") return Ablation::kNoSemantic;
  if (s == "Dg") return Ablation::kNoGraph;
  if (s == "Dsg") return Ablation::kNeither;
  throw ValidationError("unknown ablation '" + s + "' (expected full, Ds, Dg or Dsg)");
}

graph::GraphConfig TrainConfig::graph_config() const {
  return {dim, pool_dim, heads, graph_layers, alpha_max, fusion_mode};
}

objectives::ObjectiveConfig TrainConfig::objective_config() const {
  objectives::ObjectiveConfig c;
  c.lambda = semantic_enabled() ? lambda : 0.0;
  c.alpha_s = alpha_s;
  c.tau_semantic = tau_semantic;
  return c;
}

optim::AdamWConfig TrainConfig::adamw_config() const { return {lr, beta1, beta2, adam_eps, weight_decay}; }

void TrainConfig::validate() const {
  if (batch_size < 1) throw ValidationError("train.batch_size must be positive");
  if (!(lr >= 0.0)) throw ValidationError("train.lr must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ValidationError("train.beta1/beta2 must lie in [0,1)");
  }
  if (!(adam_eps > 0.0)) throw ValidationError("train.adam_eps must be positive");
  if (!(weight_decay >= 0.0)) throw ValidationError("train.weight_decay must be non-negative");
  if (!(lambda >= 0.0)) throw ValidationError("train.lambda must be non-negative");
  if (!(alpha_s >= 0.0 && alpha_s <= 1.0)) throw ValidationError("train.alpha_s must lie in [0,1]");
  if (!(alpha_max > 0.0)) throw ValidationError("train.alpha_max must be positive");
  if (!(tau_init > 0.0) || !(tau_semantic > 0.0)) throw ValidationError("temperatures must be positive");
  if (dim < 1 || token_dim < 1 || hidden < 1 || pool_dim < 1) throw ValidationError("model widths must be positive");
  if (heads < 1 || dim % heads != 0) throw ValidationError("train.heads must divide train.dim");
  if (graph_layers < 1) throw ValidationError("train.graph_layers must be at least 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"weight_decay", weight_decay},
          {"lambda", lambda},
          {"alpha_s", alpha_s},
          {"alpha_max", alpha_max},
          {"tau_init", tau_init},
          {"tau_semantic", tau_semantic},
          {"fusion_mode", graph::to_string(fusion_mode)},
          {"ablation", to_string(ablation)},
          {"seed", seed},
          {"dim", dim},
          {"token_dim", token_dim},
          {"hidden", hidden},
          {"pool_dim", pool_dim},
          {"heads", heads},
          {"graph_layers", graph_layers}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ValidationError("train config must be a JSON object");
  TrainConfig c;
  using Setter = std::function<void(const nlohmann::json&)>;
  auto size = [](std::size_t& dst) { return Setter([&dst](const nlohmann::json& v) { dst = v.get<std::size_t>(); }); };
  auto real = [](double& dst) { return Setter([&dst](const nlohmann::json& v) { dst = v.get<double>(); }); };
  const std::map<std::string, Setter> setters = {
      {"epochs", size(c.epochs)},
      {"batch_size", size(c.batch_size)},
      {"lr", real(c.lr)},
      {"beta1", real(c.beta1)},
      {"beta2", real(c.beta2)},
      {"adam_eps", real(c.adam_eps)},
      {"weight_decay", real(c.weight_decay)},
      {"lambda", real(c.lambda)},
      {"alpha_s", real(c.alpha_s)},
      {"alpha_max", real(c.alpha_max)},
      {"tau_init", real(c.tau_init)},
      {"tau_semantic", real(c.tau_semantic)},
      {"fusion_mode", [&c](const nlohmann::json& v) { c.fusion_mode = graph::fusion_mode_from_string(v.get<std::string>()); }},
      {"ablation", [&c](const nlohmann::json& v) { c.ablation = ablation_from_string(v.get<std::string>()); }},
      {"seed", [&c](const nlohmann::json& v) { c.seed = v.get<std::uint64_t>(); }},
      {"dim", size(c.dim)},
      {"token_dim", size(c.token_dim)},
      {"hidden", size(c.hidden)},
      {"pool_dim", size(c.pool_dim)},
      {"heads", size(c.heads)},
      {"graph_layers", size(c.graph_layers)},
  };
  for (const auto& [key, value] : doc.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ValidationError("unknown train config key '" + key + "'");
    try {
      it->second(value);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("train config key '" + key + "' has the wrong type");
    }
  }
  c.validate();
  return c;
}

namespace {

template <typename State, typename F>
void visit_params(State& s, F&& f) {
  f("image.w1", s.image.w1);
  f("image.b1", s.image.b1);
  f("image.w2", s.image.w2);
  f("image.b2", s.image.b2);
  f("text.embedding", s.text.embedding);
  f("text.proj", s.text.proj);
  f("text.bias", s.text.bias);
  f("graph.node_embedding", s.graph.node_embedding);
  for (std::size_t l = 0; l < s.graph.layers.size(); ++l) {
    const std::string p = "graph.layer" + std::to_string(l) + ".";
    f(p + "self_diag", s.graph.layers[l].self_diag);
    f(p + "self_attr", s.graph.layers[l].self_attr);
    f(p + "attr_to_diag", s.graph.layers[l].attr_to_diag);
    f(p + "diag_to_attr", s.graph.layers[l].diag_to_attr);
  }
  f("graph.pool_proj", s.graph.pool_proj);
  f("graph.pool_vec", s.graph.pool_vec);
  f("graph.query_proj", s.graph.query_proj);
  f("graph.kv_proj", s.graph.kv_proj);
  f("graph.out_proj", s.graph.out_proj);
  f("graph.gate", s.graph.gate);
  f("graph.ln_gain", s.graph.ln_gain);
  f("graph.ln_bias", s.graph.ln_bias);
  f("log_tau", s.log_tau);
}

std::string to_hex(const Matrix& m) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(m.size() * 16);
  for (double v : m.data()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int byte = 0; byte < 8; ++byte) {  // little-endian byte order
      const auto b = static_cast<unsigned>((bits >> (8 * byte)) & 0xffU);
      out.push_back(kDigits[b >> 4]);
      out.push_back(kDigits[b & 0xf]);
    }
  }
  return out;
}

void from_hex(const std::string& hex, Matrix& m, const std::string& what) {
  if (hex.size() != m.size() * 16) throw ValidationError("checkpoint blob '" + what + "' has the wrong length");
  auto nibble = [&](char c) -> std::uint64_t {
    if (c >= '0' && c <= '9') return static_cast<std::uint64_t>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<std::uint64_t>(c - 'a' + 10);
    throw ValidationError("checkpoint blob '" + what + "' is not hexadecimal");
  };
  for (std::size_t i = 0; i < m.size(); ++i) {
    std::uint64_t bits = 0;
    for (int byte = 0; byte < 8; ++byte) {
      const std::size_t at = i * 16 + static_cast<std::size_t>(byte) * 2;
      bits |= ((nibble(hex[at]) << 4) | nibble(hex[at + 1])) << (8 * byte);
    }
    m[i] = std::bit_cast<double>(bits);
  }
}

}  // namespace

std::vector<ad::NamedParam> ModelState::named_parameters() const {
  std::vector<ad::NamedParam> out;
  visit_params(*this, [&](const std::string& name, const ad::Tensor& t) { out.push_back({name, t}); });
  return out;
}

std::vector<ad::Tensor> ModelState::parameters() const {
  std::vector<ad::Tensor> out;
  visit_params(*this, [&](const std::string&, const ad::Tensor& t) { out.push_back(t); });
  return out;
}

ModelState ModelState::clone() const {
  ModelState c = *this;
  visit_params(c, [](const std::string&, ad::Tensor& t) { t = t.clone(); });
  return c;
}

std::vector<std::string> vocabulary_sources(std::span<const dataset::SampleRecord> records,
                                            const taxonomy::TaxonomyCatalog& catalog) {
  std::vector<std::string> texts;
  texts.reserve(records.size() + catalog.total_labels());
  for (const auto& r : records) texts.push_back(r.caption);
  for (const auto& t : catalog.tasks()) texts.insert(texts.end(), t.prompts.begin(), t.prompts.end());
  return texts;
}

ModelState init_state(const TrainConfig& config, const taxonomy::TaxonomyCatalog& catalog, encoders::Vocabulary vocab,
                      std::size_t input_dim) {
  config.validate();
  if (input_dim < 1) throw ValidationError("input feature dimension must be positive");
  Rng rng(config.seed);
  ModelState s;
  s.config = config;
  s.input_dim = input_dim;
  s.image = encoders::ImageEncoderParams::init(input_dim, config.hidden, config.dim, rng);
  s.text = encoders::TextEncoderParams::init(vocab.size(), config.token_dim, config.dim, rng);
  s.vocab = std::move(vocab);
  s.graph = graph::GraphEncoderParams::init(catalog.total_labels(), config.graph_config(), rng);
  s.log_tau = ad::Tensor::parameter(Matrix(1, 1, std::log(config.tau_init)));
  s.optimizer = optim::make_adamw_state(s.parameters());
  return s;
}

RecordRefs refs(std::span<const dataset::SampleRecord> records) {
  RecordRefs out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(&r);
  return out;
}

ForwardResult forward(const ModelState& state, const RecordRefs& batch, const taxonomy::TaxonomyCatalog& catalog,
                      bool use_graph) {
  if (batch.empty()) throw ValidationError("forward: empty batch");
  Matrix feats(batch.size(), state.input_dim);
  std::vector<std::vector<std::size_t>> bags;
  bags.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& r = *batch[i];
    if (r.features.size() != state.input_dim) {
      throw DimensionError("record " + r.image_id + " has " + std::to_string(r.features.size()) +
                           " features, model expects " + std::to_string(state.input_dim));
    }
    std::copy(r.features.begin(), r.features.end(), feats.row(i).begin());
    bags.push_back(state.vocab.tokenize(r.caption));
  }
  ForwardResult out;
  out.images = encoders::encode_images(ad::Tensor::constant(std::move(feats)), state.image);
  out.texts = encoders::encode_texts(bags, state.text);
  if (!use_graph) {
    out.fused_texts = graph::fuse_bypass(out.texts, state.graph);
    return out;
  }
  const auto gcfg = state.config.graph_config();
  std::vector<ad::Tensor> rows;
  rows.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto g = graph::build_graph(batch[i]->labels, catalog);
    rows.push_back(graph::enhance_text(ad::slice_rows(out.texts, i, 1), g, state.graph, gcfg).fused);
  }
  out.fused_texts = ad::concat_rows(rows);
  return out;
}

// ---- checkpoints ----------------------------------------------------------------

nlohmann::json checkpoint_to_json(const ModelState& state) {
  nlohmann::json params = nlohmann::json::array();
  visit_params(state, [&](const std::string& name, const ad::Tensor& t) {
    params.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"data", to_hex(t.value())}});
  });
  nlohmann::json first = nlohmann::json::array(), second = nlohmann::json::array();
  for (const auto& m : state.optimizer.first) first.push_back(to_hex(m));
  for (const auto& m : state.optimizer.second) second.push_back(to_hex(m));
  return {{"format", "sonoalign-checkpoint"},
          {"format_version", kCheckpointVersion},
          {"config", state.config.to_json()},
          {"input_dim", state.input_dim},
          {"vocabulary", state.vocab.tokens()},
          {"parameters", std::move(params)},
          {"optimizer", {{"step", state.optimizer.step}, {"first", std::move(first)}, {"second", std::move(second)}}}};
}

ModelState checkpoint_from_json(const nlohmann::json& doc, const taxonomy::TaxonomyCatalog& catalog) {
  try {
    if (doc.at("format").get<std::string>() != "sonoalign-checkpoint") {
      throw ValidationError("not a checkpoint file");
    }
    const int version = doc.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw VersionError("unsupported checkpoint format_version " + std::to_string(version) + " (expected " +
                         std::to_string(kCheckpointVersion) + ")");
    }
    auto tokens = doc.at("vocabulary").get<std::vector<std::string>>();
    if (tokens.empty() || tokens.front() != encoders::Vocabulary::kOovToken) {
      throw ValidationError("checkpoint vocabulary must start with the OOV token");
    }
    auto vocab = encoders::Vocabulary::from_tokens(std::vector<std::string>(tokens.begin() + 1, tokens.end()));
    if (vocab.tokens() != tokens) throw ValidationError("checkpoint vocabulary is not in canonical order");

    ModelState s = init_state(TrainConfig::from_json(doc.at("config")), catalog, std::move(vocab),
                              doc.at("input_dim").get<std::size_t>());
    const auto& params = doc.at("parameters");
    std::size_t at = 0;
    visit_params(s, [&](const std::string& name, ad::Tensor& t) {
      if (at >= params.size()) throw ValidationError("checkpoint is missing parameter " + name);
      const auto& p = params[at++];
      if (p.at("name").get<std::string>() != name) {
        throw ValidationError("checkpoint parameter order mismatch at " + name);
      }
      if (p.at("rows").get<std::size_t>() != t.rows() || p.at("cols").get<std::size_t>() != t.cols()) {
        throw ValidationError("checkpoint parameter " + name + " has shape " +
                              std::to_string(p.at("rows").get<std::size_t>()) + "x" +
                              std::to_string(p.at("cols").get<std::size_t>()) + ", model expects " +
                              t.value().shape_string());
      }
      from_hex(p.at("data").get<std::string>(), t.mutable_value(), name);
    });
    if (at != params.size()) throw ValidationError("checkpoint has unexpected extra parameters");

    const auto& opt = doc.at("optimizer");
    s.optimizer.step = opt.at("step").get<std::uint64_t>();
    const auto& first = opt.at("first");
    const auto& second = opt.at("second");
    if (first.size() != s.optimizer.first.size() || second.size() != s.optimizer.second.size()) {
      throw ValidationError("checkpoint optimizer moments do not match the parameters");
    }
    for (std::size_t k = 0; k < first.size(); ++k) {
      from_hex(first[k].get<std::string>(), s.optimizer.first[k], "optimizer.first");
      from_hex(second[k].get<std::string>(), s.optimizer.second[k], "optimizer.second");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("corrupt checkpoint: ") + e.what());
  }
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << checkpoint_to_json(state).dump() << '\n';
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path, const taxonomy::TaxonomyCatalog& catalog) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("corrupt checkpoint " + path.string() + ": " + e.what());
  }
  return checkpoint_from_json(doc, catalog);
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace sonoalign::model
