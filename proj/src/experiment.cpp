#include "adaptlab/experiment.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <memory>
#include <sstream>

#include "adaptlab/analysis.hpp"
#include "adaptlab/error.hpp"

namespace adaptlab {

namespace fs = std::filesystem;

Json default_config() {
  return Json{
      {"model",
       {{"n_layers", 8},
        {"n_heads", 4},
        {"d_model", 128},
        {"d_ffn", 512},
        {"vocab_size", 512},
        {"max_seq_len", 128},
        {"positional", "learned_absolute"}}},
      {"corpus",
       {{"seed", 0},
        {"words_per_language", 192},
        {"overlap_fraction", 0.0},
        {"grammar_perturbation", 0.0},
        {"transition_spread", 1.0},
        {"train_sentences", 20000},
        {"validation_sentences", 600},
        {"sentence_len", 12},
        {"langid_threshold", 0.7}}},
      {"pretrain",
       {{"steps", 20000},
        {"batch_size", 4},
        {"seq_len", 16},
        {"lr", 1e-3},
        {"eval_every", 500},
        {"warmup_fraction", 0.02},
        {"clip_norm", 1.0},
        {"eval_batch_size", 64},
        {"seed", 0},
        {"init_seed", 0},
        {"mix_fraction", 0.0},
        {"checkpoint", ""}}},
      {"adapt",
       {{"steps", 5000},
        {"batch_size", 4},
        {"seq_len", 16},
        {"lr", 1e-3},
        {"eval_every", 500},
        {"warmup_fraction", 0.02},
        {"clip_norm", 1.0},
        {"eval_batch_size", 64},
        {"seed", 0},
        {"init_seed", 0},
        {"mode", "pfeiffer"},
        {"reduction_factor", 16},
        {"lora_rank", 8},
        {"lora_scale", 1.0},
        {"init_std", 0.02},
        {"trainable_embeddings", true},
        {"checkpoint", ""}}},
      {"analysis",
       {{"seed", 0},
        {"window", 16},
        {"eval_batch_size", 64},
        {"lens_k", 10},
        {"norm_tokens", 6500},
        {"probe_per_class", 3000},
        {"probe_case", "case2"},
        {"probe_ks", Json::array()},
        {"probe_l2", 1e-4},
        {"probe_epochs", 500},
        {"probe_lr", 0.1},
        {"intervention_features", Json::array()},
        {"intervention_selections", {"most", "least", "random"}},
        {"intervention_modes", {"zero", "mean_replace"}},
        {"intervention_layer", 0},
        {"ablation_spans", Json::array()},
        {"report_cap", 100.0},
        {"pca_layers", Json::array()},
        {"pca_properties", {"pos", "number", "tense"}},
        {"pca_max_rows", 2000}}},
  };
}

namespace {

bool same_kind(const Json& def, const Json& value) {
  if (def.is_number_float()) return value.is_number();
  if (def.is_number_unsigned() || def.is_number_integer()) return value.is_number_unsigned();
  if (def.is_string()) return value.is_string();
  if (def.is_boolean()) return value.is_boolean();
  if (def.is_array()) return value.is_array();
  if (def.is_object()) return value.is_object();
  return false;
}

std::string kind_name(const Json& def) {
  if (def.is_number_float()) return "a number";
  if (def.is_number()) return "a non-negative integer";
  if (def.is_string()) return "a string";
  if (def.is_boolean()) return "a boolean";
  if (def.is_array()) return "an array";
  return "an object";
}

void merge_into(Json& config, const Json& schema, const Json& overlay, const std::string& prefix) {
  if (!overlay.is_object()) throw ConfigError((prefix.empty() ? "config" : prefix) + " must be an object");
  for (const auto& [key, value] : overlay.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!schema.contains(key)) throw ConfigError("unknown config key: " + path);
    const Json& def = schema.at(key);
    if (!same_kind(def, value)) throw ConfigError(path + " must be " + kind_name(def));
    if (def.is_object()) {
      merge_into(config[key], def, value, path);
    } else if (def.is_number_float()) {
      config[key] = value.get<double>();
    } else {
      config[key] = value;
    }
  }
}

template <typename T>
T get(const Json& config, const char* section, const char* key) {
  try {
    return config.at(section).at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(section) + "." + key + ": " + e.what());
  }
}

std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t stream) { return seed * 1000003ULL + stream; }

std::vector<std::size_t> size_list(const Json& config, const char* key) {
  return get<std::vector<std::size_t>>(config, "analysis", key);
}

std::vector<std::string> string_list(const Json& config, const char* key) {
  return get<std::vector<std::string>>(config, "analysis", key);
}

std::vector<LayerSpan> spans_of(const Json& config) {
  std::vector<LayerSpan> spans;
  for (const auto& pair : get<std::vector<std::vector<std::size_t>>>(config, "analysis", "ablation_spans")) {
    if (pair.size() != 2) throw ConfigError("analysis.ablation_spans entries must be [first, last]");
    spans.push_back(LayerSpan{pair[0], pair[1]});
  }
  return spans;
}

std::vector<std::size_t> layers_or_all(std::vector<std::size_t> layers, std::size_t n_layers) {
  if (layers.empty())
    for (std::size_t l = 1; l <= n_layers; ++l) layers.push_back(l);
  return layers;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  return Json::parse(in);
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Json strip_checkpoint(Json section) {
  section.erase("checkpoint");
  return section;
}

}  // namespace

void merge_config(Json& config, const Json& overlay) { merge_into(config, default_config(), overlay, ""); }

Json load_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

void apply_override(Json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like section.key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  Json overlay = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t dot; (dot = rest.find('.')) != std::string::npos; rest = rest.substr(dot + 1))
    parts.push_back(rest.substr(0, dot));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    if (it->empty()) throw ConfigError("empty component in override key: " + key);
    overlay = Json{{*it, overlay}};
  }
  merge_config(config, overlay);
}

void apply_seed(Json& config, std::uint64_t seed) {
  config["corpus"]["seed"] = seed;
  config["pretrain"]["seed"] = seed;
  config["pretrain"]["init_seed"] = seed;
  config["adapt"]["seed"] = seed;
  config["adapt"]["init_seed"] = seed;
  config["analysis"]["seed"] = seed;
}

ModelConfig model_config_of(const Json& config) {
  ModelConfig m;
  m.n_layers = get<std::size_t>(config, "model", "n_layers");
  m.n_heads = get<std::size_t>(config, "model", "n_heads");
  m.d_model = get<std::size_t>(config, "model", "d_model");
  m.d_ffn = get<std::size_t>(config, "model", "d_ffn");
  m.vocab_size = get<std::size_t>(config, "model", "vocab_size");
  m.max_seq_len = get<std::size_t>(config, "model", "max_seq_len");
  m.positional = positional_kind_from_string(get<std::string>(config, "model", "positional"));
  return m;
}

LanguagePairOptions language_options_of(const Json& config) {
  LanguagePairOptions o;
  o.seed = get<std::uint64_t>(config, "corpus", "seed");
  o.vocab_size = get<std::size_t>(config, "model", "vocab_size");
  o.words_per_language = get<std::size_t>(config, "corpus", "words_per_language");
  o.overlap_fraction = get<double>(config, "corpus", "overlap_fraction");
  o.grammar_perturbation = get<double>(config, "corpus", "grammar_perturbation");
  o.transition_spread = get<double>(config, "corpus", "transition_spread");
  return o;
}

TrainConfig train_config_of(const Json& config, TrainPhase phase) {
  const char* s = phase == TrainPhase::pretrain ? "pretrain" : "adapt";
  TrainConfig t;
  t.phase = phase;
  t.steps = get<std::size_t>(config, s, "steps");
  t.batch_size = get<std::size_t>(config, s, "batch_size");
  t.seq_len = get<std::size_t>(config, s, "seq_len");
  t.lr = get<double>(config, s, "lr");
  t.eval_every = get<std::size_t>(config, s, "eval_every");
  t.seed = get<std::uint64_t>(config, s, "seed");
  t.warmup_fraction = get<double>(config, s, "warmup_fraction");
  t.clip_norm = get<double>(config, s, "clip_norm");
  t.eval_batch_size = get<std::size_t>(config, s, "eval_batch_size");
  return t;
}

AdapterConfig adapter_config_of(const Json& config) {
  AdapterConfig a;
  a.mode = adapter_mode_from_string(get<std::string>(config, "adapt", "mode"));
  a.reduction_factor = get<std::size_t>(config, "adapt", "reduction_factor");
  a.lora_rank = get<std::size_t>(config, "adapt", "lora_rank");
  a.lora_scale = get<double>(config, "adapt", "lora_scale");
  a.init_std = get<double>(config, "adapt", "init_std");
  return a;
}

void validate_config(const Json& config) {
  try {
    const ModelConfig m = model_config_of(config);
    m.validate();
    make_language_pair(language_options_of(config));
    for (TrainPhase phase : {TrainPhase::pretrain, TrainPhase::adapt}) {
      const TrainConfig t = train_config_of(config, phase);
      t.validate();
      if (t.seq_len > m.max_seq_len + 1) throw InvalidArgument(to_string(phase) + ".seq_len exceeds max_seq_len + 1");
    }
    const AdapterConfig a = adapter_config_of(config);
    if (a.mode == AdapterMode::pfeiffer && (a.reduction_factor == 0 || m.d_model % a.reduction_factor != 0))
      throw InvalidArgument("adapt.reduction_factor must divide model.d_model");
    if (a.mode == AdapterMode::lora && a.lora_rank == 0) throw InvalidArgument("adapt.lora_rank must be positive");

    if (get<std::size_t>(config, "corpus", "train_sentences") == 0 ||
        get<std::size_t>(config, "corpus", "validation_sentences") == 0 ||
        get<std::size_t>(config, "corpus", "sentence_len") == 0)
      throw InvalidArgument("corpus sentence counts and sentence_len must be positive");
    const double threshold = get<double>(config, "corpus", "langid_threshold");
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw InvalidArgument("corpus.langid_threshold must lie in [0, 1]");
    const double mix = get<double>(config, "pretrain", "mix_fraction");
    if (!(mix >= 0.0 && mix <= 1.0)) throw InvalidArgument("pretrain.mix_fraction must lie in [0, 1]");

    const std::size_t window = get<std::size_t>(config, "analysis", "window");
    if (window < 2 || window > m.max_seq_len + 1) throw InvalidArgument("analysis.window must lie in [2, max_seq_len + 1]");
    if (get<std::size_t>(config, "analysis", "eval_batch_size") == 0)
      throw InvalidArgument("analysis.eval_batch_size must be positive");
    const std::size_t k = get<std::size_t>(config, "analysis", "lens_k");
    if (k == 0 || k > m.vocab_size) throw InvalidArgument("analysis.lens_k must lie in [1, vocab_size]");
    if (get<std::size_t>(config, "analysis", "norm_tokens") == 0)
      throw InvalidArgument("analysis.norm_tokens must be positive");
    if (get<std::size_t>(config, "analysis", "probe_per_class") < 5)
      throw InvalidArgument("analysis.probe_per_class must be at least 5");
    negative_case_from_string(get<std::string>(config, "analysis", "probe_case"));
    for (std::size_t v : size_list(config, "probe_ks"))
      if (v == 0 || v > m.d_model) throw InvalidArgument("analysis.probe_ks entries must lie in [1, d_model]");
    for (std::size_t v : size_list(config, "intervention_features"))
      if (v > m.d_model) throw InvalidArgument("analysis.intervention_features entries must not exceed d_model");
    for (const auto& s : string_list(config, "intervention_selections")) feature_selection_from_string(s);
    for (const auto& s : string_list(config, "intervention_modes")) intervention_mode_from_string(s);
    if (get<std::size_t>(config, "analysis", "intervention_layer") > m.n_layers)
      throw InvalidArgument("analysis.intervention_layer must be 0 (all) or a layer in 1..n_layers");
    for (LayerSpan span : spans_of(config)) validate_span(span, m.n_layers);
    if (!(get<double>(config, "analysis", "report_cap") > 0.0))
      throw InvalidArgument("analysis.report_cap must be positive");
    for (std::size_t l : size_list(config, "pca_layers"))
      if (l == 0 || l > m.n_layers) throw InvalidArgument("analysis.pca_layers entries must lie in 1..n_layers");
    for (const auto& s : string_list(config, "pca_properties")) property_from_string(s);
    if (get<std::size_t>(config, "analysis", "pca_max_rows") < 3)
      throw InvalidArgument("analysis.pca_max_rows must be at least 3");
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

Json resolve_config(const std::optional<fs::path>& file, std::optional<std::uint64_t> seed,
                    const std::vector<std::string>& overrides) {
  Json config = default_config();
  if (file) merge_config(config, load_config_file(*file));
  if (seed) apply_seed(config, *seed);
  for (const auto& o : overrides) apply_override(config, o);
  validate_config(config);
  return config;
}

std::string config_hash(const Json& j) { return sha256_hex(j.dump()).substr(0, 16); }

// ---------------------------------------------------------------------------

struct Experiment::Corpora {
  LanguagePairSpec spec;
  std::vector<TokenId> source, target, source_val, target_val;
  Json hashes;
};

struct Experiment::Models {
  TransformerParams base;
  TransformerParams adapted;
  AdapterSet adapters;
  Json provenance;
};

Experiment::Experiment(Json config, fs::path out_root, Logger log)
    : config_(std::move(config)), out_(std::move(out_root)), log_(std::move(log)) {}

void Experiment::log(const std::string& line) const {
  if (log_) log_(line);
}

fs::path Experiment::corpus_dir() const {
  const Json key{{"corpus", config_["corpus"]}, {"vocab_size", config_["model"]["vocab_size"]}};
  return out_ / ("corpus-" + config_hash(key));
}

fs::path Experiment::pretrain_dir() const {
  const Json key{
      {"corpus", config_["corpus"]}, {"model", config_["model"]}, {"pretrain", strip_checkpoint(config_["pretrain"])}};
  return out_ / ("pretrain-" + config_hash(key));
}

namespace {

Json checkpoint_key(const fs::path& manifest) {
  return fs::exists(manifest) ? Json(checkpoint_hash(manifest)) : Json("missing");
}

}  // namespace

fs::path Experiment::base_manifest() const {
  const std::string configured = config_["pretrain"]["checkpoint"];
  return configured.empty() ? pretrain_dir() / "model.json" : fs::path(configured);
}

fs::path Experiment::adapter_manifest() const {
  const std::string configured = config_["adapt"]["checkpoint"];
  return configured.empty() ? adapt_dir() / "adapters.json" : fs::path(configured);
}

fs::path Experiment::adapt_dir() const {
  Json key{{"corpus", config_["corpus"]}, {"model", config_["model"]}, {"adapt", strip_checkpoint(config_["adapt"])}};
  if (std::string(config_["pretrain"]["checkpoint"]).empty()) {
    key["base"] = pretrain_dir().filename().string();
  } else {
    key["base"] = checkpoint_key(base_manifest());
  }
  return out_ / ("adapt-" + config_hash(key));
}

fs::path Experiment::analysis_dir(const std::string& command) const {
  Json key = config_;
  if (!std::string(config_["pretrain"]["checkpoint"]).empty()) key["base_checkpoint"] = checkpoint_key(base_manifest());
  if (!std::string(config_["adapt"]["checkpoint"]).empty())
    key["adapter_checkpoint"] = checkpoint_key(adapter_manifest());
  return out_ / (command + "-" + config_hash(key));
}

Json Experiment::run(const std::string& command) {
  if (command == "synth-gen") return synth_gen();
  if (command == "pretrain") return pretrain();
  if (command == "adapt") return adapt();
  for (const auto& name : experiment_commands())
    if (name == command) return analysis(command);
  throw ConfigError("unknown command: " + command);
}

namespace {

const char* const kCorpusFiles[] = {"source.txt", "target.txt", "source_val.txt", "target_val.txt"};

}  // namespace

Json Experiment::synth_gen() {
  const fs::path dir = corpus_dir();
  Json summary{{"status", "ok"}, {"command", "synth-gen"}, {"run_dir", dir.string()}};
  if (fs::exists(dir / "corpus.json")) {
    log("corpus: reusing " + dir.string());
    summary["cached"] = true;
    summary["files"] = read_json(dir / "corpus.json")["files"];
    return summary;
  }
  fs::create_directories(dir);
  log("corpus: generating into " + dir.string());
  const LanguagePairOptions options = language_options_of(config_);
  const std::size_t len = config_["corpus"]["sentence_len"];
  const std::size_t n_val = config_["corpus"]["validation_sentences"];
  LanguagePair lp = generate_language_pair(options, config_["corpus"]["train_sentences"], len);
  const std::vector<TokenId> source_val = sample_corpus(lp.spec.source, n_val, len, derived_seed(options.seed, 1));
  const std::vector<TokenId> target_val = sample_corpus(lp.spec.target, n_val, len, derived_seed(options.seed, 2));

  write_json(dir / "config.json", config_);
  write_json(dir / "spec.json", Json{{"source", to_json(lp.spec.source)}, {"target", to_json(lp.spec.target)}});
  const std::vector<TokenId>* corpora[] = {&lp.source, &lp.target, &source_val, &target_val};
  Json files = Json::object();
  for (std::size_t i = 0; i < 4; ++i) {
    write_corpus(dir / kCorpusFiles[i], *corpora[i]);
    files[kCorpusFiles[i]] = {{"tokens", corpora[i]->size()}, {"sha256", file_hash(dir / kCorpusFiles[i])}};
  }
  files["spec.json"] = {{"sha256", file_hash(dir / "spec.json")}};
  write_json(dir / "corpus.json", Json{{"files", files}});
  summary["cached"] = false;
  summary["files"] = files;
  return summary;
}

Experiment::Corpora Experiment::load_corpora() {
  synth_gen();
  const fs::path dir = corpus_dir();
  Corpora c;
  const Json spec = read_json(dir / "spec.json");
  c.spec.source = language_spec_from_json(spec.at("source"));
  c.spec.target = language_spec_from_json(spec.at("target"));
  c.source = read_corpus(dir / kCorpusFiles[0]);
  c.target = read_corpus(dir / kCorpusFiles[1]);
  c.source_val = read_corpus(dir / kCorpusFiles[2]);
  c.target_val = read_corpus(dir / kCorpusFiles[3]);
  c.hashes = Json::object();
  const Json manifest = read_json(dir / "corpus.json");
  for (const auto& [name, entry] : manifest.at("files").items()) c.hashes[name] = entry.at("sha256");
  return c;
}

namespace {

TrainHooks logging_hooks(const fs::path& log_path, const std::string& phase, const std::function<void(const std::string&)>& log) {
  TrainHooks hooks;
  auto out = std::make_shared<std::ofstream>(log_path);
  hooks.on_eval = [out, phase, log](const EvalRecord& r) {
    Json line = to_json(r);
    *out << line.dump() << "\n" << std::flush;
    if (log) log(phase + " " + line.dump());
  };
  return hooks;
}

void check_model_config(const TransformerParams& params, const ModelConfig& expected, const fs::path& manifest) {
  if (!(params.config == expected)) {
    throw ConfigError("checkpoint " + manifest.string() + " has model config " + to_json(params.config).dump() +
                      ", which differs from the model section " + to_json(expected).dump());
  }
}

}  // namespace

Json Experiment::pretrain() {
  const fs::path dir = pretrain_dir();
  if (fs::exists(dir / "summary.json")) {
    log("pretrain: reusing " + dir.string());
    Json summary = read_json(dir / "summary.json");
    summary["run_dir"] = dir.string();
    summary["checkpoint"] = (dir / "model.json").string();
    summary["cached"] = true;
    return summary;
  }
  const Corpora corpora = load_corpora();
  fs::create_directories(dir);
  write_json(dir / "config.json", config_);

  const TrainConfig train = train_config_of(config_, TrainPhase::pretrain);
  const double mix = config_["pretrain"]["mix_fraction"];
  std::vector<TokenId> data = corpora.source;
  if (mix > 0.0) {
    data = mix_corpora(corpora.source, corpora.target, mix, config_["corpus"]["sentence_len"],
                       derived_seed(train.seed, 3));
  }
  log("pretrain: " + std::to_string(train.steps) + " steps into " + dir.string());
  const auto start = std::chrono::steady_clock::now();
  PretrainResult r = adaptlab::pretrain(train, model_config_of(config_), data, corpora.source_val,
                                        config_["pretrain"]["init_seed"], logging_hooks(dir / "log.jsonl", "pretrain", log_));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  save_model(dir / "model.json", r.params);

  Json summary{{"status", "ok"},
               {"command", "pretrain"},
               {"run_dir", dir.string()},
               {"checkpoint", (dir / "model.json").string()},
               {"checkpoint_sha256", checkpoint_hash(dir / "model.json")},
               {"best_step", r.log.best.step},
               {"best_validation_perplexity", r.log.best.validation_perplexity},
               {"seconds", seconds}};
  write_json(dir / "summary.json", summary);
  summary["cached"] = false;
  return summary;
}

Json Experiment::adapt() {
  const fs::path base_path = base_manifest();
  const TransformerParams base = load_model(base_path);
  check_model_config(base, model_config_of(config_), base_path);
  const fs::path dir = adapt_dir();
  if (fs::exists(dir / "summary.json")) {
    log("adapt: reusing " + dir.string());
    Json summary = read_json(dir / "summary.json");
    summary["run_dir"] = dir.string();
    summary["checkpoint"] = (dir / "adapters.json").string();
    summary["cached"] = true;
    return summary;
  }
  const Corpora corpora = load_corpora();
  fs::create_directories(dir);
  write_json(dir / "config.json", config_);

  const TrainConfig train = train_config_of(config_, TrainPhase::adapt);
  log("adapt: " + std::to_string(train.steps) + " steps into " + dir.string());
  const auto start = std::chrono::steady_clock::now();
  AdaptResult r = adaptlab::adapt(train, base, adapter_config_of(config_), config_["adapt"]["trainable_embeddings"],
                                  corpora.target, corpora.target_val, config_["adapt"]["init_seed"],
                                  logging_hooks(dir / "log.jsonl", "adapt", log_));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  save_adapters(dir / "adapters.json", base.config, r.weights);
  write_json(dir / "freeze.json", Json{{"base_checkpoint_sha256", checkpoint_hash(base_path)},
                                       {"before", r.frozen_before},
                                       {"after", r.frozen_after},
                                       {"unchanged", r.frozen_before == r.frozen_after}});

  Json summary{{"status", "ok"},
               {"command", "adapt"},
               {"run_dir", dir.string()},
               {"checkpoint", (dir / "adapters.json").string()},
               {"checkpoint_sha256", checkpoint_hash(dir / "adapters.json")},
               {"base_checkpoint_sha256", checkpoint_hash(base_path)},
               {"best_step", r.log.best.step},
               {"best_validation_perplexity", r.log.best.validation_perplexity},
               {"frozen_tensors_unchanged", r.frozen_before == r.frozen_after},
               {"seconds", seconds}};
  write_json(dir / "summary.json", summary);
  summary["cached"] = false;
  return summary;
}

Experiment::Models Experiment::load_models() {
  const fs::path base_path = base_manifest();
  const fs::path adapter_path = adapter_manifest();
  Models m;
  m.base = load_model(base_path);
  check_model_config(m.base, model_config_of(config_), base_path);
  const AdaptedWeights weights = load_adapters(adapter_path, m.base.config);
  m.adapters = weights.adapters;
  m.adapted = with_embeddings(m.base, weights);
  auto shown = [&](const fs::path& p) {
    const fs::path rel = p.lexically_relative(out_);
    return rel.empty() || *rel.begin() == ".." ? p.string() : rel.string();
  };
  m.provenance = Json{{"base", {{"path", shown(base_path)}, {"sha256", checkpoint_hash(base_path)}}},
                      {"adapters", {{"path", shown(adapter_path)}, {"sha256", checkpoint_hash(adapter_path)}}}};
  return m;
}

Json Experiment::analysis(const std::string& command) {
  const Models models = load_models();
  const Corpora corpora = load_corpora();
  const fs::path dir = analysis_dir(command);
  fs::create_directories(dir);
  log(command + ": writing " + dir.string());

  const Json& a = config_["analysis"];
  const std::uint64_t seed = a["seed"];
  const std::size_t window = a["window"];
  const PerplexityOptions ppl{window, a["eval_batch_size"]};
  const std::size_t d = models.base.config.d_model;
  const std::size_t n_layers = models.base.config.n_layers;
  const auto windows = split_windows(corpora.target_val, window);
  const AdapterView view(models.adapters);
  const bool all = command == "report";

  Json result = Json::object();
  std::vector<std::pair<std::string, std::string>> csvs;

  if (all || command == "lens") {
    const LangIdTable table = build_langid_table(corpora.spec, corpora.source, corpora.target,
                                                 models.base.config.vocab_size, config_["corpus"]["langid_threshold"]);
    const LensReport r = logit_lens(models.adapted, &view, windows, a["lens_k"], table);
    result["lens"] = to_json(r);
    csvs.emplace_back("lens.csv", lens_csv(r));
  }
  if (all || command == "norms") {
    const NormProfile r = norm_profile(models.adapted, models.adapters, windows, a["norm_tokens"], seed);
    result["norms"] = to_json(r);
    csvs.emplace_back("norms.csv", norms_csv(r));
  }
  if (all || command == "ablate") {
    const std::vector<LayerSpan> spans = spans_of(config_);
    AblationGrid r = ablation_sweep(models.adapted, models.adapters, corpora.target_val, ppl, spans);
    r.report_cap = a["report_cap"];
    result["ablation"] = to_json(r);
    csvs.emplace_back("ablation.csv", ablation_csv(r));
  }

  std::vector<ProbeData> probe_data;
  if (all || command == "probe" || command == "intervene") {
    probe_data = collect_probe_data(models.adapted, models.adapters, windows,
                                    negative_case_from_string(a["probe_case"]), a["probe_per_class"], seed);
  }
  if (all || command == "probe") {
    std::vector<std::size_t> ks = size_list(config_, "probe_ks");
    if (ks.empty()) ks = default_k_grid(d);
    const LogisticOptions options{a["probe_l2"], a["probe_epochs"], a["probe_lr"]};
    std::vector<ProbeLayerResult> layers;
    Json j = Json::array();
    for (const ProbeData& data : probe_data) {
      layers.push_back(probe_sweep(data, ks, seed, options));
      j.push_back(to_json(layers.back()));
    }
    result["probe"] = Json{{"negative_case", a["probe_case"]}, {"n_per_class", a["probe_per_class"]}, {"layers", j}};
    csvs.emplace_back("probe.csv", probe_csv(layers));
  }
  if (all || command == "intervene") {
    std::vector<MmdScores> rankings;
    Json mmd = Json::array();
    for (const ProbeData& data : probe_data) {
      rankings.push_back(mmd_rank(data.features, data.labels));
      mmd.push_back(to_json(rankings.back()));
    }
    std::vector<std::size_t> ns = size_list(config_, "intervention_features");
    if (ns.empty()) ns = default_feature_grid(d);
    std::vector<FeatureSelection> selections;
    for (const auto& s : string_list(config_, "intervention_selections"))
      selections.push_back(feature_selection_from_string(s));
    std::vector<InterventionMode> modes;
    for (const auto& s : string_list(config_, "intervention_modes")) modes.push_back(intervention_mode_from_string(s));

    const std::size_t only = a["intervention_layer"];
    InterventionReport r;
    if (only == 0) {
      r = intervention_sweep(models.adapted, models.adapters, corpora.target_val, rankings, ns, selections, modes, seed,
                             ppl);
    } else {
      r.unintervened_perplexity = perplexity(models.adapted, &models.adapters, corpora.target_val, std::nullopt, ppl);
      r.ablated_perplexity =
          perplexity(models.adapted, &models.adapters, corpora.target_val, LayerSpan{only, only}, ppl);
      for (std::size_t n : ns)
        for (FeatureSelection s : selections)
          for (InterventionMode m : modes) {
            const InterventionSpec spec{s, n, m, seed, only};
            r.entries.push_back(
                {n, s, m, intervene(models.adapted, models.adapters, corpora.target_val, rankings, spec, ppl)});
          }
    }
    result["intervention"] = Json{{"layer", only}, {"mmd", mmd}, {"sweep", to_json(r)}};
    csvs.emplace_back("intervention.csv", intervention_csv(r));
  }
  if (all || command == "pca-align") {
    const auto source_windows = split_windows(corpora.source_val, window);
    const std::size_t max_rows = a["pca_max_rows"];
    std::vector<AlignmentEntry> entries;
    Json j = Json::array();
    for (std::size_t layer : layers_or_all(size_list(config_, "pca_layers"), n_layers))
      for (const auto& name : string_list(config_, "pca_properties")) {
        const Property p = property_from_string(name);
        const auto src = property_representations(models.base, nullptr, source_windows, corpora.spec.source, p, layer,
                                                  max_rows);
        const auto tgt = property_representations(models.adapted, &view, windows, corpora.spec.target, p, layer,
                                                  max_rows);
        entries.push_back(pca_alignment(src, tgt, layer, p));
        j.push_back(to_json(entries.back()));
      }
    result["alignment"] = j;
    csvs.emplace_back("alignment.csv", alignment_csv(entries));
    csvs.emplace_back("projections.csv", projection_csv(entries));
  }

  const Json provenance{{"config_hash", config_hash(config_)},
                        {"config", config_},
                        {"checkpoints", models.provenance},
                        {"corpus", corpora.hashes},
                        {"seeds",
                         {{"corpus", config_["corpus"]["seed"]},
                          {"pretrain", config_["pretrain"]["seed"]},
                          {"pretrain_init", config_["pretrain"]["init_seed"]},
                          {"adapt", config_["adapt"]["seed"]},
                          {"adapt_init", config_["adapt"]["init_seed"]},
                          {"analysis", seed}}}};
  const std::string report_name = (command == "report" ? std::string("report") : command) + ".json";
  write_json(dir / "config.json", config_);
  write_json(dir / report_name, Json{{"command", command},
                                     {"timestamp", utc_timestamp()},
                                     {"provenance", provenance},
                                     {"result", result}});
  Json outputs = Json::array({"config.json", report_name});
  for (const auto& [name, text] : csvs) {
    write_text(dir / name, text);
    outputs.push_back(name);
  }
  return Json{{"status", "ok"}, {"command", command}, {"run_dir", dir.string()}, {"outputs", outputs}};
}

}  // namespace adaptlab
