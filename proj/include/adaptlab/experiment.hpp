#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "adaptlab/adapters.hpp"
#include "adaptlab/checkpoint.hpp"
#include "adaptlab/corpus.hpp"
#include "adaptlab/training.hpp"

namespace adaptlab {

// ---------------------------------------------------------------------------
// Experiment configuration: a JSON document with sections model, corpus,
// pretrain, adapt and analysis. default_config() lists every accepted key.

Json default_config();

// Overlays `overlay` onto `config`. Unknown keys and values whose JSON type
// differs from the default's raise ConfigError.
void merge_config(Json& config, const Json& overlay);

Json load_config_file(const std::filesystem::path& path);

// "section.key=value". The value is parsed as JSON and falls back to a plain
// string when it does not parse.
void apply_override(Json& config, const std::string& assignment);

// Sets every seed in the document to `seed`.
void apply_seed(Json& config, std::uint64_t seed);

// Semantic validation through the typed configs; throws ConfigError.
void validate_config(const Json& config);

// defaults < file < seed < overrides, validated.
Json resolve_config(const std::optional<std::filesystem::path>& file, std::optional<std::uint64_t> seed,
                    const std::vector<std::string>& overrides);

// First 16 hex digits of SHA-256 over the compact dump.
std::string config_hash(const Json& j);

ModelConfig model_config_of(const Json& config);
LanguagePairOptions language_options_of(const Json& config);
TrainConfig train_config_of(const Json& config, TrainPhase phase);
AdapterConfig adapter_config_of(const Json& config);

inline const std::vector<std::string>& experiment_commands() {
  static const std::vector<std::string> names{"synth-gen", "pretrain", "adapt",     "lens",  "norms",
                                              "ablate",    "probe",    "intervene", "pca-align", "report"};
  return names;
}

// ---------------------------------------------------------------------------
// Runner. Every stage writes into `<out>/<stage>-<hash>/` where the hash covers
// the config sections the stage depends on. Corpus generation and training are
// reused when their directory is complete; analyses always recompute.

class Experiment {
 public:
  using Logger = std::function<void(const std::string&)>;

  Experiment(Json config, std::filesystem::path out_root, Logger log = {});

  const Json& config() const { return config_; }

  std::filesystem::path corpus_dir() const;
  std::filesystem::path pretrain_dir() const;
  std::filesystem::path adapt_dir() const;
  std::filesystem::path analysis_dir(const std::string& command) const;

  // Base and adapter manifests: the configured checkpoint paths when set,
  // otherwise the ones inside the training run directories.
  std::filesystem::path base_manifest() const;
  std::filesystem::path adapter_manifest() const;

  // Dispatches a command name; returns the JSON summary line.
  Json run(const std::string& command);

  Json synth_gen();
  Json pretrain();
  Json adapt();
  Json analysis(const std::string& command);

 private:
  struct Corpora;
  struct Models;

  Corpora load_corpora();
  Models load_models();
  void log(const std::string& line) const;

  Json config_;
  std::filesystem::path out_;
  Logger log_;
};

}  // namespace adaptlab
