#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "adaptlab/error.hpp"
#include "adaptlab/experiment.hpp"

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kMissing = 3, kNumerical = 4 };

int fail(int code, const std::string& kind, const std::string& message) {
  const adaptlab::Json j{{"status", "error"}, {"exit_code", code}, {"error", kind}, {"message", message}};
  std::cout << j.dump() << std::endl;
  std::cerr << "adaptlab: " << kind << ": " << message << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train small decoder models, adapt them to a new synthetic language, and analyze the adapters."};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string out = "runs";
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Override one config value, section.key=value (repeatable)")
      ->allow_extra_args(false);
  app.add_option("--out", out, "Root directory for run directories")->capture_default_str();
  app.add_option("--seed", seed, "Set every seed in the config");

  const std::vector<std::pair<std::string, std::string>> commands{
      {"synth-gen", "Generate the synthetic source/target corpora"},
      {"pretrain", "Pretrain the base model on the source language"},
      {"adapt", "Train adapters and embeddings on the target language"},
      {"lens", "Logit-lens language fractions per layer"},
      {"norms", "Adapter, feed-forward and residual norms per layer"},
      {"ablate", "Perplexity after removing adapter spans"},
      {"probe", "Sparse logistic probes on MMD-ranked features"},
      {"intervene", "Perplexity after intervening on adapter output features"},
      {"pca-align", "PCA alignment of source and target representations"},
      {"report", "All analyses for one checkpoint pair"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kConfig, "usage", e.what());
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    std::optional<std::filesystem::path> file;
    if (!config_path.empty()) file = config_path;
    adaptlab::Experiment experiment(adaptlab::resolve_config(file, seed, overrides), out,
                                    [](const std::string& line) { std::cerr << line << std::endl; });
    std::cout << experiment.run(command).dump() << std::endl;
    return kOk;
  } catch (const adaptlab::ConfigError& e) {
    return fail(kConfig, "config", e.what());
  } catch (const adaptlab::MissingArtifact& e) {
    return fail(kMissing, "missing_checkpoint", e.what());
  } catch (const adaptlab::NumericalError& e) {
    return fail(kNumerical, "numerical", e.what());
  } catch (const adaptlab::FreezeViolation& e) {
    return fail(kFailure, "freeze_violation", e.what());
  } catch (const std::exception& e) {
    return fail(kFailure, "error", e.what());
  }
}
