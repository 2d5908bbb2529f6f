#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adaptlab/adapters.hpp"
#include "adaptlab/checkpoint.hpp"
#include "adaptlab/model.hpp"
#include "adaptlab/params.hpp"

namespace adaptlab {

enum class TrainPhase { pretrain, adapt };
std::string to_string(TrainPhase phase);
TrainPhase train_phase_from_string(const std::string& name);

struct TrainConfig {
  TrainPhase phase = TrainPhase::pretrain;
  std::size_t steps = 20000;
  std::size_t batch_size = 4;
  std::size_t seq_len = 16;  // tokens per training window, inputs are seq_len - 1
  double lr = 1e-3;
  std::size_t eval_every = 500;
  std::uint64_t seed = 0;
  double warmup_fraction = 0.02;
  double clip_norm = 1.0;
  std::size_t eval_batch_size = 64;

  void validate() const;
};

// Linear warmup over the first warmup_fraction of the steps, then constant.
double learning_rate_at(const TrainConfig& config, std::size_t step);

struct CheckpointRecord {
  std::size_t step = 0;
  double validation_perplexity = 0.0;
  std::string path;
};

// One record per evaluation point.
struct EvalRecord {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean over the steps since the previous evaluation (NaN at step 0)
  double validation_perplexity = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // pre-clip norm of the last step
};

Json to_json(const EvalRecord& record);

struct TrainHooks {
  std::function<void(const EvalRecord&)> on_eval;
  // Called after each optimizer update with the working parameters.
  std::function<void(std::size_t step, TransformerParams& working)> after_step;
};

struct TrainLog {
  std::vector<EvalRecord> evals;
  std::vector<double> step_losses;
  CheckpointRecord best;
};

struct PretrainResult {
  TransformerParams params;  // at the best validation perplexity
  TrainLog log;
};

PretrainResult pretrain(const TrainConfig& config, const ModelConfig& model_config, std::span<const TokenId> train,
                        std::span<const TokenId> validation, std::uint64_t init_seed, const TrainHooks& hooks = {});

struct AdaptResult {
  AdaptedWeights weights;  // at the best validation perplexity
  TrainLog log;
  std::map<std::string, std::string> frozen_before;  // tensor hashes before the first step
  std::map<std::string, std::string> frozen_after;   // and after the last
};

// Only adapter tensors and (optionally) the two embeddings are updated; every
// other tensor is hash-checked against its pre-adaptation value at each
// evaluation and at the end, throwing FreezeViolation on any difference.
AdaptResult adapt(const TrainConfig& config, const TransformerParams& base, const AdapterConfig& adapter_config,
                  bool trainable_embeddings, std::span<const TokenId> train, std::span<const TokenId> validation,
                  std::uint64_t init_seed, const TrainHooks& hooks = {});

struct PerplexityOptions {
  std::size_t window = 16;  // tokens per evaluation window
  std::size_t batch_size = 64;
};

// exp(mean NLL) over every token of the corpus that has a predecessor inside
// its window. Windows are consecutive non-overlapping slices; a trailing
// slice of at least two tokens is kept.
double perplexity(const TransformerParams& params, const AdapterView* adapters, std::span<const TokenId> corpus,
                  const PerplexityOptions& options = {});
double perplexity(const TransformerParams& params, const AdapterSet* adapters, std::span<const TokenId> corpus,
                  std::optional<LayerSpan> ablation, const PerplexityOptions& options = {});

// Hash of every tensor, keyed by parameter name.
std::map<std::string, std::string> tensor_hashes(const std::vector<std::pair<std::string, const Tensor2D*>>& tensors);

// Number of increases between consecutive non-overlapping window means.
std::size_t smoothed_increases(std::span<const double> losses, std::size_t window);

}  // namespace adaptlab
