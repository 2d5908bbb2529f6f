#include "adaptlab/training.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "adaptlab/corpus.hpp"
#include "adaptlab/error.hpp"

namespace adaptlab {

std::string to_string(TrainPhase phase) { return phase == TrainPhase::pretrain ? "pretrain" : "adapt"; }

TrainPhase train_phase_from_string(const std::string& name) {
  if (name == "pretrain") return TrainPhase::pretrain;
  if (name == "adapt") return TrainPhase::adapt;
  throw InvalidArgument("unknown training phase: " + name);
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw InvalidArgument("batch_size must be positive");
  if (seq_len < 2) throw InvalidArgument("seq_len must be at least 2");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("lr must be positive and finite");
  if (eval_every == 0) throw InvalidArgument("eval_every must be positive");
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0) throw InvalidArgument("warmup_fraction must lie in [0, 1]");
  if (!(clip_norm > 0.0)) throw InvalidArgument("clip_norm must be positive");
  if (eval_batch_size == 0) throw InvalidArgument("eval_batch_size must be positive");
}

double learning_rate_at(const TrainConfig& config, std::size_t step) {
  const double warmup = std::ceil(config.warmup_fraction * static_cast<double>(config.steps));
  if (warmup <= 0.0 || static_cast<double>(step) >= warmup) return config.lr;
  return config.lr * static_cast<double>(step + 1) / warmup;
}

Json to_json(const EvalRecord& r) {
  Json j{{"step", r.step}};
  j["train_loss"] = std::isfinite(r.train_loss) ? Json(r.train_loss) : Json(nullptr);
  j["val_ppl"] = r.validation_perplexity;
  j["lr"] = r.lr;
  j["grad_norm"] = r.grad_norm;
  return j;
}

std::map<std::string, std::string> tensor_hashes(const std::vector<std::pair<std::string, const Tensor2D*>>& tensors) {
  std::map<std::string, std::string> out;
  for (const auto& [name, t] : tensors) out[name] = tensor_hash(*t);
  return out;
}

std::size_t smoothed_increases(std::span<const double> losses, std::size_t window) {
  if (window == 0) throw InvalidArgument("smoothed_increases: window must be positive");
  std::vector<double> means;
  for (std::size_t s = 0; s + window <= losses.size(); s += window) {
    CompensatedSum sum;
    for (std::size_t i = s; i < s + window; ++i) sum.add(losses[i]);
    means.push_back(sum.value() / static_cast<double>(window));
  }
  std::size_t increases = 0;
  for (std::size_t i = 1; i < means.size(); ++i) increases += means[i] > means[i - 1];
  return increases;
}

double perplexity(const TransformerParams& params, const AdapterView* adapters, std::span<const TokenId> corpus,
                  const PerplexityOptions& options) {
  if (corpus.size() < 2) throw InvalidArgument("perplexity: corpus needs at least two tokens");
  if (options.window < 2) throw InvalidArgument("perplexity: window must be at least 2");
  if (options.window - 1 > params.config.max_seq_len) {
    throw InvalidArgument("perplexity: window of " + std::to_string(options.window) + " exceeds max_seq_len + 1");
  }
  if (options.batch_size == 0) throw InvalidArgument("perplexity: batch_size must be positive");
  validate_tokens(corpus, params.config.vocab_size);

  CompensatedSum nll;
  std::size_t count = 0;
  std::vector<LmExample> batch;
  auto flush = [&] {
    for (const NllSum& s : batch_nll(params, batch, adapters)) {
      nll.add(s.nll);
      count += s.count;
    }
    batch.clear();
  };
  for (std::size_t start = 0; start + 2 <= corpus.size(); start += options.window) {
    const std::size_t len = std::min(options.window, corpus.size() - start);
    batch.push_back(make_lm_example(corpus.subspan(start, len)));
    if (batch.size() == options.batch_size) flush();
  }
  if (!batch.empty()) flush();
  return std::exp(nll.value() / static_cast<double>(count));
}

double perplexity(const TransformerParams& params, const AdapterSet* adapters, std::span<const TokenId> corpus,
                  std::optional<LayerSpan> ablation, const PerplexityOptions& options) {
  if (adapters == nullptr) {
    if (ablation) throw InvalidArgument("perplexity: ablation requested without adapters");
    return perplexity(params, static_cast<const AdapterView*>(nullptr), corpus, options);
  }
  const AdapterView view = ablate(*adapters, ablation);
  return perplexity(params, &view, corpus, options);
}

namespace {

struct LoopState {
  TrainLog log;
  CompensatedSum loss_since_eval;
  std::size_t steps_since_eval = 0;
  double last_grad_norm = 0.0;
};

// Runs the optimizer loop shared by both phases. `evaluate` returns the
// validation perplexity of the current working state, `snapshot` stores it as
// the best so far, `step_fn` computes loss and gradients for a batch.
template <typename Evaluate, typename Snapshot, typename StepFn>
TrainLog run_loop(const TrainConfig& config, std::span<const TokenId> train, std::size_t max_seq_len,
                  const TrainHooks& hooks, Evaluate&& evaluate, Snapshot&& snapshot, StepFn&& step_fn) {
  LoopState st;
  double best = std::numeric_limits<double>::infinity();

  auto eval_point = [&](std::size_t step, double lr) {
    EvalRecord rec;
    rec.step = step;
    rec.train_loss = st.steps_since_eval == 0 ? std::numeric_limits<double>::quiet_NaN()
                                              : st.loss_since_eval.value() / static_cast<double>(st.steps_since_eval);
    rec.validation_perplexity = evaluate();
    rec.lr = lr;
    rec.grad_norm = st.last_grad_norm;
    if (!std::isfinite(rec.validation_perplexity)) {
      throw NumericalError("validation perplexity is not finite at step " + std::to_string(step));
    }
    if (rec.validation_perplexity < best) {
      best = rec.validation_perplexity;
      st.log.best = CheckpointRecord{step, best, ""};
      snapshot();
    }
    st.log.evals.push_back(rec);
    if (hooks.on_eval) hooks.on_eval(rec);
    st.loss_since_eval = CompensatedSum{};
    st.steps_since_eval = 0;
  };

  eval_point(0, 0.0);
  if (config.steps == 0) return std::move(st.log);

  BatchIterator batches(train, config.batch_size, config.seq_len, config.seed, max_seq_len + 1);
  std::vector<LmExample> batch(config.batch_size);
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const std::size_t epoch = batches.epoch();
    const auto windows = batches.next();
    for (std::size_t b = 0; b < windows.size(); ++b) batch[b] = make_lm_example(windows[b]);
    const double lr = learning_rate_at(config, step - 1);
    const double loss = step_fn(batch, lr, st.last_grad_norm);
    if (!std::isfinite(loss) || !std::isfinite(st.last_grad_norm)) {
      std::ostringstream os;
      os << "non-finite training loss at step " << step << " (batch seed " << config.seed << ", epoch " << epoch
         << ", batch " << (step - 1) % batches.batches_per_epoch() << ")";
      throw NumericalError(os.str());
    }
    st.log.step_losses.push_back(loss);
    st.loss_since_eval.add(loss);
    ++st.steps_since_eval;
    if (step % config.eval_every == 0 || step == config.steps) eval_point(step, lr);
  }
  return std::move(st.log);
}

}  // namespace

PretrainResult pretrain(const TrainConfig& config, const ModelConfig& model_config, std::span<const TokenId> train,
                        std::span<const TokenId> validation, std::uint64_t init_seed, const TrainHooks& hooks) {
  config.validate();
  if (config.phase != TrainPhase::pretrain) throw InvalidArgument("pretrain: config.phase must be pretrain");
  model_config.validate();
  validate_tokens(train, model_config.vocab_size);

  TransformerParams working = init_transformer(model_config, init_seed);
  PretrainResult result{working, {}};
  const FreezeMask mask = FreezeMask::for_pretraining(working);
  const std::vector<ParamRef> refs = working.parameters();
  AdamState adam;
  AdamConfig adam_config;
  const PerplexityOptions eval_options{config.seq_len, config.eval_batch_size};

  result.log = run_loop(
      config, train, model_config.max_seq_len, hooks,
      [&] { return perplexity(working, static_cast<const AdapterView*>(nullptr), validation, eval_options); },
      [&] { result.params = working; },
      [&](std::span<const LmExample> batch, double lr, double& grad_norm) {
        BackwardResult br = backward(working, nullptr, batch, mask);
        grad_norm = clip_global_norm(br.grads, config.clip_norm);
        if (std::isfinite(br.loss) && std::isfinite(grad_norm)) adam_step(refs, br.grads, adam, adam_config, lr);
        if (hooks.after_step) hooks.after_step(adam.step, working);
        return br.loss;
      });
  return result;
}

AdaptResult adapt(const TrainConfig& config, const TransformerParams& base, const AdapterConfig& adapter_config,
                  bool trainable_embeddings, std::span<const TokenId> train, std::span<const TokenId> validation,
                  std::uint64_t init_seed, const TrainHooks& hooks) {
  config.validate();
  if (config.phase != TrainPhase::adapt) throw InvalidArgument("adapt: config.phase must be adapt");
  validate_tokens(train, base.config.vocab_size);

  TransformerParams working = base;
  AdapterSet adapters = init_adapters(base.config, adapter_config, init_seed);
  adapters.trainable_embeddings = trainable_embeddings;
  const FreezeMask mask = FreezeMask::for_adaptation(working, adapters);

  std::vector<std::pair<std::string, const Tensor2D*>> frozen;
  for (const auto& entry : working.named_tensors())
    if (!mask.contains(entry.first)) frozen.push_back(entry);
  const auto frozen_hashes = tensor_hashes(frozen);
  auto verify_frozen = [&] {
    const auto now = tensor_hashes(frozen);
    for (const auto& [name, hash] : frozen_hashes) {
      if (now.at(name) != hash) throw FreezeViolation("frozen tensor " + name + " changed during adaptation");
    }
  };

  std::vector<ParamRef> refs = adapters.parameters();
  for (ParamRef& ref : working.parameters())
    if (mask.contains(ref.name)) refs.push_back(ref);

  AdaptResult result{AdaptedWeights{adapters, working.token_embedding, working.unembedding}, {}, {}, {}};
  AdamState adam;
  AdamConfig adam_config;
  const PerplexityOptions eval_options{config.seq_len, config.eval_batch_size};

  result.log = run_loop(
      config, train, base.config.max_seq_len, hooks,
      [&] {
        verify_frozen();
        const AdapterView view(adapters);
        return perplexity(working, &view, validation, eval_options);
      },
      [&] { result.weights = AdaptedWeights{adapters, working.token_embedding, working.unembedding}; },
      [&](std::span<const LmExample> batch, double lr, double& grad_norm) {
        BackwardResult br = backward(working, &adapters, batch, mask);
        grad_norm = clip_global_norm(br.grads, config.clip_norm);
        if (std::isfinite(br.loss) && std::isfinite(grad_norm)) adam_step(refs, br.grads, adam, adam_config, lr);
        if (hooks.after_step) hooks.after_step(adam.step, working);
        return br.loss;
      });
  verify_frozen();
  result.frozen_before = frozen_hashes;
  result.frozen_after = tensor_hashes(frozen);
  return result;
}

}  // namespace adaptlab
