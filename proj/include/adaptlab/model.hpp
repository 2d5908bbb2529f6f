#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "adaptlab/adapters.hpp"
#include "adaptlab/numerics.hpp"
#include "adaptlab/params.hpp"

namespace adaptlab {

// Residual-stream bookkeeping for one decoder layer; every tensor is N x d.
//   x_attn = x_prev + attn_out
//   x_ffn  = x_attn + ffn_out
//   x_out  = x_ffn  + adapter_out
// In LoRA mode ffn_out is the frozen FFN path evaluated on the LoRA-modified
// hidden, and adapter_out is the second LoRA pair's contribution.
struct LayerTrace {
  Tensor2D x_attn;
  Tensor2D x_ffn;
  Tensor2D x_out;
  Tensor2D attn_out;
  Tensor2D ffn_out;
  Tensor2D adapter_out;
};

struct ResidualTrace {
  Tensor2D embedded;  // x_out^0
  std::vector<LayerTrace> layers;
};

// The adapter wiring for one block. Null members mean "absent".
struct BlockAdapter {
  const PfeifferAdapter* pfeiffer = nullptr;
  const LoraLayer* lora = nullptr;
  const FeatureIntervention* intervention = nullptr;
};

struct BlockOutput {
  Tensor2D x_out;
  LayerTrace trace;
};

// One pre-norm decoder block with causal self-attention over the N rows of
// x_prev. `ablated` suppresses the adapter's update entirely.
BlockOutput decoder_block_forward(const ModelConfig& config, const LayerParams& layer,
                                  const Tensor2D& x_prev, const BlockAdapter* adapter,
                                  bool ablated);

struct ForwardOptions {
  const AdapterView* adapters = nullptr;
  bool capture_trace = false;
};

struct ForwardResult {
  Tensor2D logits;  // N x V
  std::optional<ResidualTrace> trace;
};

ForwardResult model_forward(const TransformerParams& params, std::span<const TokenId> tokens,
                            const ForwardOptions& options = {});

// Convenience: all adapters of `adapters` active (or none when null).
ForwardResult model_forward(const TransformerParams& params, std::span<const TokenId> tokens,
                            const AdapterSet* adapters, bool capture_trace = false);

// Logit-lens primitive: softmax(unembedding^T norm_f(h)) (norm optional).
std::vector<double> unembed_hidden(std::span<const double> hidden, const TransformerParams& params,
                                   bool apply_final_norm = true);
std::vector<double> unembed_logits(std::span<const double> hidden, const TransformerParams& params,
                                   bool apply_final_norm = true);

// One training example: inputs[i] predicts targets[i].
struct LmExample {
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
};

// Splits a window t_0..t_n into inputs t_0..t_{n-1} and targets t_1..t_n.
LmExample make_lm_example(std::span<const TokenId> window);

struct BackwardResult {
  double loss = 0.0;  // mean NLL over every target in the batch
  GradientSet grads;  // entries only for names in the freeze mask
};

// Exact gradients of the mean cross-entropy over the batch. Frozen tensors get
// no entry. Adapters, when given, are all active.
BackwardResult backward(const TransformerParams& params, const AdapterSet* adapters,
                        std::span<const LmExample> batch, const FreezeMask& mask);

// Sum of NLL and number of scored targets for one example (no gradients).
struct NllSum {
  double nll = 0.0;
  std::size_t count = 0;
};
NllSum example_nll(const TransformerParams& params, const LmExample& example,
                   const AdapterView* adapters);
// Same, for several examples evaluated in one stacked pass.
std::vector<NllSum> batch_nll(const TransformerParams& params, std::span<const LmExample> batch,
                              const AdapterView* adapters);

}  // namespace adaptlab
