#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "adaptlab/numerics.hpp"
#include "adaptlab/params.hpp"

namespace adaptlab {

enum class AdapterMode { pfeiffer, lora };

std::string to_string(AdapterMode mode);
AdapterMode adapter_mode_from_string(const std::string& name);

// adapter(x) = W2 relu(W1 x). No biases, no internal normalization.
struct PfeifferAdapter {
  Tensor2D w1;  // b x d
  Tensor2D w2;  // d x b

  std::size_t bottleneck() const { return w1.rows(); }
};

// lora(x) = scale * up (down x)
struct LoraPair {
  Tensor2D down;  // r x d_in
  Tensor2D up;    // d_out x r
  double scale = 1.0;

  std::size_t rank() const { return down.rows(); }
};

// One LoRA pair per FFN sublayer: the first reads x_attn and writes into the
// d_ffn hidden, the second reads that hidden and writes into the residual.
struct LoraLayer {
  LoraPair ffn_in;
  LoraPair ffn_out;
};

struct AdapterConfig {
  AdapterMode mode = AdapterMode::pfeiffer;
  std::size_t reduction_factor = 16;
  std::size_t lora_rank = 8;
  double lora_scale = 1.0;
  double init_std = 0.02;

  friend bool operator==(const AdapterConfig&, const AdapterConfig&) = default;
};

struct AdapterSet {
  AdapterConfig config;
  std::vector<PfeifferAdapter> pfeiffer;  // populated in pfeiffer mode
  std::vector<LoraLayer> lora;            // populated in lora mode
  bool trainable_embeddings = true;

  AdapterMode mode() const { return config.mode; }
  std::size_t n_layers() const;
  std::size_t parameter_count() const;
  std::vector<ParamRef> parameters();
  std::vector<std::pair<std::string, const Tensor2D*>> named_tensors() const;
};

// Down/W1 matrices ~ N(0, init_std^2); up/W2 matrices are zero so the adapted
// model initially computes exactly the base model.
AdapterSet init_adapters(const ModelConfig& model, const AdapterConfig& config, std::uint64_t seed);

std::vector<double> pfeiffer_forward(std::span<const double> x, const PfeifferAdapter& adapter);
std::vector<double> lora_forward(std::span<const double> x, const LoraPair& pair);

struct LoraBlockOutput {
  std::vector<double> x_ffn1;  // d_ffn
  std::vector<double> x_ffn2;  // d
  std::vector<double> x_out;   // x_attn + x_ffn2
};

// Single-position FFN block with LoRA on both FFN sublayers:
//   x_ffn1 = gelu(W1 norm(x_attn) + b1) + lora1(x_attn)
//   x_ffn2 = W2 x_ffn1 + b2 + lora2(x_ffn1)
LoraBlockOutput lora_block_forward(std::span<const double> x_attn, const LayerParams& layer,
                                   const LoraPair& lora1, const LoraPair& lora2);

// ---------------------------------------------------------------------------
// Ablation / intervention views.

// Inclusive, 1-based layer range.
struct LayerSpan {
  std::size_t first = 1;
  std::size_t last = 1;

  std::size_t length() const { return last - first + 1; }
  friend bool operator==(const LayerSpan&, const LayerSpan&) = default;
};

enum class InterventionMode { zero, mean_replace };

std::string to_string(InterventionMode mode);
InterventionMode intervention_mode_from_string(const std::string& name);

// Dimensions of an adapter's output vector to overwrite before the residual
// addition. mean_replace writes the mean of the untouched entries of the same
// vector (0 when every entry is selected).
struct FeatureIntervention {
  std::vector<std::size_t> features;
  InterventionMode mode = InterventionMode::zero;
};

// Non-owning view over an AdapterSet that flags layers as ablated or
// intervened on. The underlying parameters are never modified.
class AdapterView {
 public:
  explicit AdapterView(const AdapterSet& set);

  const AdapterSet& set() const { return *set_; }
  std::size_t n_layers() const { return ablated_.size(); }

  bool ablated(std::size_t layer) const { return ablated_.at(layer); }
  const FeatureIntervention* intervention(std::size_t layer) const;

  // Both return a modified copy.
  AdapterView with_ablation(LayerSpan span) const;
  AdapterView with_intervention(std::size_t layer, FeatureIntervention intervention) const;

 private:
  const AdapterSet* set_;
  std::vector<bool> ablated_;
  std::vector<std::optional<FeatureIntervention>> interventions_;
};

// Throws InvalidArgument unless 1 <= first <= last <= n_layers.
void validate_span(LayerSpan span, std::size_t n_layers);

// Flags every layer in `span`; nullopt means the empty span.
AdapterView ablate(const AdapterSet& set, std::optional<LayerSpan> span);

// ---------------------------------------------------------------------------
// Freezing.

struct FreezeMask {
  std::set<std::string> trainable;

  bool contains(const std::string& name) const { return trainable.count(name) != 0; }
  bool empty() const { return trainable.empty(); }

  static FreezeMask none() { return {}; }
  static FreezeMask for_pretraining(const TransformerParams& params);
  // Adapter tensors + token_embedding + unembedding, nothing else.
  static FreezeMask for_adaptation(const TransformerParams& params, const AdapterSet& adapters);
};

}  // namespace adaptlab
