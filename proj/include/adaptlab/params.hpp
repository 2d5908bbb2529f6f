#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "adaptlab/numerics.hpp"

namespace adaptlab {

using TokenId = std::uint32_t;

enum class PositionalKind { learned_absolute, rotary };

std::string to_string(PositionalKind kind);
PositionalKind positional_kind_from_string(const std::string& name);

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_ffn = 512;
  std::size_t vocab_size = 512;
  std::size_t max_seq_len = 128;
  PositionalKind positional = PositionalKind::learned_absolute;

  std::size_t head_dim() const { return d_model / n_heads; }
  // Throws InvalidArgument on a violated invariant.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Weights use the row-vector convention y = x W (in x out), biases and norm
// parameters are 1 x width.
struct LayerParams {
  Tensor2D ln1_gain, ln1_bias;
  Tensor2D wq, wk, wv, wo;
  Tensor2D ln2_gain, ln2_bias;
  Tensor2D ffn_w1, ffn_b1;  // d x d_ffn, 1 x d_ffn
  Tensor2D ffn_w2, ffn_b2;  // d_ffn x d, 1 x d
};

struct TransformerParams {
  ModelConfig config;
  Tensor2D token_embedding;     // V x d
  Tensor2D position_embedding;  // max_seq_len x d; 0 x 0 under rotary
  std::vector<LayerParams> layers;
  Tensor2D final_norm_gain, final_norm_bias;
  Tensor2D unembedding;  // d x V, independent of token_embedding

  // Named views of every tensor, in a fixed canonical order.
  std::vector<ParamRef> parameters();
  std::vector<std::pair<std::string, const Tensor2D*>> named_tensors() const;
};

inline constexpr const char* kTokenEmbeddingName = "embed.token";
inline constexpr const char* kPositionEmbeddingName = "embed.position";
inline constexpr const char* kUnembeddingName = "lm_head";

std::string layer_param_name(std::size_t layer, const char* field);

// Gaussian init (std `init_std`, residual output projections scaled by
// 1/sqrt(2L)), zero biases, unit norm gains.
TransformerParams init_transformer(const ModelConfig& config, std::uint64_t seed,
                                   double init_std = 0.02);

}  // namespace adaptlab
