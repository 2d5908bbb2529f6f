#include "adaptlab/params.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "adaptlab/error.hpp"

namespace adaptlab {

std::string to_string(PositionalKind kind) {
  return kind == PositionalKind::rotary ? "rotary" : "learned_absolute";
}

PositionalKind positional_kind_from_string(const std::string& name) {
  if (name == "learned_absolute") return PositionalKind::learned_absolute;
  if (name == "rotary") return PositionalKind::rotary;
  throw InvalidArgument("unknown positional kind '" + name + "'");
}

void ModelConfig::validate() const {
  if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
    throw InvalidArgument("ModelConfig: d_model (" + std::to_string(d_model) +
                          ") must be a positive multiple of n_heads (" + std::to_string(n_heads) + ")");
  }
  if (d_ffn < d_model) throw InvalidArgument("ModelConfig: d_ffn must be >= d_model");
  if (vocab_size < 2) throw InvalidArgument("ModelConfig: vocab_size must be >= 2");
  if (max_seq_len == 0) throw InvalidArgument("ModelConfig: max_seq_len must be >= 1");
  if (positional == PositionalKind::rotary && head_dim() % 2 != 0) {
    throw InvalidArgument("ModelConfig: rotary embeddings need an even head dimension");
  }
}

std::string layer_param_name(std::size_t layer, const char* field) {
  return "layers." + std::to_string(layer) + "." + field;
}

namespace {

template <typename Layer, typename Fn>
void for_each_layer_tensor(Layer& layer, std::size_t l, Fn&& fn) {
  fn(layer_param_name(l, "ln1.gain"), layer.ln1_gain);
  fn(layer_param_name(l, "ln1.bias"), layer.ln1_bias);
  fn(layer_param_name(l, "attn.wq"), layer.wq);
  fn(layer_param_name(l, "attn.wk"), layer.wk);
  fn(layer_param_name(l, "attn.wv"), layer.wv);
  fn(layer_param_name(l, "attn.wo"), layer.wo);
  fn(layer_param_name(l, "ln2.gain"), layer.ln2_gain);
  fn(layer_param_name(l, "ln2.bias"), layer.ln2_bias);
  fn(layer_param_name(l, "ffn.w1"), layer.ffn_w1);
  fn(layer_param_name(l, "ffn.b1"), layer.ffn_b1);
  fn(layer_param_name(l, "ffn.w2"), layer.ffn_w2);
  fn(layer_param_name(l, "ffn.b2"), layer.ffn_b2);
}

template <typename Params, typename Fn>
void for_each_tensor(Params& p, Fn&& fn) {
  fn(std::string(kTokenEmbeddingName), p.token_embedding);
  if (p.config.positional == PositionalKind::learned_absolute) {
    fn(std::string(kPositionEmbeddingName), p.position_embedding);
  }
  for (std::size_t l = 0; l < p.layers.size(); ++l) for_each_layer_tensor(p.layers[l], l, fn);
  fn(std::string("final_norm.gain"), p.final_norm_gain);
  fn(std::string("final_norm.bias"), p.final_norm_bias);
  fn(std::string(kUnembeddingName), p.unembedding);
}

}  // namespace

std::vector<ParamRef> TransformerParams::parameters() {
  std::vector<ParamRef> out;
  for_each_tensor(*this, [&](const std::string& name, Tensor2D& t) {
    out.push_back(ParamRef{name, &t, true});
  });
  return out;
}

std::vector<std::pair<std::string, const Tensor2D*>> TransformerParams::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor2D*>> out;
  for_each_tensor(*this, [&](const std::string& name, const Tensor2D& t) { out.emplace_back(name, &t); });
  return out;
}

TransformerParams init_transformer(const ModelConfig& config, std::uint64_t seed, double init_std) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](std::size_t r, std::size_t c, double stddev) {
    Tensor2D t(r, c);
    for (double& v : t.values()) v = stddev * normal(rng);
    return t;
  };
  const std::size_t d = config.d_model;
  const double proj_std = init_std / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(config.n_layers, 1)));

  TransformerParams p;
  p.config = config;
  p.token_embedding = gaussian(config.vocab_size, d, init_std);
  if (config.positional == PositionalKind::learned_absolute) {
    p.position_embedding = gaussian(config.max_seq_len, d, init_std);
  }
  p.layers.resize(config.n_layers);
  for (auto& layer : p.layers) {
    layer.ln1_gain = Tensor2D(1, d, 1.0);
    layer.ln1_bias = Tensor2D(1, d);
    layer.wq = gaussian(d, d, init_std);
    layer.wk = gaussian(d, d, init_std);
    layer.wv = gaussian(d, d, init_std);
    layer.wo = gaussian(d, d, proj_std);
    layer.ln2_gain = Tensor2D(1, d, 1.0);
    layer.ln2_bias = Tensor2D(1, d);
    layer.ffn_w1 = gaussian(d, config.d_ffn, init_std);
    layer.ffn_b1 = Tensor2D(1, config.d_ffn);
    layer.ffn_w2 = gaussian(config.d_ffn, d, proj_std);
    layer.ffn_b2 = Tensor2D(1, d);
  }
  p.final_norm_gain = Tensor2D(1, d, 1.0);
  p.final_norm_bias = Tensor2D(1, d);
  p.unembedding = gaussian(d, config.vocab_size, init_std);
  return p;
}

}  // namespace adaptlab
