#include "adaptlab/model.hpp"

#include <algorithm>
#include <cmath>

#include "adaptlab/error.hpp"
#include "kernels.hpp"

namespace adaptlab {

namespace {

using detail::NormCache;

constexpr double kRopeBase = 10000.0;

// Rotates consecutive (even, odd) pairs of each head by position-dependent
// angles; positions restart at every segment. `direction` = -1 inverts.
void apply_rope(Tensor2D& x, std::size_t n_heads, std::span<const std::size_t> segments, double direction) {
  const std::size_t dh = x.cols() / n_heads;
  std::vector<double> freq(dh / 2);
  for (std::size_t j = 0; j < dh / 2; ++j)
    freq[j] = std::pow(kRopeBase, -2.0 * static_cast<double>(j) / static_cast<double>(dh));
  std::size_t r = 0;
  for (std::size_t len : segments) {
    for (std::size_t pos = 0; pos < len; ++pos, ++r) {
      auto row = x.row(r);
      for (std::size_t j = 0; j < dh / 2; ++j) {
        const double angle = direction * static_cast<double>(pos) * freq[j];
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        for (std::size_t h = 0; h < n_heads; ++h) {
          double& a = row[h * dh + 2 * j];
          double& b = row[h * dh + 2 * j + 1];
          const double x0 = a;
          const double x1 = b;
          a = x0 * c - x1 * s;
          b = x0 * s + x1 * c;
        }
      }
    }
  }
}

void apply_intervention(Tensor2D& update, const FeatureIntervention& iv) {
  const std::size_t d = update.cols();
  std::vector<bool> chosen(d, false);
  for (std::size_t j : iv.features) {
    if (j >= d) throw InvalidArgument("intervention feature " + std::to_string(j) + " >= d");
    chosen[j] = true;
  }
  for (std::size_t r = 0; r < update.rows(); ++r) {
    auto row = update.row(r);
    double fill = 0.0;
    if (iv.mode == InterventionMode::mean_replace) {
      double s = 0.0;
      std::size_t n = 0;
      for (std::size_t j = 0; j < d; ++j) {
        if (!chosen[j]) {
          s += row[j];
          ++n;
        }
      }
      fill = n > 0 ? s / static_cast<double>(n) : 0.0;
    }
    for (std::size_t j = 0; j < d; ++j)
      if (chosen[j]) row[j] = fill;
  }
}

struct BlockCache {
  std::vector<std::size_t> segments;
  Tensor2D x_prev;
  NormCache ln1;
  Tensor2D normed1;
  Tensor2D q, k, v;  // q, k after rotary
  std::vector<Tensor2D> probs;
  Tensor2D ctx;
  Tensor2D x_attn;
  NormCache ln2;
  Tensor2D normed2;
  Tensor2D hidden_pre;
  Tensor2D hidden_act;
  Tensor2D hidden_tanh;
  // LoRA
  Tensor2D lora1_z;
  Tensor2D x_ffn1;
  Tensor2D lora2_z;
  // Pfeiffer
  Tensor2D x_ffn;
  Tensor2D adapter_u;
  Tensor2D adapter_z;
  bool pfeiffer_active = false;
  bool lora_active = false;
};

BlockOutput block_forward(const ModelConfig& config, const LayerParams& layer, const Tensor2D& x_prev,
                          std::span<const std::size_t> segments, const BlockAdapter* adapter, bool ablated,
                          BlockCache* cache) {
  const std::size_t n = x_prev.rows();
  const std::size_t d = config.d_model;
  if (x_prev.cols() != d) {
    throw ShapeError("decoder_block_forward: input " + x_prev.shape_string() + " but d_model=" +
                     std::to_string(d));
  }
  const std::size_t n_heads = config.n_heads;

  NormCache ln1;
  Tensor2D normed1 = detail::layer_norm(x_prev, layer.ln1_gain, layer.ln1_bias, &ln1);
  Tensor2D q = matmul(normed1, layer.wq);
  Tensor2D k = matmul(normed1, layer.wk);
  Tensor2D v = matmul(normed1, layer.wv);
  if (config.positional == PositionalKind::rotary) {
    apply_rope(q, n_heads, segments, 1.0);
    apply_rope(k, n_heads, segments, 1.0);
  }

  Tensor2D ctx;
  std::vector<Tensor2D> probs;
  detail::causal_attention_forward(q, k, v, n_heads, segments, ctx, cache != nullptr ? &probs : nullptr);

  BlockOutput out;
  LayerTrace& tr = out.trace;
  tr.attn_out = matmul(ctx, layer.wo);
  tr.x_attn = x_prev;
  detail::add_into(tr.x_attn, tr.attn_out);

  NormCache ln2;
  Tensor2D normed2 = detail::layer_norm(tr.x_attn, layer.ln2_gain, layer.ln2_bias, &ln2);
  Tensor2D hidden_pre = matmul(normed2, layer.ffn_w1);
  detail::add_row_bias(hidden_pre, layer.ffn_b1);
  Tensor2D hidden_act, hidden_tanh;
  detail::gelu_forward(hidden_pre, hidden_act, hidden_tanh);

  const bool pfeiffer_active =
      adapter != nullptr && adapter->pfeiffer != nullptr && !ablated;
  const bool lora_active = adapter != nullptr && adapter->lora != nullptr && !ablated;
  const FeatureIntervention* intervention = adapter != nullptr ? adapter->intervention : nullptr;

  Tensor2D lora1_z, lora2_z, x_ffn1, adapter_u, adapter_z;
  if (lora_active) {
    const LoraLayer& lora = *adapter->lora;
    lora1_z = matmul_bt(tr.x_attn, lora.ffn_in.down);
    Tensor2D l1 = matmul_bt(lora1_z, lora.ffn_in.up);
    detail::scale_inplace(l1, lora.ffn_in.scale);
    x_ffn1 = hidden_act;
    detail::add_into(x_ffn1, l1);
    tr.ffn_out = matmul(x_ffn1, layer.ffn_w2);
    detail::add_row_bias(tr.ffn_out, layer.ffn_b2);
    lora2_z = matmul_bt(x_ffn1, lora.ffn_out.down);
    tr.adapter_out = matmul_bt(lora2_z, lora.ffn_out.up);
    detail::scale_inplace(tr.adapter_out, lora.ffn_out.scale);
  } else {
    tr.ffn_out = matmul(hidden_act, layer.ffn_w2);
    detail::add_row_bias(tr.ffn_out, layer.ffn_b2);
  }
  tr.x_ffn = tr.x_attn;
  detail::add_into(tr.x_ffn, tr.ffn_out);

  if (pfeiffer_active) {
    const PfeifferAdapter& a = *adapter->pfeiffer;
    adapter_u = matmul_bt(tr.x_ffn, a.w1);
    adapter_z = adapter_u;
    for (double& x : adapter_z.values()) x = x > 0.0 ? x : 0.0;
    tr.adapter_out = matmul_bt(adapter_z, a.w2);
  }

  if (pfeiffer_active || lora_active) {
    if (intervention != nullptr) apply_intervention(tr.adapter_out, *intervention);
    tr.x_out = tr.x_ffn;
    detail::add_into(tr.x_out, tr.adapter_out);
  } else {
    tr.adapter_out = Tensor2D(n, d);
    tr.x_out = tr.x_ffn;
  }
  out.x_out = tr.x_out;

  if (cache != nullptr) {
    cache->segments.assign(segments.begin(), segments.end());
    cache->x_prev = x_prev;
    cache->ln1 = std::move(ln1);
    cache->normed1 = std::move(normed1);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->ctx = std::move(ctx);
    cache->x_attn = tr.x_attn;
    cache->ln2 = std::move(ln2);
    cache->normed2 = std::move(normed2);
    cache->hidden_pre = std::move(hidden_pre);
    cache->hidden_act = std::move(hidden_act);
    cache->hidden_tanh = std::move(hidden_tanh);
    cache->lora1_z = std::move(lora1_z);
    cache->x_ffn1 = std::move(x_ffn1);
    cache->lora2_z = std::move(lora2_z);
    cache->x_ffn = tr.x_ffn;
    cache->adapter_u = std::move(adapter_u);
    cache->adapter_z = std::move(adapter_z);
    cache->pfeiffer_active = pfeiffer_active;
    cache->lora_active = lora_active;
  }
  return out;
}

using Sequences = std::span<const std::span<const TokenId>>;

// Stacks the sequences' embeddings row-wise; `segments` receives their lengths.
Tensor2D embed(const TransformerParams& params, Sequences sequences, std::vector<std::size_t>& segments) {
  const ModelConfig& cfg = params.config;
  std::size_t rows = 0;
  segments.clear();
  for (const auto& tokens : sequences) {
    if (tokens.empty()) throw InvalidArgument("model_forward: empty token sequence");
    if (tokens.size() > cfg.max_seq_len) {
      throw InvalidArgument("model_forward: sequence length " + std::to_string(tokens.size()) +
                            " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    segments.push_back(tokens.size());
    rows += tokens.size();
  }
  Tensor2D x(rows, cfg.d_model);
  std::size_t r = 0;
  for (const auto& tokens : sequences) {
    for (std::size_t i = 0; i < tokens.size(); ++i, ++r) {
      if (tokens[i] >= cfg.vocab_size) {
        throw InvalidArgument("model_forward: token " + std::to_string(tokens[i]) +
                              " out of range for vocab " + std::to_string(cfg.vocab_size));
      }
      auto row = x.row(r);
      auto e = params.token_embedding.row(tokens[i]);
      for (std::size_t j = 0; j < cfg.d_model; ++j) row[j] = e[j];
      if (cfg.positional == PositionalKind::learned_absolute) {
        auto p = params.position_embedding.row(i);
        for (std::size_t j = 0; j < cfg.d_model; ++j) row[j] += p[j];
      }
    }
  }
  return x;
}

BlockAdapter block_adapter_for(const AdapterView* view, std::size_t layer) {
  BlockAdapter a;
  if (view == nullptr) return a;
  const AdapterSet& set = view->set();
  if (set.mode() == AdapterMode::pfeiffer) {
    a.pfeiffer = &set.pfeiffer.at(layer);
  } else {
    a.lora = &set.lora.at(layer);
  }
  a.intervention = view->intervention(layer);
  return a;
}

void check_adapter_layers(const TransformerParams& params, const AdapterView* view) {
  if (view != nullptr && view->n_layers() != params.config.n_layers) {
    throw ShapeError("adapter set has " + std::to_string(view->n_layers()) + " layers, model has " +
                     std::to_string(params.config.n_layers));
  }
}

struct ForwardCache {
  Tensor2D final_in;
  NormCache final_norm;
  Tensor2D final_normed;
  std::vector<BlockCache> blocks;
};

Tensor2D forward_impl(const TransformerParams& params, Sequences sequences, const AdapterView* view,
                      ResidualTrace* trace, ForwardCache* cache) {
  check_adapter_layers(params, view);
  std::vector<std::size_t> segments;
  Tensor2D x = embed(params, sequences, segments);
  if (trace != nullptr) {
    trace->embedded = x;
    trace->layers.clear();
    trace->layers.reserve(params.config.n_layers);
  }
  if (cache != nullptr) cache->blocks.resize(params.config.n_layers);
  for (std::size_t l = 0; l < params.config.n_layers; ++l) {
    const BlockAdapter adapter = block_adapter_for(view, l);
    const bool ablated = view != nullptr && view->ablated(l);
    BlockOutput out = block_forward(params.config, params.layers[l], x, segments,
                                    view != nullptr ? &adapter : nullptr, ablated,
                                    cache != nullptr ? &cache->blocks[l] : nullptr);
    x = std::move(out.x_out);
    if (trace != nullptr) trace->layers.push_back(std::move(out.trace));
  }
  NormCache final_norm;
  Tensor2D normed = detail::layer_norm(x, params.final_norm_gain, params.final_norm_bias,
                                       cache != nullptr ? &final_norm : nullptr);
  Tensor2D logits = matmul(normed, params.unembedding);
  if (cache != nullptr) {
    cache->final_in = std::move(x);
    cache->final_norm = std::move(final_norm);
    cache->final_normed = std::move(normed);
  }
  return logits;
}

// Looks up the gradient accumulator for a parameter, or null when frozen.
class GradSinks {
 public:
  explicit GradSinks(GradientSet& grads) : grads_(grads) {}
  Tensor2D* get(const std::string& name) {
    auto it = grads_.find(name);
    return it == grads_.end() ? nullptr : &it->second;
  }

 private:
  GradientSet& grads_;
};

void accumulate_at(Tensor2D* sink, const Tensor2D& a, const Tensor2D& b, double scale = 1.0) {
  if (sink == nullptr) return;
  if (scale == 1.0) {
    add_matmul_at(*sink, a, b);
  } else {
    Tensor2D tmp = matmul_at(a, b);
    detail::scale_inplace(tmp, scale);
    detail::add_into(*sink, tmp);
  }
}

std::string adapter_param(std::size_t layer, const char* field) {
  return "adapters." + std::to_string(layer) + "." + field;
}

// Returns d x_prev given d x_out.
Tensor2D block_backward(const ModelConfig& config, const LayerParams& layer, const BlockAdapter* adapter,
                        const BlockCache& c, const Tensor2D& d_out, std::size_t l, GradSinks& sinks) {
  const std::size_t n_heads = config.n_heads;

  Tensor2D d_attn;    // gradient w.r.t. x_attn
  Tensor2D d_hidden;  // gradient w.r.t. gelu output

  if (c.lora_active) {
    const LoraLayer& lora = *adapter->lora;
    d_attn = d_out;
    accumulate_at(sinks.get(layer_param_name(l, "ffn.w2")), c.x_ffn1, d_out);
    if (Tensor2D* db2 = sinks.get(layer_param_name(l, "ffn.b2"))) detail::sum_rows_into(*db2, d_out);
    Tensor2D g2 = d_out;
    detail::scale_inplace(g2, lora.ffn_out.scale);
    accumulate_at(sinks.get(adapter_param(l, "lora2.up")), g2, c.lora2_z);
    Tensor2D gu2 = matmul(g2, lora.ffn_out.up);
    accumulate_at(sinks.get(adapter_param(l, "lora2.down")), gu2, c.x_ffn1);
    Tensor2D d_ffn1 = matmul_bt(d_out, layer.ffn_w2);
    detail::add_into(d_ffn1, matmul(gu2, lora.ffn_out.down));

    Tensor2D g1 = d_ffn1;
    detail::scale_inplace(g1, lora.ffn_in.scale);
    accumulate_at(sinks.get(adapter_param(l, "lora1.up")), g1, c.lora1_z);
    Tensor2D gu1 = matmul(g1, lora.ffn_in.up);
    accumulate_at(sinks.get(adapter_param(l, "lora1.down")), gu1, c.x_attn);
    detail::add_into(d_attn, matmul(gu1, lora.ffn_in.down));
    d_hidden = std::move(d_ffn1);
  } else {
    Tensor2D d_ffn = d_out;
    if (c.pfeiffer_active) {
      const PfeifferAdapter& a = *adapter->pfeiffer;
      accumulate_at(sinks.get(adapter_param(l, "w2")), d_out, c.adapter_z);
      Tensor2D dz = matmul(d_out, a.w2);
      auto u = c.adapter_u.values();
      auto g = dz.values();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(u[i] > 0.0)) g[i] = 0.0;
      accumulate_at(sinks.get(adapter_param(l, "w1")), dz, c.x_ffn);
      detail::add_into(d_ffn, matmul(dz, a.w1));
    }
    d_attn = d_ffn;
    accumulate_at(sinks.get(layer_param_name(l, "ffn.w2")), c.hidden_act, d_ffn);
    if (Tensor2D* db2 = sinks.get(layer_param_name(l, "ffn.b2"))) detail::sum_rows_into(*db2, d_ffn);
    d_hidden = matmul_bt(d_ffn, layer.ffn_w2);
  }

  // gelu
  detail::gelu_backward(c.hidden_pre, c.hidden_tanh, d_hidden);
  accumulate_at(sinks.get(layer_param_name(l, "ffn.w1")), c.normed2, d_hidden);
  if (Tensor2D* db1 = sinks.get(layer_param_name(l, "ffn.b1"))) detail::sum_rows_into(*db1, d_hidden);
  Tensor2D d_normed2 = matmul_bt(d_hidden, layer.ffn_w1);
  detail::add_into(d_attn, detail::layer_norm_backward(d_normed2, layer.ln2_gain, c.ln2,
                                                       sinks.get(layer_param_name(l, "ln2.gain")),
                                                       sinks.get(layer_param_name(l, "ln2.bias"))));

  // attention
  Tensor2D d_prev = d_attn;
  accumulate_at(sinks.get(layer_param_name(l, "attn.wo")), c.ctx, d_attn);
  Tensor2D d_ctx = matmul_bt(d_attn, layer.wo);
  Tensor2D dq, dk, dv;
  detail::causal_attention_backward(c.q, c.k, c.v, c.probs, d_ctx, n_heads, c.segments, dq, dk, dv);
  if (config.positional == PositionalKind::rotary) {
    apply_rope(dq, n_heads, c.segments, -1.0);
    apply_rope(dk, n_heads, c.segments, -1.0);
  }
  accumulate_at(sinks.get(layer_param_name(l, "attn.wq")), c.normed1, dq);
  accumulate_at(sinks.get(layer_param_name(l, "attn.wk")), c.normed1, dk);
  accumulate_at(sinks.get(layer_param_name(l, "attn.wv")), c.normed1, dv);
  Tensor2D d_normed1 = matmul_bt(dq, layer.wq);
  detail::add_into(d_normed1, matmul_bt(dk, layer.wk));
  detail::add_into(d_normed1, matmul_bt(dv, layer.wv));
  detail::add_into(d_prev, detail::layer_norm_backward(d_normed1, layer.ln1_gain, c.ln1,
                                                       sinks.get(layer_param_name(l, "ln1.gain")),
                                                       sinks.get(layer_param_name(l, "ln1.bias"))));
  return d_prev;
}

}  // namespace

BlockOutput decoder_block_forward(const ModelConfig& config, const LayerParams& layer,
                                  const Tensor2D& x_prev, const BlockAdapter* adapter, bool ablated) {
  const std::size_t whole[] = {x_prev.rows()};
  return block_forward(config, layer, x_prev, whole, adapter, ablated, nullptr);
}

ForwardResult model_forward(const TransformerParams& params, std::span<const TokenId> tokens,
                            const ForwardOptions& options) {
  ForwardResult result;
  if (options.capture_trace) {
    result.trace.emplace();
    result.logits = forward_impl(params, Sequences(&tokens, 1), options.adapters, &*result.trace, nullptr);
  } else {
    result.logits = forward_impl(params, Sequences(&tokens, 1), options.adapters, nullptr, nullptr);
  }
  return result;
}

ForwardResult model_forward(const TransformerParams& params, std::span<const TokenId> tokens,
                            const AdapterSet* adapters, bool capture_trace) {
  if (adapters == nullptr) return model_forward(params, tokens, ForwardOptions{nullptr, capture_trace});
  const AdapterView view(*adapters);
  return model_forward(params, tokens, ForwardOptions{&view, capture_trace});
}

std::vector<double> unembed_logits(std::span<const double> hidden, const TransformerParams& params,
                                   bool apply_final_norm) {
  if (hidden.size() != params.config.d_model) throw ShapeError("unembed_hidden: hidden size mismatch");
  Tensor2D h = detail::row_vector(hidden);
  if (apply_final_norm) h = detail::layer_norm(h, params.final_norm_gain, params.final_norm_bias, nullptr);
  Tensor2D logits = matmul(h, params.unembedding);
  return std::vector<double>(logits.values().begin(), logits.values().end());
}

std::vector<double> unembed_hidden(std::span<const double> hidden, const TransformerParams& params,
                                   bool apply_final_norm) {
  return softmax(unembed_logits(hidden, params, apply_final_norm));
}

LmExample make_lm_example(std::span<const TokenId> window) {
  if (window.size() < 2) throw InvalidArgument("make_lm_example: window needs at least 2 tokens");
  LmExample ex;
  ex.inputs.assign(window.begin(), window.end() - 1);
  ex.targets.assign(window.begin() + 1, window.end());
  return ex;
}

BackwardResult backward(const TransformerParams& params, const AdapterSet* adapters,
                        std::span<const LmExample> batch, const FreezeMask& mask) {
  BackwardResult result;
  for (const auto& [name, t] : params.named_tensors())
    if (mask.contains(name)) result.grads.emplace(name, Tensor2D(t->rows(), t->cols()));
  if (adapters != nullptr) {
    for (const auto& [name, t] : adapters->named_tensors())
      if (mask.contains(name)) result.grads.emplace(name, Tensor2D(t->rows(), t->cols()));
  }
  GradSinks sinks(result.grads);

  std::size_t total_targets = 0;
  for (const auto& ex : batch) {
    if (ex.inputs.size() != ex.targets.size()) throw ShapeError("backward: inputs/targets length mismatch");
    total_targets += ex.targets.size();
  }
  if (total_targets == 0) return result;

  std::optional<AdapterView> view;
  if (adapters != nullptr) view.emplace(*adapters);
  const AdapterView* view_ptr = view ? &*view : nullptr;
  const ModelConfig& cfg = params.config;

  std::vector<std::span<const TokenId>> inputs;
  std::vector<TokenId> targets;
  targets.reserve(total_targets);
  for (const auto& ex : batch) {
    if (ex.inputs.empty()) continue;
    inputs.emplace_back(ex.inputs);
    targets.insert(targets.end(), ex.targets.begin(), ex.targets.end());
  }

  ForwardCache cache;
  Tensor2D logits = forward_impl(params, inputs, view_ptr, nullptr, &cache);
  LossAndGrad lg = cross_entropy_loss_and_grad(logits, targets);
  result.loss = lg.loss;
  const Tensor2D& d_logits = lg.grad;

  accumulate_at(sinks.get(kUnembeddingName), cache.final_normed, d_logits);
  Tensor2D d_normed = matmul_bt(d_logits, params.unembedding);
  Tensor2D dx = detail::layer_norm_backward(d_normed, params.final_norm_gain, cache.final_norm,
                                            sinks.get("final_norm.gain"), sinks.get("final_norm.bias"));
  for (std::size_t l = cfg.n_layers; l-- > 0;) {
    const BlockAdapter adapter = block_adapter_for(view_ptr, l);
    dx = block_backward(cfg, params.layers[l], view_ptr != nullptr ? &adapter : nullptr, cache.blocks[l], dx, l,
                        sinks);
  }
  Tensor2D* de = sinks.get(kTokenEmbeddingName);
  Tensor2D* dp = sinks.get(kPositionEmbeddingName);
  std::size_t r = 0;
  for (const auto& seq : inputs) {
    for (std::size_t i = 0; i < seq.size(); ++i, ++r) {
      auto src = dx.row(r);
      if (de != nullptr) {
        auto dst = de->row(seq[i]);
        for (std::size_t j = 0; j < cfg.d_model; ++j) dst[j] += src[j];
      }
      if (dp != nullptr) {
        auto dst = dp->row(i);
        for (std::size_t j = 0; j < cfg.d_model; ++j) dst[j] += src[j];
      }
    }
  }
  return result;
}

std::vector<NllSum> batch_nll(const TransformerParams& params, std::span<const LmExample> batch,
                              const AdapterView* adapters) {
  std::vector<std::span<const TokenId>> inputs;
  for (const auto& ex : batch) {
    if (ex.inputs.size() != ex.targets.size()) throw ShapeError("batch_nll: inputs/targets length mismatch");
    inputs.emplace_back(ex.inputs);
  }
  std::vector<NllSum> out(batch.size());
  if (batch.empty()) return out;
  Tensor2D logits = forward_impl(params, inputs, adapters, nullptr, nullptr);
  std::size_t r = 0;
  for (std::size_t e = 0; e < batch.size(); ++e) {
    CompensatedSum s;
    for (std::size_t t = 0; t < batch[e].targets.size(); ++t, ++r) {
      auto row = logits.row(r);
      const TokenId target = batch[e].targets[t];
      if (target >= row.size()) throw InvalidArgument("batch_nll: target out of range");
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (double v : row) z += std::exp(v - mx);
      s.add(mx + std::log(z) - row[target]);
    }
    out[e] = NllSum{s.value(), batch[e].targets.size()};
  }
  return out;
}

NllSum example_nll(const TransformerParams& params, const LmExample& example, const AdapterView* adapters) {
  return batch_nll(params, std::span<const LmExample>(&example, 1), adapters).front();
}

}  // namespace adaptlab
