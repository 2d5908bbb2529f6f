#include "adaptlab/adapters.hpp"

#include <random>

#include "adaptlab/error.hpp"
#include "kernels.hpp"

namespace adaptlab {

std::string to_string(AdapterMode mode) { return mode == AdapterMode::lora ? "lora" : "pfeiffer"; }

AdapterMode adapter_mode_from_string(const std::string& name) {
  if (name == "pfeiffer") return AdapterMode::pfeiffer;
  if (name == "lora") return AdapterMode::lora;
  throw InvalidArgument("unknown adapter mode '" + name + "'");
}

std::string to_string(InterventionMode mode) {
  return mode == InterventionMode::mean_replace ? "mean_replace" : "zero";
}

InterventionMode intervention_mode_from_string(const std::string& name) {
  if (name == "zero") return InterventionMode::zero;
  if (name == "mean_replace") return InterventionMode::mean_replace;
  throw InvalidArgument("unknown intervention mode '" + name + "'");
}

namespace {

std::string adapter_name(std::size_t layer, const char* field) {
  return "adapters." + std::to_string(layer) + "." + field;
}

template <typename Set, typename Fn>
void for_each_adapter_tensor(Set& set, Fn&& fn) {
  for (std::size_t l = 0; l < set.pfeiffer.size(); ++l) {
    fn(adapter_name(l, "w1"), set.pfeiffer[l].w1);
    fn(adapter_name(l, "w2"), set.pfeiffer[l].w2);
  }
  for (std::size_t l = 0; l < set.lora.size(); ++l) {
    fn(adapter_name(l, "lora1.down"), set.lora[l].ffn_in.down);
    fn(adapter_name(l, "lora1.up"), set.lora[l].ffn_in.up);
    fn(adapter_name(l, "lora2.down"), set.lora[l].ffn_out.down);
    fn(adapter_name(l, "lora2.up"), set.lora[l].ffn_out.up);
  }
}

}  // namespace

std::size_t AdapterSet::n_layers() const {
  return mode() == AdapterMode::pfeiffer ? pfeiffer.size() : lora.size();
}

std::size_t AdapterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_tensors()) n += t->size();
  return n;
}

std::vector<ParamRef> AdapterSet::parameters() {
  std::vector<ParamRef> out;
  for_each_adapter_tensor(*this, [&](const std::string& name, Tensor2D& t) {
    out.push_back(ParamRef{name, &t, true});
  });
  return out;
}

std::vector<std::pair<std::string, const Tensor2D*>> AdapterSet::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor2D*>> out;
  for_each_adapter_tensor(*this, [&](const std::string& name, const Tensor2D& t) {
    out.emplace_back(name, &t);
  });
  return out;
}

AdapterSet init_adapters(const ModelConfig& model, const AdapterConfig& config, std::uint64_t seed) {
  model.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](std::size_t r, std::size_t c) {
    Tensor2D t(r, c);
    for (double& v : t.values()) v = config.init_std * normal(rng);
    return t;
  };

  AdapterSet set;
  set.config = config;
  const std::size_t d = model.d_model;
  if (config.mode == AdapterMode::pfeiffer) {
    if (config.reduction_factor == 0 || d / config.reduction_factor == 0 ||
        d / config.reduction_factor >= d) {
      throw InvalidArgument("init_adapters: reduction factor " +
                            std::to_string(config.reduction_factor) + " gives no bottleneck for d=" +
                            std::to_string(d));
    }
    const std::size_t b = d / config.reduction_factor;
    set.pfeiffer.reserve(model.n_layers);
    for (std::size_t l = 0; l < model.n_layers; ++l) {
      PfeifferAdapter a;
      a.w1 = gaussian(b, d);
      a.w2 = Tensor2D(d, b);
      set.pfeiffer.push_back(std::move(a));
    }
  } else {
    const std::size_t r = config.lora_rank;
    if (r == 0 || r >= std::min(d, model.d_ffn)) {
      throw InvalidArgument("init_adapters: LoRA rank " + std::to_string(r) +
                            " must be in [1, min(d, d_ffn))");
    }
    set.lora.reserve(model.n_layers);
    for (std::size_t l = 0; l < model.n_layers; ++l) {
      LoraLayer layer;
      layer.ffn_in.down = gaussian(r, d);
      layer.ffn_in.up = Tensor2D(model.d_ffn, r);
      layer.ffn_in.scale = config.lora_scale;
      layer.ffn_out.down = gaussian(r, model.d_ffn);
      layer.ffn_out.up = Tensor2D(d, r);
      layer.ffn_out.scale = config.lora_scale;
      set.lora.push_back(std::move(layer));
    }
  }
  return set;
}

namespace {

// y = W x for W stored out x in.
std::vector<double> apply_out_in(const Tensor2D& w, std::span<const double> x) {
  if (w.cols() != x.size()) {
    throw ShapeError("adapter: weight " + w.shape_string() + " applied to vector of length " +
                     std::to_string(x.size()));
  }
  std::vector<double> y(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) y[r] = dot(w.row(r), x);
  return y;
}

}  // namespace

std::vector<double> pfeiffer_forward(std::span<const double> x, const PfeifferAdapter& adapter) {
  std::vector<double> hidden = apply_out_in(adapter.w1, x);
  for (double& v : hidden) v = v > 0.0 ? v : 0.0;
  return apply_out_in(adapter.w2, hidden);
}

std::vector<double> lora_forward(std::span<const double> x, const LoraPair& pair) {
  std::vector<double> y = apply_out_in(pair.up, apply_out_in(pair.down, x));
  for (double& v : y) v *= pair.scale;
  return y;
}

LoraBlockOutput lora_block_forward(std::span<const double> x_attn, const LayerParams& layer,
                                   const LoraPair& lora1, const LoraPair& lora2) {
  const std::size_t d = layer.ffn_w1.rows();
  const std::size_t d_ffn = layer.ffn_w1.cols();
  if (x_attn.size() != d) throw ShapeError("lora_block_forward: x_attn length mismatch");

  Tensor2D normed = detail::layer_norm(detail::row_vector(x_attn), layer.ln2_gain, layer.ln2_bias, nullptr);
  Tensor2D hidden = matmul(normed, layer.ffn_w1);
  detail::add_row_bias(hidden, layer.ffn_b1);
  LoraBlockOutput out;
  out.x_ffn1.resize(d_ffn);
  const std::vector<double> l1 = lora_forward(x_attn, lora1);
  for (std::size_t j = 0; j < d_ffn; ++j) out.x_ffn1[j] = detail::gelu(hidden(0, j)) + l1[j];

  Tensor2D projected = matmul(detail::row_vector(out.x_ffn1), layer.ffn_w2);
  detail::add_row_bias(projected, layer.ffn_b2);
  const std::vector<double> l2 = lora_forward(out.x_ffn1, lora2);
  out.x_ffn2.resize(d);
  out.x_out.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    out.x_ffn2[j] = projected(0, j) + l2[j];
    out.x_out[j] = x_attn[j] + out.x_ffn2[j];
  }
  return out;
}

// ---------------------------------------------------------------------------

AdapterView::AdapterView(const AdapterSet& set)
    : set_(&set), ablated_(set.n_layers(), false), interventions_(set.n_layers()) {}

const FeatureIntervention* AdapterView::intervention(std::size_t layer) const {
  const auto& slot = interventions_.at(layer);
  return slot ? &*slot : nullptr;
}

AdapterView AdapterView::with_ablation(LayerSpan span) const {
  validate_span(span, n_layers());
  AdapterView out = *this;
  for (std::size_t l = span.first; l <= span.last; ++l) out.ablated_[l - 1] = true;
  return out;
}

AdapterView AdapterView::with_intervention(std::size_t layer, FeatureIntervention intervention) const {
  if (layer >= n_layers()) throw InvalidArgument("with_intervention: layer out of range");
  AdapterView out = *this;
  out.interventions_[layer] = std::move(intervention);
  return out;
}

void validate_span(LayerSpan span, std::size_t n_layers) {
  if (span.first < 1 || span.first > span.last || span.last > n_layers) {
    throw InvalidArgument("ablation span [" + std::to_string(span.first) + ", " +
                          std::to_string(span.last) + "] is not within 1.." +
                          std::to_string(n_layers) + " with first <= last");
  }
}

AdapterView ablate(const AdapterSet& set, std::optional<LayerSpan> span) {
  AdapterView view(set);
  if (!span) return view;
  return view.with_ablation(*span);
}

// ---------------------------------------------------------------------------

FreezeMask FreezeMask::for_pretraining(const TransformerParams& params) {
  FreezeMask mask;
  for (const auto& [name, t] : params.named_tensors()) mask.trainable.insert(name);
  return mask;
}

FreezeMask FreezeMask::for_adaptation(const TransformerParams& params, const AdapterSet& adapters) {
  (void)params;
  FreezeMask mask;
  for (const auto& [name, t] : adapters.named_tensors()) mask.trainable.insert(name);
  if (adapters.trainable_embeddings) {
    mask.trainable.insert(kTokenEmbeddingName);
    mask.trainable.insert(kUnembeddingName);
  }
  return mask;
}

}  // namespace adaptlab
