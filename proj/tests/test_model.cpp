#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "adaptlab/adapters.hpp"
#include "adaptlab/error.hpp"
#include "adaptlab/model.hpp"
#include "test_util.hpp"

using namespace adaptlab;

namespace {

ModelConfig tiny_config(PositionalKind kind = PositionalKind::learned_absolute) {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ffn = 16;
  c.vocab_size = 11;
  c.max_seq_len = 8;
  c.positional = kind;
  return c;
}

std::vector<LmExample> tiny_batch() {
  std::vector<LmExample> batch;
  batch.push_back(make_lm_example(std::vector<TokenId>{1, 4, 7, 2, 9, 10}));
  batch.push_back(make_lm_example(std::vector<TokenId>{3, 3, 0, 5}));
  return batch;
}

// Perturb every adapter tensor so gradients reach the down/W1 side as well.
void randomize(AdapterSet& set, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (auto& p : set.parameters())
    for (double& v : p.tensor->values()) v = normal(rng);
}

void randomize_norms(TransformerParams& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.2);
  for (auto& p : params.parameters()) {
    if (p.name.find("gain") != std::string::npos || p.name.find("bias") != std::string::npos ||
        p.name.find("ffn.b") != std::string::npos) {
      for (double& v : p.tensor->values()) v += normal(rng);
    }
  }
}

double batch_loss(const TransformerParams& params, const AdapterSet* adapters, std::span<const LmExample> batch) {
  std::optional<AdapterView> view;
  if (adapters != nullptr) view.emplace(*adapters);
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& ex : batch) {
    auto s = example_nll(params, ex, view ? &*view : nullptr);
    nll += s.nll;
    count += s.count;
  }
  return nll / static_cast<double>(count);
}

double check_all_gradients(TransformerParams& params, AdapterSet* adapters, const FreezeMask& mask) {
  auto batch = tiny_batch();
  auto result = backward(params, adapters, batch, mask);
  CHECK(result.loss == doctest::Approx(batch_loss(params, adapters, batch)).epsilon(1e-12));
  std::vector<ParamRef> refs = params.parameters();
  if (adapters != nullptr) {
    auto extra = adapters->parameters();
    refs.insert(refs.end(), extra.begin(), extra.end());
  }
  double worst = 0.0;
  std::size_t checked = 0;
  for (auto& ref : refs) {
    if (!mask.contains(ref.name)) {
      CHECK(result.grads.count(ref.name) == 0);
      continue;
    }
    REQUIRE(result.grads.count(ref.name) == 1);
    Tensor2D numeric = testutil::finite_difference(*ref.tensor, [&] { return batch_loss(params, adapters, batch); });
    const double err = testutil::max_relative_error(result.grads.at(ref.name), numeric, 1e-6);
    INFO(ref.name << " rel err " << err);
    CHECK(err < 1e-3);
    worst = std::max(worst, err);
    ++checked;
  }
  CHECK(checked == result.grads.size());
  return worst;
}

}  // namespace

TEST_CASE("backward matches finite differences: pretraining, learned positions") {
  TransformerParams params = init_transformer(tiny_config(), 1, 0.3);
  randomize_norms(params, 2);
  check_all_gradients(params, nullptr, FreezeMask::for_pretraining(params));
}

TEST_CASE("backward matches finite differences: rotary positions") {
  TransformerParams params = init_transformer(tiny_config(PositionalKind::rotary), 3, 0.3);
  randomize_norms(params, 4);
  check_all_gradients(params, nullptr, FreezeMask::for_pretraining(params));
}

TEST_CASE("backward matches finite differences: pfeiffer adaptation") {
  TransformerParams params = init_transformer(tiny_config(), 5, 0.3);
  AdapterConfig ac;
  ac.reduction_factor = 4;
  AdapterSet adapters = init_adapters(params.config, ac, 6);
  randomize(adapters, 7);
  FreezeMask mask = FreezeMask::for_adaptation(params, adapters);
  check_all_gradients(params, &adapters, mask);
}

TEST_CASE("backward matches finite differences: LoRA with every tensor trainable") {
  TransformerParams params = init_transformer(tiny_config(), 8, 0.3);
  AdapterConfig ac;
  ac.mode = AdapterMode::lora;
  ac.lora_rank = 2;
  ac.lora_scale = 0.7;
  AdapterSet adapters = init_adapters(params.config, ac, 9);
  randomize(adapters, 10);
  FreezeMask mask = FreezeMask::for_pretraining(params);
  for (const auto& [name, t] : adapters.named_tensors()) mask.trainable.insert(name);
  check_all_gradients(params, &adapters, mask);
}

TEST_CASE("backward: all frozen gives an empty gradient set") {
  TransformerParams params = init_transformer(tiny_config(), 1);
  auto batch = tiny_batch();
  auto r = backward(params, nullptr, batch, FreezeMask::none());
  CHECK(r.grads.empty());
  CHECK(r.loss > 0.0);
}

TEST_CASE("backward: dead-ReLU adapter input gives zero W1 gradient") {
  ModelConfig cfg = tiny_config();
  TransformerParams params = init_transformer(cfg, 12, 0.3);
  AdapterConfig ac;
  ac.reduction_factor = 4;
  AdapterSet adapters = init_adapters(cfg, ac, 13);
  randomize(adapters, 14);
  // zero the FFN output path and the attention output so x_ffn = x_prev, and zero
  // the embeddings so x_prev = 0
  params.token_embedding.fill(0.0);
  params.position_embedding.fill(0.0);
  params.layers[0].wo.fill(0.0);
  params.layers[0].ffn_w2.fill(0.0);
  params.layers[0].ffn_b2.fill(0.0);
  FreezeMask mask = FreezeMask::for_adaptation(params, adapters);
  auto r = backward(params, &adapters, tiny_batch(), mask);
  for (double g : r.grads.at("adapters.0.w1").values()) CHECK(g == 0.0);
}

TEST_CASE("zero-init adapters leave logits bitwise unchanged") {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 3;
  TransformerParams params = init_transformer(cfg, 21);
  std::vector<TokenId> tokens{0, 5, 9, 3, 2};
  const Tensor2D base = model_forward(params, tokens, nullptr).logits;
  for (AdapterMode mode : {AdapterMode::pfeiffer, AdapterMode::lora}) {
    AdapterConfig ac;
    ac.mode = mode;
    ac.reduction_factor = 4;
    ac.lora_rank = 2;
    AdapterSet set = init_adapters(cfg, ac, 22);
    CHECK(model_forward(params, tokens, &set).logits == base);
  }
}

TEST_CASE("decoder block: absent adapter and zero W2 adapter are identical") {
  ModelConfig cfg = tiny_config();
  TransformerParams params = init_transformer(cfg, 30, 0.3);
  std::mt19937_64 rng(31);
  Tensor2D x = testutil::random_tensor(4, cfg.d_model, rng);
  BlockOutput plain = decoder_block_forward(cfg, params.layers[0], x, nullptr, false);
  CHECK(plain.x_out == plain.trace.x_ffn);

  AdapterConfig ac;
  ac.reduction_factor = 4;
  AdapterSet set = init_adapters(cfg, ac, 32);
  BlockAdapter with{&set.pfeiffer[0], nullptr, nullptr};
  BlockOutput adapted = decoder_block_forward(cfg, params.layers[0], x, &with, false);
  CHECK(adapted.x_out == plain.x_out);

  randomize(set, 33);
  BlockOutput ablated = decoder_block_forward(cfg, params.layers[0], x, &with, true);
  CHECK(ablated.x_out == plain.x_out);
  BlockOutput active = decoder_block_forward(cfg, params.layers[0], x, &with, false);
  CHECK_FALSE(active.x_out == plain.x_out);
}

TEST_CASE("decoder block: single token matches a hand-unrolled oracle") {
  ModelConfig cfg = tiny_config();
  TransformerParams params = init_transformer(cfg, 40, 0.4);
  randomize_norms(params, 41);
  const LayerParams& p = params.layers[0];
  std::mt19937_64 rng(42);
  Tensor2D x = testutil::random_tensor(1, cfg.d_model, rng);
  const std::size_t d = cfg.d_model;

  auto norm = [&](const std::vector<double>& v, const Tensor2D& g, const Tensor2D& b) {
    double mu = 0.0;
    for (double e : v) mu += e;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double e : v) var += (e - mu) * (e - mu);
    var /= static_cast<double>(d);
    std::vector<double> out(d);
    for (std::size_t j = 0; j < d; ++j) out[j] = (v[j] - mu) / std::sqrt(var + 1e-5) * g(0, j) + b(0, j);
    return out;
  };
  std::vector<double> x0(x.values().begin(), x.values().end());
  // one position: attention weights are exactly 1, so ctx = v
  std::vector<double> a = norm(x0, p.ln1_gain, p.ln1_bias);
  std::vector<double> v(d, 0.0), attn(d, 0.0), xa(d);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t i = 0; i < d; ++i) v[j] += a[i] * p.wv(i, j);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t i = 0; i < d; ++i) attn[j] += v[i] * p.wo(i, j);
  for (std::size_t j = 0; j < d; ++j) xa[j] = x0[j] + attn[j];
  std::vector<double> f = norm(xa, p.ln2_gain, p.ln2_bias);
  std::vector<double> h(cfg.d_ffn);
  for (std::size_t k = 0; k < cfg.d_ffn; ++k) {
    double s = p.ffn_b1(0, k);
    for (std::size_t i = 0; i < d; ++i) s += f[i] * p.ffn_w1(i, k);
    h[k] = 0.5 * s * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (s + 0.044715 * s * s * s)));
  }
  std::vector<double> expected(d);
  for (std::size_t j = 0; j < d; ++j) {
    double s = p.ffn_b2(0, j);
    for (std::size_t k = 0; k < cfg.d_ffn; ++k) s += h[k] * p.ffn_w2(k, j);
    expected[j] = xa[j] + s;
  }
  BlockOutput out = decoder_block_forward(cfg, p, x, nullptr, false);
  for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(out.x_out(0, j) - expected[j]) < 1e-10);
}

TEST_CASE("model_forward: zero layers reduces to unembed(norm(embed))") {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 0;
  TransformerParams params = init_transformer(cfg, 50);
  std::vector<TokenId> tokens{4, 1, 8};
  Tensor2D logits = model_forward(params, tokens, nullptr).logits;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::vector<double> h(cfg.d_model);
    for (std::size_t j = 0; j < cfg.d_model; ++j)
      h[j] = params.token_embedding(tokens[i], j) + params.position_embedding(i, j);
    auto expected = unembed_logits(h, params, true);
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) CHECK(logits(i, v) == doctest::Approx(expected[v]).epsilon(1e-13));
  }
}

TEST_CASE("model_forward: determinism, length and vocab checks") {
  ModelConfig cfg = tiny_config();
  TransformerParams params = init_transformer(cfg, 51);
  std::vector<TokenId> tokens{1, 2, 3};
  CHECK(model_forward(params, tokens, nullptr).logits == model_forward(params, tokens, nullptr).logits);
  std::vector<TokenId> too_long(cfg.max_seq_len + 1, 0);
  CHECK_THROWS_AS(model_forward(params, too_long, nullptr), InvalidArgument);
  std::vector<TokenId> bad{1, 11};
  CHECK_THROWS_AS(model_forward(params, bad, nullptr), InvalidArgument);
}

TEST_CASE("model_forward: causality under future-token perturbation") {
  for (PositionalKind kind : {PositionalKind::learned_absolute, PositionalKind::rotary}) {
    ModelConfig cfg = tiny_config(kind);
    cfg.n_layers = 2;
    TransformerParams params = init_transformer(cfg, 60, 0.3);
    std::mt19937_64 rng(61);
    std::uniform_int_distribution<TokenId> tok(0, 10);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<TokenId> a(8);
      for (auto& t : a) t = tok(rng);
      const std::size_t cut = 1 + trial % 7;
      std::vector<TokenId> b = a;
      for (std::size_t i = cut; i < b.size(); ++i) b[i] = (b[i] + 1 + tok(rng)) % 11;
      Tensor2D la = model_forward(params, a, nullptr).logits;
      Tensor2D lb = model_forward(params, b, nullptr).logits;
      for (std::size_t i = 0; i < cut; ++i)
        for (std::size_t v = 0; v < cfg.vocab_size; ++v) CHECK(la(i, v) == lb(i, v));
    }
  }
}

TEST_CASE("trace additivity holds at every layer") {
  for (AdapterMode mode : {AdapterMode::pfeiffer, AdapterMode::lora}) {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 3;
    TransformerParams params = init_transformer(cfg, 70, 0.3);
    AdapterConfig ac;
    ac.mode = mode;
    ac.reduction_factor = 4;
    ac.lora_rank = 2;
    AdapterSet set = init_adapters(cfg, ac, 71);
    randomize(set, 72);
    std::vector<TokenId> tokens{3, 1, 4, 1, 5, 9, 2};
    auto result = model_forward(params, tokens, &set, true);
    REQUIRE(result.trace.has_value());
    const auto& tr = *result.trace;
    REQUIRE(tr.layers.size() == cfg.n_layers);
    const Tensor2D* prev = &tr.embedded;
    for (const auto& layer : tr.layers) {
      for (std::size_t i = 0; i < layer.x_out.size(); ++i) {
        CHECK(std::abs(layer.x_out.values()[i] - layer.x_ffn.values()[i] - layer.adapter_out.values()[i]) < 1e-9);
        CHECK(std::abs(layer.x_ffn.values()[i] - layer.x_attn.values()[i] - layer.ffn_out.values()[i]) < 1e-9);
        CHECK(std::abs(layer.x_attn.values()[i] - prev->values()[i] - layer.attn_out.values()[i]) < 1e-9);
      }
      prev = &layer.x_out;
    }
  }
}

TEST_CASE("ablating every adapter equals running without adapters") {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 3;
  TransformerParams params = init_transformer(cfg, 80, 0.3);
  AdapterConfig ac;
  ac.reduction_factor = 4;
  AdapterSet set = init_adapters(cfg, ac, 81);
  randomize(set, 82);
  std::vector<TokenId> tokens{9, 8, 7, 6};
  AdapterView all = ablate(set, LayerSpan{1, 3});
  CHECK(model_forward(params, tokens, ForwardOptions{&all, false}).logits ==
        model_forward(params, tokens, nullptr).logits);
}

TEST_CASE("unembed_hidden: uniform at zero, consistent with the final layer, planted argmax") {
  ModelConfig cfg = tiny_config();
  TransformerParams params = init_transformer(cfg, 90);
  std::vector<double> zero(cfg.d_model, 0.0);
  for (double p : unembed_hidden(zero, params, false)) CHECK(p == doctest::Approx(1.0 / 11.0).epsilon(1e-14));

  std::vector<TokenId> tokens{2, 7, 1};
  auto fwd = model_forward(params, tokens, nullptr, true);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto lens = unembed_hidden(fwd.trace->layers.back().x_out.row(i), params, true);
    auto direct = softmax(fwd.logits.row(i));
    for (std::size_t v = 0; v < lens.size(); ++v) CHECK(lens[v] == doctest::Approx(direct[v]).epsilon(1e-12));
  }

  // orthogonal toy embedding: unembedding = embedding^T
  ModelConfig sq = cfg;
  sq.vocab_size = 8;
  TransformerParams toy = init_transformer(sq, 91);
  toy.token_embedding = Tensor2D::identity(8);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) toy.token_embedding(r, c) = (r == c ? 2.0 : 0.0) + (c == (r + 3) % 8 ? 0.5 : 0.0);
  toy.unembedding = toy.token_embedding.transposed();
  for (TokenId t = 0; t < 8; ++t) {
    auto probs = unembed_hidden(toy.token_embedding.row(t), toy, false);
    CHECK(std::max_element(probs.begin(), probs.end()) - probs.begin() == t);
  }
}
