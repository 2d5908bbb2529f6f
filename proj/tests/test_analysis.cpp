#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "adaptlab/analysis.hpp"
#include "adaptlab/error.hpp"
#include "test_util.hpp"

using namespace adaptlab;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 3;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ffn = 32;
  c.vocab_size = 64;
  c.max_seq_len = 16;
  return c;
}

struct Fixture {
  ModelConfig config = tiny_config();
  LanguagePair languages;
  TransformerParams params;
  AdapterSet adapters;
  LangIdTable table;
  std::vector<std::vector<TokenId>> target_windows;

  Fixture() {
    LanguagePairOptions o;
    o.vocab_size = 64;
    o.words_per_language = 24;
    o.seed = 21;
    languages = generate_language_pair(o, 400, 12);
    params = init_transformer(config, 1, 0.2);
    AdapterConfig ac;
    ac.reduction_factor = 4;
    adapters = init_adapters(config, ac, 2);
    std::mt19937_64 rng(3);
    for (auto& ref : adapters.parameters())
      for (double& v : ref.tensor->values()) v = std::normal_distribution<double>(0.0, 0.3)(rng);
    table = build_langid_table(languages.spec, languages.source, languages.target, 64);
    target_windows = split_windows(std::span<const TokenId>(languages.target).first(1600), 16);
  }

  std::span<const TokenId> val() const { return std::span<const TokenId>(languages.target).first(800); }
};

void zero_layer(AdapterSet& set, std::size_t layer) { set.pfeiffer[layer].w2.fill(0.0); }

}  // namespace

TEST_CASE("top_k orders by probability then ascending id") {
  const std::vector<double> p{0.1, 0.3, 0.1, 0.3, 0.2};
  CHECK(top_k(p, 3) == std::vector<TokenId>{1, 3, 4});
  CHECK(top_k(p, 5) == std::vector<TokenId>{1, 3, 4, 0, 2});
  CHECK(top_k(p, 9).size() == 5);
}

TEST_CASE("logit lens: fractions, full-vocabulary case, zero adapters") {
  Fixture f;
  const AdapterView view(f.adapters);
  std::span<const std::vector<TokenId>> examples(f.target_windows.data(), 20);
  LensReport r = logit_lens(f.params, &view, examples, 10, f.table);
  REQUIRE(r.layers.size() == 4);
  CHECK(r.n_examples == 20);
  for (const auto& l : r.layers) CHECK(std::abs(l.fraction_target + l.fraction_source + l.fraction_other - 1.0) < 1e-9);

  std::size_t n_target = 0;
  for (TokenId t = 0; t < 64; ++t) n_target += classify_token(t, f.table) == Language::target;
  LensReport full = logit_lens(f.params, &view, examples, 64, f.table);
  for (const auto& l : full.layers) CHECK(std::abs(l.fraction_target - n_target / 64.0) < 1e-12);

  AdapterSet zero = init_adapters(f.config, f.adapters.config, 9);
  const AdapterView zero_view(zero);
  LensReport a = logit_lens(f.params, &zero_view, examples, 10, f.table);
  LensReport b = logit_lens(f.params, nullptr, examples, 10, f.table);
  CHECK(to_json(a) == to_json(b));
  CHECK(to_json(r) == to_json(logit_lens(f.params, &view, examples, 10, f.table)));
  CHECK_THROWS_AS(logit_lens(f.params, &view, examples, 0, f.table), InvalidArgument);
}

TEST_CASE("norm profile: zero adapters, single token, operator-norm bound") {
  Fixture f;
  std::span<const std::vector<TokenId>> examples(f.target_windows);

  AdapterSet zero = init_adapters(f.config, f.adapters.config, 9);
  for (const auto& l : norm_profile(f.params, zero, examples, 200, 1).layers) CHECK(l.adapter_out == 0.0);

  const auto pos = sample_positions(examples, 1, 4);
  NormProfile one = norm_profile(f.params, f.adapters, examples, 1, 4);
  const AdapterView view(f.adapters);
  ForwardOptions opts{&view, true};
  ResidualTrace trace = *model_forward(f.params, examples[pos[0].example], opts).trace;
  for (std::size_t l = 0; l < 3; ++l) {
    auto norm = [&](const Tensor2D& t) {
      double s = 0.0;
      for (double v : t.row(pos[0].position)) s += v * v;
      return std::sqrt(s);
    };
    CHECK(one.layers[l].adapter_out == norm(trace.layers[l].adapter_out));
    CHECK(one.layers[l].ffn_out == norm(trace.layers[l].ffn_out));
    CHECK(one.layers[l].x_out == norm(trace.layers[l].x_out));
  }

  for (std::size_t e = 0; e < 20; ++e) {
    ResidualTrace t = *model_forward(f.params, examples[e], opts).trace;
    for (std::size_t l = 0; l < 3; ++l) {
      const double bound = testutil::spectral_norm(f.adapters.pfeiffer[l].w1) *
                           testutil::spectral_norm(f.adapters.pfeiffer[l].w2);
      for (std::size_t p = 0; p < examples[e].size(); ++p) {
        double a = 0.0, x = 0.0;
        for (double v : t.layers[l].adapter_out.row(p)) a += v * v;
        for (double v : t.layers[l].x_ffn.row(p)) x += v * v;
        CHECK(std::sqrt(a) <= bound * std::sqrt(x) * (1 + 1e-9));
      }
    }
  }
  CHECK_THROWS_AS(sample_positions(examples, 100000, 1), InvalidArgument);
}

TEST_CASE("ablation sweep matches independent perplexity calls") {
  Fixture f;
  zero_layer(f.adapters, 1);
  const PerplexityOptions opts{16, 32};
  AblationGrid grid = ablation_sweep(f.params, f.adapters, f.val(), opts);
  CHECK(grid.cells.size() == 6);
  CHECK(grid.full_perplexity == perplexity(f.params, &f.adapters, f.val(), std::nullopt, opts));
  for (const auto& c : grid.cells) {
    CHECK(c.perplexity == perplexity(f.params, &f.adapters, f.val(), c.span, opts));
    CHECK(c.delta == c.perplexity - grid.full_perplexity);
  }
  CHECK(grid.find({2, 2})->delta == 0.0);
  CHECK(grid.find({1, 1})->delta != 0.0);
  CHECK(grid.find({1, 3})->perplexity == perplexity(f.params, nullptr, f.val(), std::nullopt, opts));

  const std::vector<LayerSpan> only{{3, 3}};
  AblationGrid one = ablation_sweep(f.params, f.adapters, f.val(), opts, only);
  REQUIRE(one.cells.size() == 1);
  CHECK(one.cells[0].delta == grid.find({3, 3})->delta);
  const std::vector<LayerSpan> bad{{2, 4}};
  CHECK_THROWS_AS(ablation_sweep(f.params, f.adapters, f.val(), opts, bad), InvalidArgument);

  grid.cells[0].delta = 250.0;
  CHECK(ablation_csv(grid).find(",100\n") != std::string::npos);
  CHECK(to_json(grid)["cells"][0]["delta"] == 250.0);
}

TEST_CASE("probe data: pairing, no-signal layer, case coincidence at layer 1") {
  Fixture f;
  zero_layer(f.adapters, 1);
  std::span<const std::vector<TokenId>> examples(f.target_windows);
  auto case2 = collect_probe_data(f.params, f.adapters, examples, NegativeCase::case2, 40, 5);
  auto case1 = collect_probe_data(f.params, f.adapters, examples, NegativeCase::case1, 40, 5);
  REQUIRE(case2.size() == 3);
  for (const auto& d : case2) {
    CHECK(d.features.rows() == 80);
    CHECK(std::count(d.labels.begin(), d.labels.end(), 1) == 40);
  }
  for (std::size_t i = 0; i < 40; ++i) {
    auto a = case2[1].features.row(i);
    auto b = case2[1].features.row(40 + i);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
  CHECK(case1[0].features == case2[0].features);
  CHECK_FALSE(case1[2].features == case2[2].features);

  const AdapterView view(f.adapters);
  ForwardOptions opts{&view, true};
  const TokenPosition p = case2[2].positions[7];
  ResidualTrace t = *model_forward(f.params, examples[p.example], opts).trace;
  auto row = case2[2].features.row(7);
  auto expected = t.layers[2].x_out.row(p.position);
  CHECK(std::equal(row.begin(), row.end(), expected.begin()));

  auto big = collect_probe_data(f.params, f.adapters, examples, NegativeCase::case2, 3000 / 4, 6);
  CHECK(big[0].features.rows() == 1500);
  CHECK(negative_case_from_string("case1") == NegativeCase::case1);
  CHECK_THROWS_AS(negative_case_from_string("case3"), InvalidArgument);
}

TEST_CASE("mmd_rank: analytic cases and brute-force oracle") {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> small(-20, 20);
  Tensor2D x(128, 6);
  for (double& v : x.values()) v = small(rng);
  std::vector<int> labels(128, 0);
  std::fill(labels.begin(), labels.begin() + 64, 1);
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t j = 0; j < 6; ++j) x(64 + i, j) = x(i, j);
  MmdScores same = mmd_rank(x, labels);
  for (double s : same.scores) CHECK(s == 0.0);
  CHECK(same.ranking == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});

  for (std::size_t i = 0; i < 64; ++i) x(i, 4) += 2.5;
  MmdScores shifted = mmd_rank(x, labels);
  CHECK(shifted.scores[4] == 2.5);
  CHECK(shifted.ranking.front() == 4);

  for (int trial = 0; trial < 50; ++trial) {
    Tensor2D m = testutil::random_tensor(100, 16, rng);
    std::vector<int> y(100);
    for (std::size_t i = 0; i < 100; ++i) y[i] = static_cast<int>(i % 2);
    std::shuffle(y.begin(), y.end(), rng);
    MmdScores got = mmd_rank(m, y);
    testutil::BruteMmd want = testutil::brute_force_mmd(m, y);
    CHECK(got.ranking == want.ranking);
    CHECK(got.scores == want.scores);

    std::vector<std::size_t> perm(16);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor2D permuted(100, 16);
    for (std::size_t i = 0; i < 100; ++i)
      for (std::size_t j = 0; j < 16; ++j) permuted(i, j) = m(i, perm[j]);
    MmdScores p = mmd_rank(permuted, y);
    for (std::size_t j = 0; j < 16; ++j) CHECK(perm[p.ranking[j]] == got.ranking[j]);
  }

  CHECK_THROWS_AS(mmd_rank(x, std::vector<int>(128, 1)), InvalidArgument);
}

TEST_CASE("probe sweep: chance on no-signal data, planted feature is found") {
  std::mt19937_64 rng(10);
  const std::size_t n = 500, d = 32;
  ProbeData planted;
  planted.layer = 1;
  planted.features = Tensor2D(2 * n, d);
  planted.labels.assign(2 * n, 0);
  std::fill(planted.labels.begin(), planted.labels.begin() + n, 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double v = normal(rng);
      planted.features(i, j) = v;
      planted.features(n + i, j) = j == 7 ? v : normal(rng);
    }
  ProbeData nosignal = planted;
  for (std::size_t i = 0; i < n; ++i) planted.features(i, 7) += 6.0;

  const std::vector<std::size_t> ks = default_k_grid(d);
  CHECK(ks == std::vector<std::size_t>{1, 8, 16, 32});
  ProbeLayerResult hit = probe_sweep(planted, ks, 1);
  CHECK(hit.top_features.front() == 7);
  CHECK(hit.results.front().accuracy >= 0.99);
  CHECK(hit.results.back().accuracy >= hit.results.front().accuracy - 0.05);
  CHECK(hit.results.front().n_test == 200);

  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) nosignal.features(n + i, j) = nosignal.features(i, j);
  for (const auto& r : probe_sweep(nosignal, ks, 1).results) CHECK(std::abs(r.accuracy - 0.5) <= 0.07);

  ProbeSplit split = paired_split(10, 0.8, 3);
  CHECK(split.train_rows.size() == 16);
  for (std::size_t r : split.test_rows) {
    const std::size_t partner = r < 10 ? r + 10 : r - 10;
    CHECK(std::find(split.test_rows.begin(), split.test_rows.end(), partner) != split.test_rows.end());
  }
}

TEST_CASE("interventions: identities and feature selection") {
  Fixture f;
  const std::size_t d = f.config.d_model;
  std::vector<MmdScores> rankings(3);
  std::mt19937_64 rng(12);
  for (auto& r : rankings) {
    r.scores.resize(d);
    for (double& s : r.scores) s = std::normal_distribution<double>(0, 1)(rng);
    r.ranking.resize(d);
    std::iota(r.ranking.begin(), r.ranking.end(), std::size_t{0});
    std::sort(r.ranking.begin(), r.ranking.end(),
              [&](std::size_t a, std::size_t b) { return std::abs(r.scores[a]) > std::abs(r.scores[b]); });
  }
  const PerplexityOptions opts{16, 32};
  const double ablated = perplexity(f.params, &f.adapters, f.val(), LayerSpan{1, 3}, opts);
  const double full = perplexity(f.params, &f.adapters, f.val(), std::nullopt, opts);

  InterventionSpec all{FeatureSelection::most, d, InterventionMode::zero, 0, std::nullopt};
  CHECK(std::abs(intervene(f.params, f.adapters, f.val(), rankings, all, opts) - ablated) < 1e-9);
  all.mode = InterventionMode::mean_replace;
  CHECK(std::abs(intervene(f.params, f.adapters, f.val(), rankings, all, opts) - ablated) < 1e-9);
  InterventionSpec none{FeatureSelection::random, 0, InterventionMode::zero, 0, std::nullopt};
  CHECK(intervene(f.params, f.adapters, f.val(), rankings, none, opts) == full);
  InterventionSpec too_many{FeatureSelection::most, d + 1, InterventionMode::zero, 0, std::nullopt};
  CHECK_THROWS_AS(intervene(f.params, f.adapters, f.val(), rankings, too_many, opts), InvalidArgument);

  InterventionSpec most{FeatureSelection::most, 3, InterventionMode::zero, 0, std::nullopt};
  auto sel = select_features(rankings, most, d);
  std::vector<std::size_t> expect(rankings[1].ranking.begin(), rankings[1].ranking.begin() + 3);
  std::sort(expect.begin(), expect.end());
  CHECK(sel[1] == expect);
  InterventionSpec least{FeatureSelection::least, 2, InterventionMode::zero, 0, std::size_t{2}};
  sel = select_features(rankings, least, d);
  CHECK(sel[0].empty());
  CHECK(sel[2].empty());
  CHECK(std::set<std::size_t>(sel[1].begin(), sel[1].end()) ==
        std::set<std::size_t>{rankings[1].ranking[d - 1], rankings[1].ranking[d - 2]});
  InterventionSpec rnd{FeatureSelection::random, 5, InterventionMode::zero, 7, std::nullopt};
  CHECK(select_features(rankings, rnd, d) == select_features(rankings, rnd, d));
  CHECK(select_features(rankings, rnd, d)[0] != select_features(rankings, rnd, d)[1]);

  CHECK(default_feature_grid(16) == std::vector<std::size_t>{1, 2, 4, 8, 16});
  CHECK(default_feature_grid(24).back() == 24);

  const std::vector<std::size_t> ns{4};
  const std::vector<FeatureSelection> sels{FeatureSelection::most, FeatureSelection::random};
  const std::vector<InterventionMode> modes{InterventionMode::zero};
  InterventionReport rep = intervention_sweep(f.params, f.adapters, f.val(), rankings, ns, sels, modes, 7, opts);
  CHECK(rep.entries.size() == 2);
  CHECK(rep.unintervened_perplexity == full);
  CHECK(rep.ablated_perplexity == ablated);
  InterventionSpec again{FeatureSelection::random, 4, InterventionMode::zero, 7, std::nullopt};
  CHECK(rep.find(4, FeatureSelection::random, InterventionMode::zero)->perplexity ==
        intervene(f.params, f.adapters, f.val(), rankings, again, opts));
}

TEST_CASE("pca alignment: identity, planted rotation, sign invariance") {
  std::mt19937_64 rng(13);
  const std::size_t n = 400, d = 8;
  std::normal_distribution<double> normal(0.0, 1.0);
  LabeledRepresentations src;
  src.features = Tensor2D(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    src.features(i, 0) = 5.0 * normal(rng);
    src.features(i, 1) = 2.0 * normal(rng);
    for (std::size_t j = 2; j < d; ++j) src.features(i, j) = 0.05 * normal(rng);
    src.labels.push_back(i % 2 ? "a" : "b");
  }
  AlignmentEntry same = pca_alignment(src, src, 3, Property::pos);
  CHECK(same.cosine[0][0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(same.cosine[1][1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(same.cosine[0][1] < 1e-9);

  // rotate by 90 degrees in the (e0, e1) plane, then stretch e1 so the
  // planted direction e0 becomes the target's second component
  LabeledRepresentations tgt = src;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = src.features(i, 0), b = src.features(i, 1);
    tgt.features(i, 0) = -b;
    tgt.features(i, 1) = a;
  }
  AlignmentEntry rot = pca_alignment(src, tgt, 3, Property::pos);
  CHECK(rot.cosine[0][0] < 0.05);
  CHECK(rot.cosine[0][1] > 0.99);
  CHECK(rot.cosine[1][0] > 0.99);
  CHECK(rot.target_projected.rows() == n);

  LabeledRepresentations flipped = tgt;
  for (double& v : flipped.features.values()) v = -v;
  AlignmentEntry flip = pca_alignment(src, flipped, 3, Property::pos);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(flip.cosine[i][j] == doctest::Approx(rot.cosine[i][j]).epsilon(1e-9));

  LabeledRepresentations tiny = src;
  tiny.features = Tensor2D(2, d);
  tiny.labels = {"a", "b"};
  CHECK_THROWS_AS(pca_alignment(tiny, src, 1, Property::pos), InvalidArgument);
  LabeledRepresentations mono = src;
  std::fill(mono.labels.begin(), mono.labels.end(), "a");
  CHECK_THROWS_AS(pca_alignment(src, mono, 1, Property::pos), InvalidArgument);
}

TEST_CASE("property representations follow the label table") {
  Fixture f;
  std::span<const std::vector<TokenId>> examples(f.target_windows.data(), 10);
  LabeledRepresentations tense =
      property_representations(f.params, nullptr, examples, f.languages.spec.target, Property::tense, 2, 1000);
  std::size_t verbs = 0;
  for (const auto& ex : examples)
    for (TokenId t : ex) verbs += f.languages.spec.target.property_labels.at(t).pos == PartOfSpeech::verb;
  CHECK(tense.features.rows() == verbs);
  for (const auto& l : tense.labels) CHECK((l == "pres" || l == "past"));
  LabeledRepresentations pos =
      property_representations(f.params, nullptr, examples, f.languages.spec.target, Property::pos, 0, 30);
  CHECK(pos.features.rows() == 30);
  CHECK(pos.features.row(0)[0] == model_forward(f.params, examples[0], ForwardOptions{nullptr, true}).trace->embedded(0, 0));
}

TEST_CASE("reports serialize to JSON and CSV") {
  LensReport lens;
  lens.k = 10;
  lens.n_examples = 2;
  lens.layers = {{0.25, 0.5, 0.25}, {1.0, 0.0, 0.0}};
  CHECK(lens_csv(lens) == "layer,fraction_target,fraction_source,fraction_other\n0,0.25,0.5,0.25\n1,1,0,0\n");
  CHECK(to_json(lens)["layers"][1]["fraction_target"] == 1.0);
  InterventionReport rep;
  rep.unintervened_perplexity = 3.0;
  rep.entries.push_back({2, FeatureSelection::least, InterventionMode::mean_replace, 4.5});
  CHECK(intervention_csv(rep) == "n_features,selection,mode,perplexity\n0,none,none,3\n2,least,mean_replace,4.5\n");
  CHECK(feature_selection_from_string("least") == FeatureSelection::least);
  CHECK(property_from_string("number") == Property::number);
  CHECK_THROWS_AS(property_from_string("gender"), InvalidArgument);
}
