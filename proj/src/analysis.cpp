#include "adaptlab/analysis.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "adaptlab/error.hpp"

namespace adaptlab {

namespace {

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

ResidualTrace trace_of(const TransformerParams& params, const AdapterView* view, std::span<const TokenId> tokens) {
  ForwardOptions options;
  options.adapters = view;
  options.capture_trace = true;
  return std::move(*model_forward(params, tokens, options).trace);
}

std::span<const double> layer_row(const ResidualTrace& trace, std::size_t layer, std::size_t position) {
  return layer == 0 ? trace.embedded.row(position) : trace.layers.at(layer - 1).x_out.row(position);
}

double l2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

// Groups sorted positions by example.
std::map<std::size_t, std::vector<std::size_t>> by_example(std::span<const TokenPosition> positions) {
  std::map<std::size_t, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < positions.size(); ++i) out[positions[i].example].push_back(i);
  return out;
}

}  // namespace

std::vector<std::vector<TokenId>> split_windows(std::span<const TokenId> corpus, std::size_t window) {
  if (window == 0) throw InvalidArgument("split_windows: window must be positive");
  std::vector<std::vector<TokenId>> out;
  for (std::size_t s = 0; s + window <= corpus.size(); s += window)
    out.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(s),
                     corpus.begin() + static_cast<std::ptrdiff_t>(s + window));
  return out;
}

// ---------------------------------------------------------------------------

std::vector<TokenId> top_k(std::span<const double> probs, std::size_t k) {
  k = std::min(k, probs.size());
  std::vector<TokenId> ids(probs.size());
  std::iota(ids.begin(), ids.end(), TokenId{0});
  auto better = [&](TokenId a, TokenId b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); };
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), better);
  ids.resize(k);
  return ids;
}

LensReport logit_lens(const TransformerParams& params, const AdapterView* adapters,
                      std::span<const std::vector<TokenId>> examples, std::size_t k, const LangIdTable& table) {
  if (k == 0) throw InvalidArgument("logit_lens: k must be at least 1");
  if (examples.empty()) throw InvalidArgument("logit_lens: no examples");
  const std::size_t n_layers = params.config.n_layers;
  std::vector<std::array<CompensatedSum, 3>> sums(n_layers + 1);
  for (const auto& ex : examples) {
    if (ex.empty()) throw InvalidArgument("logit_lens: empty example");
    const ResidualTrace trace = trace_of(params, adapters, ex);
    for (std::size_t l = 0; l <= n_layers; ++l) {
      const std::vector<double> probs = unembed_hidden(layer_row(trace, l, ex.size() - 1), params);
      const std::vector<TokenId> top = top_k(probs, k);
      std::array<std::size_t, 3> counts{0, 0, 0};
      for (TokenId t : top) ++counts[static_cast<std::size_t>(classify_token(t, table))];
      for (std::size_t c = 0; c < 3; ++c) sums[l][c].add(static_cast<double>(counts[c]) / static_cast<double>(top.size()));
    }
  }
  LensReport report;
  report.k = k;
  report.n_examples = examples.size();
  const double n = static_cast<double>(examples.size());
  for (const auto& s : sums) {
    report.layers.push_back(LensLayer{s[static_cast<std::size_t>(Language::target)].value() / n,
                                      s[static_cast<std::size_t>(Language::source)].value() / n,
                                      s[static_cast<std::size_t>(Language::other)].value() / n});
  }
  return report;
}

// ---------------------------------------------------------------------------

std::vector<TokenPosition> sample_positions(std::span<const std::vector<TokenId>> examples, std::size_t n,
                                            std::uint64_t seed) {
  std::vector<TokenPosition> all;
  for (std::size_t e = 0; e < examples.size(); ++e)
    for (std::size_t p = 0; p < examples[e].size(); ++p) all.push_back({e, p});
  if (n > all.size()) {
    throw InvalidArgument("requested " + std::to_string(n) + " positions but only " + std::to_string(all.size()) +
                          " are available");
  }
  auto rng = make_rng(seed, 0x706f73);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(n);
  std::sort(all.begin(), all.end());
  return all;
}

NormProfile norm_profile(const TransformerParams& params, const AdapterSet& adapters,
                         std::span<const std::vector<TokenId>> examples, std::size_t n_tokens, std::uint64_t seed) {
  if (n_tokens == 0) throw InvalidArgument("norm_profile: n_tokens must be positive");
  const std::vector<TokenPosition> positions = sample_positions(examples, n_tokens, seed);
  const std::size_t n_layers = params.config.n_layers;
  std::vector<std::array<CompensatedSum, 4>> sums(n_layers);
  const AdapterView view(adapters);
  for (const auto& [example, idx] : by_example(positions)) {
    const ResidualTrace trace = trace_of(params, &view, examples[example]);
    for (std::size_t i : idx) {
      const std::size_t p = positions[i].position;
      for (std::size_t l = 0; l < n_layers; ++l) {
        const LayerTrace& t = trace.layers[l];
        sums[l][0].add(l2(t.adapter_out.row(p)));
        sums[l][1].add(l2(t.ffn_out.row(p)));
        sums[l][2].add(l2(t.x_ffn.row(p)));
        sums[l][3].add(l2(t.x_out.row(p)));
      }
    }
  }
  NormProfile profile;
  profile.n_tokens = n_tokens;
  const double n = static_cast<double>(n_tokens);
  for (const auto& s : sums)
    profile.layers.push_back({s[0].value() / n, s[1].value() / n, s[2].value() / n, s[3].value() / n});
  return profile;
}

// ---------------------------------------------------------------------------

const AblationCell* AblationGrid::find(LayerSpan span) const {
  for (const auto& c : cells)
    if (c.span == span) return &c;
  return nullptr;
}

AblationGrid ablation_sweep(const TransformerParams& params, const AdapterSet& adapters,
                            std::span<const TokenId> corpus, const PerplexityOptions& options,
                            std::span<const LayerSpan> spans) {
  AblationGrid grid;
  grid.n_layers = adapters.n_layers();
  grid.full_perplexity = perplexity(params, &adapters, corpus, std::nullopt, options);
  std::vector<LayerSpan> todo(spans.begin(), spans.end());
  if (todo.empty()) {
    for (std::size_t a = 1; a <= grid.n_layers; ++a)
      for (std::size_t b = a; b <= grid.n_layers; ++b) todo.push_back({a, b});
  }
  for (const LayerSpan& span : todo) {
    validate_span(span, grid.n_layers);
    const double ppl = perplexity(params, &adapters, corpus, span, options);
    if (!std::isfinite(ppl)) throw NumericalError("ablation perplexity is not finite");
    grid.cells.push_back({span, ppl, ppl - grid.full_perplexity});
  }
  return grid;
}

// ---------------------------------------------------------------------------

std::string to_string(NegativeCase c) { return c == NegativeCase::case1 ? "case1" : "case2"; }

NegativeCase negative_case_from_string(const std::string& name) {
  if (name == "case1") return NegativeCase::case1;
  if (name == "case2") return NegativeCase::case2;
  throw InvalidArgument("unknown negative case: " + name);
}

std::vector<ProbeData> collect_probe_data(const TransformerParams& params, const AdapterSet& adapters,
                                          std::span<const std::vector<TokenId>> examples, NegativeCase negative_case,
                                          std::size_t n_per_class, std::uint64_t seed) {
  if (n_per_class == 0) throw InvalidArgument("collect_probe_data: n_per_class must be positive");
  const std::vector<TokenPosition> positions = sample_positions(examples, n_per_class, seed);
  const std::size_t n_layers = params.config.n_layers;
  const std::size_t d = params.config.d_model;
  std::vector<ProbeData> data(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    data[l].layer = l + 1;
    data[l].negative_case = negative_case;
    data[l].features = Tensor2D(2 * n_per_class, d);
    data[l].labels.assign(2 * n_per_class, 0);
    std::fill(data[l].labels.begin(), data[l].labels.begin() + static_cast<std::ptrdiff_t>(n_per_class), 1);
    data[l].positions = positions;
  }
  const AdapterView full(adapters);
  std::vector<AdapterView> without_layer;
  if (negative_case == NegativeCase::case2)
    for (std::size_t l = 1; l <= n_layers; ++l) without_layer.push_back(full.with_ablation({l, l}));

  auto copy_row = [](std::span<const double> src, std::span<double> dst) { std::copy(src.begin(), src.end(), dst.begin()); };
  for (const auto& [example, idx] : by_example(positions)) {
    const auto& tokens = examples[example];
    const ResidualTrace pos_trace = trace_of(params, &full, tokens);
    std::optional<ResidualTrace> base_trace;
    if (negative_case == NegativeCase::case1) base_trace = trace_of(params, nullptr, tokens);
    for (std::size_t l = 1; l <= n_layers; ++l) {
      std::optional<ResidualTrace> neg_trace;
      if (negative_case == NegativeCase::case2) neg_trace = trace_of(params, &without_layer[l - 1], tokens);
      const ResidualTrace& neg = negative_case == NegativeCase::case1 ? *base_trace : *neg_trace;
      for (std::size_t i : idx) {
        const std::size_t p = positions[i].position;
        copy_row(layer_row(pos_trace, l, p), data[l - 1].features.row(i));
        copy_row(layer_row(neg, l, p), data[l - 1].features.row(n_per_class + i));
      }
    }
  }
  return data;
}

MmdScores mmd_rank(const Tensor2D& features, std::span<const int> labels, std::span<const std::size_t> rows) {
  if (labels.size() != features.rows()) throw ShapeError("mmd_rank: one label per row required");
  const std::size_t d = features.cols();
  MmdScores out;
  std::vector<double> pos(d, 0.0), neg(d, 0.0);
  for (std::size_t r : rows) {
    if (r >= features.rows()) throw InvalidArgument("mmd_rank: row index out of range");
    auto x = features.row(r);
    if (labels[r] == 1) {
      ++out.n_positive;
      for (std::size_t j = 0; j < d; ++j) pos[j] += x[j];
    } else if (labels[r] == 0) {
      ++out.n_negative;
      for (std::size_t j = 0; j < d; ++j) neg[j] += x[j];
    } else {
      throw InvalidArgument("mmd_rank: labels must be 0 or 1");
    }
  }
  if (out.n_positive == 0 || out.n_negative == 0) throw InvalidArgument("mmd_rank: both classes are required");
  out.scores.resize(d);
  for (std::size_t j = 0; j < d; ++j)
    out.scores[j] = pos[j] / static_cast<double>(out.n_positive) - neg[j] / static_cast<double>(out.n_negative);
  out.ranking.resize(d);
  std::iota(out.ranking.begin(), out.ranking.end(), std::size_t{0});
  std::stable_sort(out.ranking.begin(), out.ranking.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(out.scores[a]) > std::abs(out.scores[b]); });
  return out;
}

MmdScores mmd_rank(const Tensor2D& features, std::span<const int> labels) {
  std::vector<std::size_t> rows(features.rows());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return mmd_rank(features, labels, rows);
}

ProbeSplit paired_split(std::size_t n_pairs, double train_fraction, std::uint64_t seed) {
  std::vector<std::size_t> pairs(n_pairs);
  std::iota(pairs.begin(), pairs.end(), std::size_t{0});
  auto rng = make_rng(seed, 0x73706c);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n_pairs)));
  ProbeSplit split;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    auto& dst = i < n_train ? split.train_rows : split.test_rows;
    dst.push_back(pairs[i]);
    dst.push_back(n_pairs + pairs[i]);
  }
  std::sort(split.train_rows.begin(), split.train_rows.end());
  std::sort(split.test_rows.begin(), split.test_rows.end());
  return split;
}

std::vector<std::size_t> default_k_grid(std::size_t d_model) {
  std::vector<std::size_t> out;
  for (std::size_t k : {1, 8, 16, 32, 64, 128, 256, 512})
    if (k <= d_model) out.push_back(k);
  return out;
}

ProbeLayerResult probe_sweep(const ProbeData& data, std::span<const std::size_t> ks, std::uint64_t seed,
                             const LogisticOptions& options) {
  const std::size_t n_rows = data.features.rows();
  if (n_rows % 2 != 0 || n_rows == 0) throw InvalidArgument("probe_sweep: expected paired rows");
  const ProbeSplit split = paired_split(n_rows / 2, 0.8, seed);
  if (split.test_rows.empty() || split.train_rows.empty()) throw InvalidArgument("probe_sweep: too few rows to split");
  const MmdScores mmd = mmd_rank(data.features, data.labels, split.train_rows);

  auto gather = [&](const std::vector<std::size_t>& rows, Tensor2D& x, std::vector<int>& y) {
    x = Tensor2D(rows.size(), data.features.cols());
    y.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto src = data.features.row(rows[i]);
      std::copy(src.begin(), src.end(), x.row(i).begin());
      y[i] = data.labels[rows[i]];
    }
  };
  Tensor2D x_train, x_test;
  std::vector<int> y_train, y_test;
  gather(split.train_rows, x_train, y_train);
  gather(split.test_rows, x_test, y_test);

  ProbeLayerResult out;
  out.layer = data.layer;
  const std::size_t kmax = ks.empty() ? 0 : *std::max_element(ks.begin(), ks.end());
  out.top_features.assign(mmd.ranking.begin(), mmd.ranking.begin() + static_cast<std::ptrdiff_t>(std::min(kmax, mmd.ranking.size())));
  for (std::size_t k : ks) {
    if (k == 0 || k > data.features.cols()) throw InvalidArgument("probe_sweep: k must lie in 1..d");
    const std::vector<std::size_t> features(mmd.ranking.begin(), mmd.ranking.begin() + static_cast<std::ptrdiff_t>(k));
    const LogisticProbe probe = logistic_fit(x_train, features, y_train, options);
    out.results.push_back({k, probe.accuracy(x_test, y_test), y_test.size()});
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(FeatureSelection s) {
  switch (s) {
    case FeatureSelection::most: return "most";
    case FeatureSelection::least: return "least";
    case FeatureSelection::random: return "random";
  }
  return "?";
}

FeatureSelection feature_selection_from_string(const std::string& name) {
  if (name == "most") return FeatureSelection::most;
  if (name == "least") return FeatureSelection::least;
  if (name == "random") return FeatureSelection::random;
  throw InvalidArgument("unknown feature selection: " + name);
}

std::vector<std::vector<std::size_t>> select_features(std::span<const MmdScores> rankings,
                                                      const InterventionSpec& spec, std::size_t d_model) {
  if (spec.n_features > d_model) {
    throw InvalidArgument("n_features " + std::to_string(spec.n_features) + " exceeds d_model " +
                          std::to_string(d_model));
  }
  std::vector<std::vector<std::size_t>> out(rankings.size());
  for (std::size_t l = 0; l < rankings.size(); ++l) {
    if (spec.only_layer && *spec.only_layer != l + 1) continue;
    const auto& ranking = rankings[l].ranking;
    if (ranking.size() != d_model) throw ShapeError("select_features: ranking length differs from d_model");
    switch (spec.selection) {
      case FeatureSelection::most:
        out[l].assign(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(spec.n_features));
        break;
      case FeatureSelection::least:
        out[l].assign(ranking.end() - static_cast<std::ptrdiff_t>(spec.n_features), ranking.end());
        break;
      case FeatureSelection::random: {
        std::vector<std::size_t> all(d_model);
        std::iota(all.begin(), all.end(), std::size_t{0});
        auto rng = make_rng(spec.seed, l + 1);
        std::shuffle(all.begin(), all.end(), rng);
        out[l].assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(spec.n_features));
        break;
      }
    }
    std::sort(out[l].begin(), out[l].end());
  }
  return out;
}

double intervene(const TransformerParams& params, const AdapterSet& adapters, std::span<const TokenId> corpus,
                 std::span<const MmdScores> rankings, const InterventionSpec& spec, const PerplexityOptions& options) {
  if (rankings.size() != adapters.n_layers()) throw ShapeError("intervene: one ranking per adapter layer required");
  if (spec.only_layer && (*spec.only_layer < 1 || *spec.only_layer > adapters.n_layers()))
    throw InvalidArgument("intervene: layer out of range");
  const auto features = select_features(rankings, spec, params.config.d_model);
  AdapterView view(adapters);
  for (std::size_t l = 0; l < features.size(); ++l)
    if (!features[l].empty()) view = view.with_intervention(l, FeatureIntervention{features[l], spec.mode});
  return perplexity(params, &view, corpus, options);
}

const InterventionEntry* InterventionReport::find(std::size_t n, FeatureSelection s, InterventionMode m) const {
  for (const auto& e : entries)
    if (e.n_features == n && e.selection == s && e.mode == m) return &e;
  return nullptr;
}

std::vector<std::size_t> default_feature_grid(std::size_t d_model) {
  std::vector<std::size_t> out;
  for (std::size_t n = 1; n <= d_model; n *= 2) out.push_back(n);
  if (out.empty() || out.back() != d_model) out.push_back(d_model);
  return out;
}

InterventionReport intervention_sweep(const TransformerParams& params, const AdapterSet& adapters,
                                      std::span<const TokenId> corpus, std::span<const MmdScores> rankings,
                                      std::span<const std::size_t> n_features,
                                      std::span<const FeatureSelection> selections,
                                      std::span<const InterventionMode> modes, std::uint64_t seed,
                                      const PerplexityOptions& options) {
  InterventionReport report;
  report.unintervened_perplexity = perplexity(params, &adapters, corpus, std::nullopt, options);
  report.ablated_perplexity = perplexity(params, &adapters, corpus, LayerSpan{1, adapters.n_layers()}, options);
  for (std::size_t n : n_features)
    for (FeatureSelection s : selections)
      for (InterventionMode m : modes) {
        InterventionSpec spec{s, n, m, seed, std::nullopt};
        report.entries.push_back({n, s, m, intervene(params, adapters, corpus, rankings, spec, options)});
      }
  return report;
}

// ---------------------------------------------------------------------------

std::string to_string(Property p) {
  switch (p) {
    case Property::pos: return "pos";
    case Property::number: return "number";
    case Property::tense: return "tense";
  }
  return "?";
}

Property property_from_string(const std::string& name) {
  if (name == "pos") return Property::pos;
  if (name == "number") return Property::number;
  if (name == "tense") return Property::tense;
  throw InvalidArgument("unknown property: " + name);
}

namespace {

std::optional<std::string> property_value(const SyntheticLanguageSpec& language, TokenId token, Property property) {
  auto it = language.property_labels.find(token);
  if (it == language.property_labels.end()) return std::nullopt;
  const TokenProperties& p = it->second;
  switch (property) {
    case Property::pos: return to_string(p.pos);
    case Property::number:
      if (p.number) return to_string(*p.number);
      return std::nullopt;
    case Property::tense:
      if (p.tense) return to_string(*p.tense);
      return std::nullopt;
  }
  return std::nullopt;
}

}  // namespace

LabeledRepresentations property_representations(const TransformerParams& params, const AdapterView* adapters,
                                                 std::span<const std::vector<TokenId>> examples,
                                                 const SyntheticLanguageSpec& language, Property property,
                                                 std::size_t layer, std::size_t max_rows) {
  if (layer > params.config.n_layers) throw InvalidArgument("property_representations: layer out of range");
  std::vector<std::vector<double>> rows;
  LabeledRepresentations out;
  for (const auto& ex : examples) {
    if (rows.size() >= max_rows) break;
    bool any = false;
    for (TokenId t : ex) any = any || property_value(language, t, property).has_value();
    if (!any) continue;
    const ResidualTrace trace = trace_of(params, adapters, ex);
    for (std::size_t p = 0; p < ex.size() && rows.size() < max_rows; ++p) {
      auto value = property_value(language, ex[p], property);
      if (!value) continue;
      auto row = layer_row(trace, layer, p);
      rows.emplace_back(row.begin(), row.end());
      out.labels.push_back(*value);
    }
  }
  out.features = Tensor2D(rows.size(), params.config.d_model);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), out.features.row(i).begin());
  return out;
}

AlignmentEntry pca_alignment(const LabeledRepresentations& source, const LabeledRepresentations& target,
                             std::size_t layer, Property property) {
  constexpr std::size_t m = 2;
  for (const auto* side : {&source, &target}) {
    if (side->features.rows() < m + 1) throw InvalidArgument("pca_alignment: need at least 3 samples per language");
    if (side->labels.size() != side->features.rows()) throw ShapeError("pca_alignment: one label per row required");
    if (std::set<std::string>(side->labels.begin(), side->labels.end()).size() < 2)
      throw InvalidArgument("pca_alignment: at least two property classes are required in each language");
  }
  if (source.features.cols() != target.features.cols()) throw ShapeError("pca_alignment: width mismatch");
  const PcaProjection src = pca_fit(source.features, m);
  const PcaProjection tgt = pca_fit(target.features, m);
  AlignmentEntry e;
  e.layer = layer;
  e.property = property;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double dot = 0.0;
      auto a = src.components.row(i);
      auto b = tgt.components.row(j);
      for (std::size_t c = 0; c < a.size(); ++c) dot += a[c] * b[c];
      e.cosine[i][j] = std::min(1.0, std::abs(dot));
    }
  e.source_projected = src.project(source.features);
  e.target_projected = src.project(target.features);
  e.source_labels = source.labels;
  e.target_labels = target.labels;
  return e;
}

// ---------------------------------------------------------------------------

Json to_json(const LensReport& r) {
  Json layers = Json::array();
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    layers.push_back({{"layer", l},
                      {"fraction_target", r.layers[l].fraction_target},
                      {"fraction_source", r.layers[l].fraction_source},
                      {"fraction_other", r.layers[l].fraction_other}});
  }
  return Json{{"kind", "lens"}, {"k", r.k}, {"n_examples", r.n_examples}, {"layers", layers}};
}

Json to_json(const NormProfile& r) {
  Json layers = Json::array();
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    const auto& n = r.layers[l];
    layers.push_back({{"layer", l + 1},
                      {"adapter_out", n.adapter_out},
                      {"ffn_out", n.ffn_out},
                      {"x_ffn", n.x_ffn},
                      {"x_out", n.x_out}});
  }
  return Json{{"kind", "norms"}, {"n_tokens", r.n_tokens}, {"layers", layers}};
}

Json to_json(const AblationGrid& r) {
  Json cells = Json::array();
  for (const auto& c : r.cells)
    cells.push_back({{"first", c.span.first}, {"last", c.span.last}, {"perplexity", c.perplexity}, {"delta", c.delta}});
  return Json{{"kind", "ablation"},
              {"n_layers", r.n_layers},
              {"full_perplexity", r.full_perplexity},
              {"report_cap", r.report_cap},
              {"cells", cells}};
}

Json to_json(const MmdScores& r) {
  return Json{{"scores", r.scores}, {"ranking", r.ranking}, {"n_positive", r.n_positive}, {"n_negative", r.n_negative}};
}

Json to_json(const ProbeLayerResult& r) {
  Json results = Json::array();
  for (const auto& p : r.results) results.push_back({{"k", p.k}, {"accuracy", p.accuracy}, {"n_test", p.n_test}});
  return Json{{"layer", r.layer}, {"results", results}, {"top_features", r.top_features}};
}

Json to_json(const InterventionReport& r) {
  Json entries = Json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"n_features", e.n_features},
                       {"selection", to_string(e.selection)},
                       {"mode", to_string(e.mode)},
                       {"perplexity", e.perplexity}});
  }
  return Json{{"kind", "intervention"},
              {"unintervened_perplexity", r.unintervened_perplexity},
              {"ablated_perplexity", r.ablated_perplexity},
              {"entries", entries}};
}

Json to_json(const AlignmentEntry& r) {
  return Json{{"layer", r.layer},
              {"property", to_string(r.property)},
              {"cosine", {{r.cosine[0][0], r.cosine[0][1]}, {r.cosine[1][0], r.cosine[1][1]}}},
              {"n_source", r.source_projected.rows()},
              {"n_target", r.target_projected.rows()}};
}

std::string lens_csv(const LensReport& r) {
  std::ostringstream os;
  os << "layer,fraction_target,fraction_source,fraction_other\n";
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    os << l << ',' << num(r.layers[l].fraction_target) << ',' << num(r.layers[l].fraction_source) << ','
       << num(r.layers[l].fraction_other) << '\n';
  }
  return os.str();
}

std::string norms_csv(const NormProfile& r) {
  std::ostringstream os;
  os << "layer,adapter_out,ffn_out,x_ffn,x_out\n";
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    const auto& n = r.layers[l];
    os << l + 1 << ',' << num(n.adapter_out) << ',' << num(n.ffn_out) << ',' << num(n.x_ffn) << ',' << num(n.x_out)
       << '\n';
  }
  return os.str();
}

std::string ablation_csv(const AblationGrid& r) {
  std::ostringstream os;
  os << "first,last,delta_ppl\n";
  for (const auto& c : r.cells) os << c.span.first << ',' << c.span.last << ',' << num(std::min(c.delta, r.report_cap)) << '\n';
  return os.str();
}

std::string probe_csv(std::span<const ProbeLayerResult> r) {
  std::ostringstream os;
  os << "layer,k,accuracy,n_test\n";
  for (const auto& layer : r)
    for (const auto& p : layer.results) os << layer.layer << ',' << p.k << ',' << num(p.accuracy) << ',' << p.n_test << '\n';
  return os.str();
}

std::string intervention_csv(const InterventionReport& r) {
  std::ostringstream os;
  os << "n_features,selection,mode,perplexity\n";
  os << 0 << ",none,none," << num(r.unintervened_perplexity) << '\n';
  for (const auto& e : r.entries)
    os << e.n_features << ',' << to_string(e.selection) << ',' << to_string(e.mode) << ',' << num(e.perplexity) << '\n';
  return os.str();
}

std::string alignment_csv(std::span<const AlignmentEntry> r) {
  std::ostringstream os;
  os << "layer,property,cos_pc1_pc1,cos_pc1_pc2,cos_pc2_pc1,cos_pc2_pc2\n";
  for (const auto& e : r) {
    os << e.layer << ',' << to_string(e.property) << ',' << num(e.cosine[0][0]) << ',' << num(e.cosine[0][1]) << ','
       << num(e.cosine[1][0]) << ',' << num(e.cosine[1][1]) << '\n';
  }
  return os.str();
}

std::string projection_csv(std::span<const AlignmentEntry> r) {
  std::ostringstream os;
  os << "layer,property,language,label,pc1,pc2\n";
  for (const auto& e : r) {
    for (std::size_t i = 0; i < e.source_projected.rows(); ++i) {
      os << e.layer << ',' << to_string(e.property) << ",source," << e.source_labels[i] << ','
         << num(e.source_projected(i, 0)) << ',' << num(e.source_projected(i, 1)) << '\n';
    }
    for (std::size_t i = 0; i < e.target_projected.rows(); ++i) {
      os << e.layer << ',' << to_string(e.property) << ",target," << e.target_labels[i] << ','
         << num(e.target_projected(i, 0)) << ',' << num(e.target_projected(i, 1)) << '\n';
    }
  }
  return os.str();
}

}  // namespace adaptlab
