#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adaptlab/adapters.hpp"
#include "adaptlab/checkpoint.hpp"
#include "adaptlab/corpus.hpp"
#include "adaptlab/model.hpp"
#include "adaptlab/training.hpp"

namespace adaptlab {

// Consecutive non-overlapping windows of `window` tokens; a trailing partial
// window is dropped.
std::vector<std::vector<TokenId>> split_windows(std::span<const TokenId> corpus, std::size_t window);

// ---------------------------------------------------------------------------
// Logit lens.

struct LensLayer {
  double fraction_target = 0.0;
  double fraction_source = 0.0;
  double fraction_other = 0.0;
};

struct LensReport {
  std::vector<LensLayer> layers;  // index 0 is the embedding output, 1..L the blocks
  std::size_t k = 0;
  std::size_t n_examples = 0;
};

// Top-k of unembed_hidden(x_out^l) at the last position of every example,
// ties broken by ascending token id. Fractions are averaged over examples.
LensReport logit_lens(const TransformerParams& params, const AdapterView* adapters,
                      std::span<const std::vector<TokenId>> examples, std::size_t k, const LangIdTable& table);

// Token ids of the k largest entries, ties by ascending id.
std::vector<TokenId> top_k(std::span<const double> probs, std::size_t k);

// ---------------------------------------------------------------------------
// Norm profile.

struct NormLayer {
  double adapter_out = 0.0;
  double ffn_out = 0.0;
  double x_ffn = 0.0;
  double x_out = 0.0;
};

struct NormProfile {
  std::vector<NormLayer> layers;  // 1..L stored at 0..L-1
  std::size_t n_tokens = 0;
};

struct TokenPosition {
  std::size_t example = 0;
  std::size_t position = 0;
  friend bool operator==(const TokenPosition&, const TokenPosition&) = default;
  friend auto operator<=>(const TokenPosition&, const TokenPosition&) = default;
};

// n distinct (example, position) pairs drawn uniformly without replacement,
// returned in ascending order.
std::vector<TokenPosition> sample_positions(std::span<const std::vector<TokenId>> examples, std::size_t n,
                                            std::uint64_t seed);

NormProfile norm_profile(const TransformerParams& params, const AdapterSet& adapters,
                         std::span<const std::vector<TokenId>> examples, std::size_t n_tokens, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Ablation grid.

struct AblationCell {
  LayerSpan span;
  double perplexity = 0.0;
  double delta = 0.0;  // perplexity - full perplexity, uncapped
};

struct AblationGrid {
  std::size_t n_layers = 0;
  double full_perplexity = 0.0;
  double report_cap = 100.0;
  std::vector<AblationCell> cells;  // row-major over first <= last

  const AblationCell* find(LayerSpan span) const;
};

// Every span with first <= last, or only the listed spans.
AblationGrid ablation_sweep(const TransformerParams& params, const AdapterSet& adapters,
                            std::span<const TokenId> corpus, const PerplexityOptions& options,
                            std::span<const LayerSpan> spans = {});

// ---------------------------------------------------------------------------
// Probing.

enum class NegativeCase { case1, case2 };
std::string to_string(NegativeCase c);
NegativeCase negative_case_from_string(const std::string& name);

// Paired rows: row i (label 1) is x_out^l with every adapter active, row
// n + i (label 0) is the same token position without adapters (case1) or
// without only the layer-l adapter (case2).
struct ProbeData {
  std::size_t layer = 0;  // 1-based
  NegativeCase negative_case = NegativeCase::case2;
  Tensor2D features;
  std::vector<int> labels;
  std::vector<TokenPosition> positions;
};

// One ProbeData per layer 1..L built from the same positions.
std::vector<ProbeData> collect_probe_data(const TransformerParams& params, const AdapterSet& adapters,
                                          std::span<const std::vector<TokenId>> examples, NegativeCase negative_case,
                                          std::size_t n_per_class, std::uint64_t seed);

struct MmdScores {
  std::vector<double> scores;         // mean over positives minus mean over negatives
  std::vector<std::size_t> ranking;   // by |score| descending, ties by ascending index
  std::size_t n_positive = 0;
  std::size_t n_negative = 0;
};

MmdScores mmd_rank(const Tensor2D& features, std::span<const int> labels);
MmdScores mmd_rank(const Tensor2D& features, std::span<const int> labels, std::span<const std::size_t> rows);

// Pair indices for the 80/20 split; both rows of a pair land on the same side.
struct ProbeSplit {
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> test_rows;
};
ProbeSplit paired_split(std::size_t n_pairs, double train_fraction, std::uint64_t seed);

struct ProbeResult {
  std::size_t k = 0;
  double accuracy = 0.0;
  std::size_t n_test = 0;
};

struct ProbeLayerResult {
  std::size_t layer = 0;
  std::vector<ProbeResult> results;
  std::vector<std::size_t> top_features;  // ranking prefix from the training rows
};

std::vector<std::size_t> default_k_grid(std::size_t d_model);

// MMD ranking on the training split, then one logistic probe per k on the
// top-k features, accuracy on the held-out split.
ProbeLayerResult probe_sweep(const ProbeData& data, std::span<const std::size_t> ks, std::uint64_t seed,
                             const LogisticOptions& options = {});

// ---------------------------------------------------------------------------
// Feature interventions.

enum class FeatureSelection { most, least, random };
std::string to_string(FeatureSelection s);
FeatureSelection feature_selection_from_string(const std::string& name);

struct InterventionSpec {
  FeatureSelection selection = FeatureSelection::most;
  std::size_t n_features = 0;
  InterventionMode mode = InterventionMode::zero;
  std::uint64_t seed = 0;
  std::optional<std::size_t> only_layer;  // 1-based; all layers when empty
};

// Features chosen for each layer (index l - 1) from that layer's ranking.
std::vector<std::vector<std::size_t>> select_features(std::span<const MmdScores> rankings,
                                                      const InterventionSpec& spec, std::size_t d_model);

double intervene(const TransformerParams& params, const AdapterSet& adapters, std::span<const TokenId> corpus,
                 std::span<const MmdScores> rankings, const InterventionSpec& spec, const PerplexityOptions& options);

struct InterventionEntry {
  std::size_t n_features = 0;
  FeatureSelection selection = FeatureSelection::most;
  InterventionMode mode = InterventionMode::zero;
  double perplexity = 0.0;
};

struct InterventionReport {
  double unintervened_perplexity = 0.0;
  double ablated_perplexity = 0.0;
  std::vector<InterventionEntry> entries;

  const InterventionEntry* find(std::size_t n, FeatureSelection s, InterventionMode m) const;
};

// {1, 2, 4, ..., d}, with d appended when it is not a power of two.
std::vector<std::size_t> default_feature_grid(std::size_t d_model);

InterventionReport intervention_sweep(const TransformerParams& params, const AdapterSet& adapters,
                                      std::span<const TokenId> corpus, std::span<const MmdScores> rankings,
                                      std::span<const std::size_t> n_features,
                                      std::span<const FeatureSelection> selections,
                                      std::span<const InterventionMode> modes, std::uint64_t seed,
                                      const PerplexityOptions& options);

// ---------------------------------------------------------------------------
// PCA alignment.

enum class Property { pos, number, tense };
std::string to_string(Property p);
Property property_from_string(const std::string& name);

struct LabeledRepresentations {
  Tensor2D features;             // n x d
  std::vector<std::string> labels;  // property value per row
};

// x_out^layer at every position whose token carries `property`.
LabeledRepresentations property_representations(const TransformerParams& params, const AdapterView* adapters,
                                                 std::span<const std::vector<TokenId>> examples,
                                                 const SyntheticLanguageSpec& language, Property property,
                                                 std::size_t layer, std::size_t max_rows);

struct AlignmentEntry {
  std::size_t layer = 0;
  Property property = Property::pos;
  double cosine[2][2] = {{0, 0}, {0, 0}};  // |cos(PC_i^src, PC_j^tgt)|
  Tensor2D source_projected;  // source rows through the source PCA
  Tensor2D target_projected;  // target rows through the source PCA
  std::vector<std::string> source_labels;
  std::vector<std::string> target_labels;
};

AlignmentEntry pca_alignment(const LabeledRepresentations& source, const LabeledRepresentations& target,
                             std::size_t layer, Property property);

// ---------------------------------------------------------------------------
// Serialization.

Json to_json(const LensReport& r);
Json to_json(const NormProfile& r);
Json to_json(const AblationGrid& r);
Json to_json(const MmdScores& r);
Json to_json(const ProbeLayerResult& r);
Json to_json(const InterventionReport& r);
Json to_json(const AlignmentEntry& r);

std::string lens_csv(const LensReport& r);
std::string norms_csv(const NormProfile& r);
// Rendered grid, Δppl capped at report_cap.
std::string ablation_csv(const AblationGrid& r);
std::string probe_csv(std::span<const ProbeLayerResult> r);
std::string intervention_csv(const InterventionReport& r);
std::string alignment_csv(std::span<const AlignmentEntry> r);
std::string projection_csv(std::span<const AlignmentEntry> r);

}  // namespace adaptlab
