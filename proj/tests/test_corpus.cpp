#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "adaptlab/corpus.hpp"
#include "adaptlab/error.hpp"

using namespace adaptlab;

namespace {

LanguagePairOptions small_options(std::uint64_t seed = 1) {
  LanguagePairOptions o;
  o.seed = seed;
  o.vocab_size = 64;
  o.words_per_language = 24;
  return o;
}

}  // namespace

TEST_CASE("language pair: disjoint scripts at zero overlap, deterministic") {
  LanguagePair a = generate_language_pair(LanguagePairOptions{}, 200, 12);
  LanguagePair b = generate_language_pair(LanguagePairOptions{}, 200, 12);
  CHECK(a.source == b.source);
  CHECK(a.target == b.target);
  CHECK(a.source.size() == 2400);
  std::set<TokenId> src(a.source.begin(), a.source.end());
  for (TokenId t : a.target) CHECK(src.count(t) == 0);
  for (TokenId t : a.source) CHECK(a.spec.source.in_script(t));
  for (TokenId t : a.target) CHECK(a.spec.target.in_script(t));
  CHECK(a.spec.target.shared_tokens.empty());

  LanguagePairOptions other;
  other.seed = 2;
  CHECK(generate_language_pair(other, 200, 12).source != a.source);
}

TEST_CASE("language pair: rows are distributions and target grammar is a permuted copy") {
  LanguagePairSpec spec = make_language_pair(LanguagePairOptions{});
  for (const auto* lang : {&spec.source, &spec.target}) {
    for (std::size_t r = 0; r < lang->transitions.rows(); ++r) {
      double total = 0.0;
      for (double p : lang->transitions.row(r)) {
        CHECK(p >= 0.0);
        total += p;
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK(spec.target.transitions == spec.source.transitions);
  std::vector<TokenId> sorted = spec.target.words;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == spec.target.range_lo + i);
  CHECK(spec.target.words != sorted);  // permuted, not the identity layout

  LanguagePairOptions perturbed;
  perturbed.grammar_perturbation = 0.5;
  CHECK_FALSE(make_language_pair(perturbed).target.transitions == spec.source.transitions);
}

TEST_CASE("language pair: overlap reuses source ids") {
  LanguagePairOptions o;
  o.overlap_fraction = 0.25;
  LanguagePair pair = generate_language_pair(o, 500, 12);
  CHECK(pair.spec.target.shared_tokens.size() == 48);
  std::set<TokenId> shared(pair.spec.target.shared_tokens.begin(), pair.spec.target.shared_tokens.end());
  for (TokenId t : shared) CHECK(pair.spec.source.in_script(t));
  std::size_t reused = 0;
  for (TokenId t : pair.target) reused += shared.count(t);
  CHECK(reused > 0);
  for (TokenId t : pair.target) CHECK((pair.spec.target.in_script(t) || shared.count(t) == 1));
}

TEST_CASE("language pair: vocabulary overflow and bad knobs are rejected") {
  LanguagePairOptions o;
  o.vocab_size = 300;
  CHECK_THROWS_AS(make_language_pair(o), InvalidArgument);
  o = LanguagePairOptions{};
  o.words_per_language = 100;
  CHECK_THROWS_AS(make_language_pair(o), InvalidArgument);
  o = LanguagePairOptions{};
  o.overlap_fraction = 1.0;
  CHECK_THROWS_AS(make_language_pair(o), InvalidArgument);
}

namespace {

struct RowStats {
  double n = 0.0;
  double tv = 0.0;
  double noise = 0.0;  // expected TV of an exact sampler with n draws
};

std::vector<RowStats> bigram_row_stats(const SyntheticLanguageSpec& spec, std::size_t n_tokens,
                                       std::size_t sentence_len, std::uint64_t seed) {
  std::vector<TokenId> corpus = sample_corpus(spec, n_tokens / sentence_len, sentence_len, seed);
  const std::size_t w = spec.words.size();
  std::vector<std::vector<double>> counts(w, std::vector<double>(w, 0.0));
  for (std::size_t i = 0; i + 1 < corpus.size(); ++i) {
    if (i % sentence_len == sentence_len - 1) continue;
    counts[*spec.word_of(corpus[i])][*spec.word_of(corpus[i + 1])] += 1.0;
  }
  std::vector<RowStats> rows(w);
  for (std::size_t r = 0; r < w; ++r) {
    for (double c : counts[r]) rows[r].n += c;
    for (std::size_t c = 0; c < w; ++c) {
      const double p = spec.transitions(r, c);
      rows[r].tv += 0.5 * std::abs(counts[r][c] / rows[r].n - p);
      rows[r].noise += 0.5 * std::sqrt(2.0 * p * (1.0 - p) / (std::numbers::pi * rows[r].n));
    }
  }
  return rows;
}

}  // namespace

TEST_CASE("sampled bigram frequencies match the transition table") {
  LanguagePairOptions o = small_options(3);
  o.transition_spread = 0.0;
  const LanguagePairSpec flat = make_language_pair(o);
  double worst = 0.0;
  for (const RowStats& row : bigram_row_stats(flat.source, 1000000, 50, 9)) worst = std::max(worst, row.tv);
  INFO("worst row TV " << worst);
  CHECK(worst < 0.02);

  const LanguagePairSpec spec = make_language_pair(LanguagePairOptions{});
  for (const auto* lang : {&spec.source, &spec.target}) {
    for (const RowStats& row : bigram_row_stats(*lang, 100000, 50, 10)) {
      REQUIRE(row.n > 0.0);
      CHECK(row.tv < 2.0 * row.noise);
    }
  }
}

TEST_CASE("property labels cover every word with a consistent assignment") {
  LanguagePairSpec spec = make_language_pair(LanguagePairOptions{});
  for (const auto* lang : {&spec.source, &spec.target}) {
    CHECK(lang->property_labels.size() == lang->words.size());
    for (TokenId t : lang->words) {
      const TokenProperties& p = lang->property_labels.at(t);
      const bool has_number = p.pos != PartOfSpeech::adp;
      CHECK(p.number.has_value() == has_number);
      CHECK(p.tense.has_value() == (p.pos == PartOfSpeech::verb));
    }
  }
  for (std::size_t w = 0; w < spec.source.words.size(); ++w) {
    CHECK(spec.source.property_labels.at(spec.source.words[w]) == spec.target.property_labels.at(spec.target.words[w]));
  }
}

TEST_CASE("classify_token: script rule, ratio rule, unseen") {
  LanguagePairOptions o = small_options();
  o.overlap_fraction = 0.25;
  LanguagePair pair = generate_language_pair(o, 300, 10);
  LangIdTable table = build_langid_table(pair.spec, pair.source, pair.target, 64);

  TokenId target_only = 0;
  for (TokenId t : pair.target)
    if (pair.spec.target.in_script(t)) {
      target_only = t;
      break;
    }
  CHECK(classify_token(target_only, table) == Language::target);
  CHECK(classify_token(63, table) == Language::other);

  // constructed counts on a shared id
  const TokenId shared = table.shared_tokens.front();
  table.source_counts[shared] = 50;
  table.target_counts[shared] = 100;  // ratio 0.5 <= 0.7
  CHECK(classify_token(shared, table) == Language::target);
  table.source_counts[shared] = 70;  // ratio 0.7, boundary is inclusive
  CHECK(classify_token(shared, table) == Language::target);
  table.source_counts[shared] = 80;  // ratio 0.8
  CHECK(classify_token(shared, table) == Language::source);
  table.source_counts[shared] = 300;  // source is the majority
  CHECK(classify_token(shared, table) == Language::source);
  table.source_counts[shared] = 0;
  table.target_counts[shared] = 0;
  CHECK(classify_token(shared, table) == Language::other);
}

TEST_CASE("classify_token is exact on held-out text at zero overlap") {
  LanguagePairOptions o = small_options(5);
  LanguagePair pair = generate_language_pair(o, 400, 10);
  LangIdTable table = build_langid_table(pair.spec, pair.source, pair.target, 64);
  auto held_src = sample_corpus(pair.spec.source, 100, 10, 77);
  auto held_tgt = sample_corpus(pair.spec.target, 100, 10, 78);
  for (TokenId t : held_src) CHECK(classify_token(t, table) == Language::source);
  for (TokenId t : held_tgt) CHECK(classify_token(t, table) == Language::target);
}

TEST_CASE("batch iterator: exact batch, determinism, bounds") {
  std::vector<TokenId> corpus(4 * 8);
  for (std::size_t i = 0; i < corpus.size(); ++i) corpus[i] = static_cast<TokenId>(i);
  BatchIterator one(corpus, 4, 8, 1, 16);
  CHECK(one.batches_per_epoch() == 1);
  auto b = one.next();
  REQUIRE(b.size() == 4);
  std::set<TokenId> seen;
  for (const auto& chunk : b) {
    CHECK(chunk.size() == 8);
    CHECK(chunk.front() % 8 == 0);
    seen.insert(chunk.begin(), chunk.end());
  }
  CHECK(seen.size() == 32);

  LanguagePair pair = generate_language_pair(LanguagePairOptions{}, 1000, 12);
  BatchIterator x(pair.source, 4, 16, 7, 128), y(pair.source, 4, 16, 7, 128);
  for (int i = 0; i < 500; ++i) {
    auto bx = x.next();
    CHECK(bx == y.next());
    for (const auto& chunk : bx)
      for (TokenId t : chunk) CHECK(t < 512);
  }
  CHECK(x.epoch() == 2);

  CHECK_THROWS_AS(BatchIterator(corpus, 4, 32, 1, 16), InvalidArgument);
  CHECK_THROWS_AS(BatchIterator(std::vector<TokenId>{}, 1, 4, 1, 16), InvalidArgument);
  CHECK_THROWS_AS(BatchIterator(corpus, 5, 8, 1, 16), InvalidArgument);
}

TEST_CASE("mix_corpora swaps whole sentences at the requested rate") {
  LanguagePair pair = generate_language_pair(LanguagePairOptions{}, 4000, 10);
  auto none = mix_corpora(pair.source, pair.target, 0.0, 10, 3);
  CHECK(none == pair.source);
  auto mixed = mix_corpora(pair.source, pair.target, 0.1, 10, 3);
  CHECK(mixed.size() == pair.source.size());
  std::size_t target_sentences = 0;
  for (std::size_t s = 0; s < mixed.size(); s += 10) {
    const bool first_target = pair.spec.target.in_script(mixed[s]);
    for (std::size_t i = s; i < s + 10; ++i) CHECK(pair.spec.target.in_script(mixed[i]) == first_target);
    target_sentences += first_target;
  }
  CHECK(std::abs(static_cast<double>(target_sentences) / 4000.0 - 0.1) < 0.03);
}

TEST_CASE("corpus and spec files round-trip") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "adaptlab_test_corpus";
  fs::remove_all(dir);
  LanguagePairOptions o;
  o.overlap_fraction = 0.1;
  LanguagePair pair = generate_language_pair(o, 50, 10);
  write_corpus(dir / "source.txt", pair.source);
  CHECK(read_corpus(dir / "source.txt") == pair.source);
  SyntheticLanguageSpec back = language_spec_from_json(Json::parse(to_json(pair.spec.target).dump()));
  CHECK(back.words == pair.spec.target.words);
  CHECK(back.transitions == pair.spec.target.transitions);
  CHECK(back.shared_tokens == pair.spec.target.shared_tokens);
  CHECK(back.property_labels == pair.spec.target.property_labels);
  CHECK_THROWS_AS(read_corpus(dir / "missing.txt"), MissingArtifact);
}
