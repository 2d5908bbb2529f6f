#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adaptlab/checkpoint.hpp"
#include "adaptlab/params.hpp"

namespace adaptlab {

enum class Language { source, target, other };
std::string to_string(Language lang);

enum class PartOfSpeech { adp, det, noun, verb };
enum class GrammaticalNumber { sing, plur };
enum class Tense { pres, past };

std::string to_string(PartOfSpeech pos);
std::string to_string(GrammaticalNumber number);
std::string to_string(Tense tense);

struct TokenProperties {
  PartOfSpeech pos = PartOfSpeech::adp;
  std::optional<GrammaticalNumber> number;
  std::optional<Tense> tense;

  friend bool operator==(const TokenProperties&, const TokenProperties&) = default;
};

// A bigram language over `words.size()` words. Word w is written as token
// words[w]; the script range [range_lo, range_hi) is the language's own
// vocabulary slice. Shared tokens are words spelled with another language's ids.
struct SyntheticLanguageSpec {
  std::string name;
  TokenId range_lo = 0;
  TokenId range_hi = 0;
  std::vector<TokenId> words;
  Tensor2D transitions;         // words x words, row-stochastic
  std::vector<double> initial;  // sentence-start distribution over words
  std::vector<TokenId> shared_tokens;
  std::map<TokenId, TokenProperties> property_labels;

  bool in_script(TokenId t) const { return t >= range_lo && t < range_hi; }
  // Word index for a token of this language, if any.
  std::optional<std::size_t> word_of(TokenId t) const;
};

struct LanguagePairOptions {
  std::uint64_t seed = 0;
  std::size_t vocab_size = 512;
  std::size_t words_per_language = 192;  // multiple of 24
  double overlap_fraction = 0.0;
  double grammar_perturbation = 0.0;  // 0 = exact permuted copy
  double transition_spread = 1.0;     // log-normal sigma of within-class weights
};

struct LanguagePairSpec {
  SyntheticLanguageSpec source;
  SyntheticLanguageSpec target;
};

LanguagePairSpec make_language_pair(const LanguagePairOptions& options);

// Concatenated sentences sampled from the bigram grammar.
std::vector<TokenId> sample_corpus(const SyntheticLanguageSpec& spec, std::size_t n_sentences,
                                   std::size_t sentence_len, std::uint64_t seed);

struct LanguagePair {
  LanguagePairSpec spec;
  std::vector<TokenId> source;
  std::vector<TokenId> target;
};

LanguagePair generate_language_pair(const LanguagePairOptions& options, std::size_t n_sentences,
                                    std::size_t sentence_len);

// Replaces whole sentences of `base` by sentences of `other` with probability
// `fraction` each. Both corpora are cut into sentence_len pieces.
std::vector<TokenId> mix_corpora(std::span<const TokenId> base, std::span<const TokenId> other, double fraction,
                                 std::size_t sentence_len, std::uint64_t seed);

// Per-token occurrence counts in the two training corpora plus the frequency
// ratio threshold for shared tokens.
struct LangIdTable {
  TokenId source_lo = 0, source_hi = 0;
  TokenId target_lo = 0, target_hi = 0;
  std::vector<TokenId> shared_tokens;
  std::vector<std::uint64_t> source_counts;
  std::vector<std::uint64_t> target_counts;
  double threshold = 0.7;
};

LangIdTable build_langid_table(const LanguagePairSpec& spec, std::span<const TokenId> source_corpus,
                               std::span<const TokenId> target_corpus, std::size_t vocab_size,
                               double threshold = 0.7);

// Unseen tokens are `other`; non-shared tokens follow their script range;
// shared tokens go to the most frequent language, falling back to source when
// source_count / identified_count exceeds the threshold.
Language classify_token(TokenId token, const LangIdTable& table);

// Deterministic stream of batches of seq_len-token chunks. The corpus is cut
// into non-overlapping chunks, shuffled per epoch from the seed, and grouped
// into batches; leftover tokens and chunks are dropped.
class BatchIterator {
 public:
  BatchIterator(std::span<const TokenId> corpus, std::size_t batch_size, std::size_t seq_len, std::uint64_t seed,
                std::size_t max_seq_len);

  std::size_t batches_per_epoch() const { return n_chunks_ / batch_size_; }
  std::size_t epoch() const { return epoch_; }
  std::vector<std::vector<TokenId>> next();

 private:
  void shuffle();

  std::span<const TokenId> corpus_;
  std::size_t batch_size_;
  std::size_t seq_len_;
  std::uint64_t seed_;
  std::size_t n_chunks_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

// Throws InvalidArgument naming the first id >= vocab_size.
void validate_tokens(std::span<const TokenId> tokens, std::size_t vocab_size);

// One integer token per line.
void write_corpus(const std::filesystem::path& path, std::span<const TokenId> tokens);
std::vector<TokenId> read_corpus(const std::filesystem::path& path);

Json to_json(const SyntheticLanguageSpec& spec);
SyntheticLanguageSpec language_spec_from_json(const Json& j);

}  // namespace adaptlab
