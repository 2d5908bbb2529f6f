#include "adaptlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "adaptlab/error.hpp"

namespace adaptlab {

std::string to_string(Language lang) {
  switch (lang) {
    case Language::source: return "source";
    case Language::target: return "target";
    case Language::other: return "other";
  }
  return "other";
}

std::string to_string(PartOfSpeech pos) {
  switch (pos) {
    case PartOfSpeech::adp: return "ADP";
    case PartOfSpeech::det: return "DET";
    case PartOfSpeech::noun: return "NOUN";
    case PartOfSpeech::verb: return "VERB";
  }
  return "ADP";
}

std::string to_string(GrammaticalNumber number) { return number == GrammaticalNumber::sing ? "sing" : "plur"; }
std::string to_string(Tense tense) { return tense == Tense::pres ? "pres" : "past"; }

std::optional<std::size_t> SyntheticLanguageSpec::word_of(TokenId t) const {
  auto it = std::find(words.begin(), words.end(), t);
  if (it == words.end()) return std::nullopt;
  return static_cast<std::size_t>(it - words.begin());
}

namespace {

// Word classes, in word-index order.
enum WordClass { det_s, det_p, adp, noun_s, noun_p, verb_pres_s, verb_pres_p, verb_past_s, verb_past_p, n_classes };

struct ClassLayout {
  std::size_t begin[n_classes];
  std::size_t end[n_classes];
};

ClassLayout layout_for(std::size_t words) {
  const std::size_t u = words / 12;
  const std::size_t sizes[n_classes] = {u / 2, u / 2, u, 3 * u, 3 * u, u, u, u, u};
  ClassLayout l{};
  std::size_t at = 0;
  for (int c = 0; c < n_classes; ++c) {
    l.begin[c] = at;
    at += sizes[c];
    l.end[c] = at;
  }
  return l;
}

struct Edge {
  WordClass to;
  double p;
};

std::vector<Edge> class_edges(WordClass c) {
  switch (c) {
    case det_s: return {{noun_s, 1.0}};
    case det_p: return {{noun_p, 1.0}};
    case noun_s: return {{verb_pres_s, 0.35}, {verb_past_s, 0.35}, {adp, 0.3}};
    case noun_p: return {{verb_pres_p, 0.35}, {verb_past_p, 0.35}, {adp, 0.3}};
    case adp: return {{det_s, 0.5}, {det_p, 0.5}};
    default: return {{det_s, 0.4}, {det_p, 0.4}, {adp, 0.2}};
  }
}

TokenProperties properties_of(WordClass c) {
  TokenProperties p;
  switch (c) {
    case det_s: p = {PartOfSpeech::det, GrammaticalNumber::sing, std::nullopt}; break;
    case det_p: p = {PartOfSpeech::det, GrammaticalNumber::plur, std::nullopt}; break;
    case adp: p = {PartOfSpeech::adp, std::nullopt, std::nullopt}; break;
    case noun_s: p = {PartOfSpeech::noun, GrammaticalNumber::sing, std::nullopt}; break;
    case noun_p: p = {PartOfSpeech::noun, GrammaticalNumber::plur, std::nullopt}; break;
    case verb_pres_s: p = {PartOfSpeech::verb, GrammaticalNumber::sing, Tense::pres}; break;
    case verb_pres_p: p = {PartOfSpeech::verb, GrammaticalNumber::plur, Tense::pres}; break;
    case verb_past_s: p = {PartOfSpeech::verb, GrammaticalNumber::sing, Tense::past}; break;
    case verb_past_p: p = {PartOfSpeech::verb, GrammaticalNumber::plur, Tense::past}; break;
    default: break;
  }
  return p;
}

WordClass class_of(const ClassLayout& l, std::size_t w) {
  for (int c = 0; c < n_classes; ++c)
    if (w >= l.begin[c] && w < l.end[c]) return static_cast<WordClass>(c);
  return n_classes;
}

Tensor2D random_transitions(const ClassLayout& l, std::size_t words, double spread, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor2D t(words, words);
  for (std::size_t i = 0; i < words; ++i) {
    for (const Edge& e : class_edges(class_of(l, i))) {
      double total = 0.0;
      std::vector<double> w(l.end[e.to] - l.begin[e.to]);
      for (double& x : w) {
        x = std::exp(spread * normal(rng));
        total += x;
      }
      for (std::size_t k = 0; k < w.size(); ++k) t(i, l.begin[e.to] + k) = e.p * w[k] / total;
    }
  }
  return t;
}

}  // namespace

LanguagePairSpec make_language_pair(const LanguagePairOptions& o) {
  const std::size_t words = o.words_per_language;
  if (words == 0 || words % 24 != 0) {
    throw InvalidArgument("words_per_language must be a positive multiple of 24, got " + std::to_string(words));
  }
  if (2 * words > o.vocab_size) {
    throw InvalidArgument("vocabulary overflow: two languages of " + std::to_string(words) +
                          " words need " + std::to_string(2 * words) + " ids, vocab_size is " +
                          std::to_string(o.vocab_size));
  }
  if (!(o.overlap_fraction >= 0.0 && o.overlap_fraction < 1.0)) {
    throw InvalidArgument("overlap_fraction must be in [0, 1)");
  }
  if (!(o.grammar_perturbation >= 0.0 && o.grammar_perturbation <= 1.0)) {
    throw InvalidArgument("grammar_perturbation must be in [0, 1]");
  }

  std::mt19937_64 rng(o.seed);
  const ClassLayout layout = layout_for(words);
  LanguagePairSpec pair;

  SyntheticLanguageSpec& src = pair.source;
  src.name = "source";
  src.range_lo = 0;
  src.range_hi = static_cast<TokenId>(words);
  src.words.resize(words);
  std::iota(src.words.begin(), src.words.end(), TokenId{0});
  src.transitions = random_transitions(layout, words, o.transition_spread, rng);
  src.initial.assign(words, 0.0);
  const std::size_t n_det = layout.end[det_p] - layout.begin[det_s];
  for (std::size_t w = layout.begin[det_s]; w < layout.end[det_p]; ++w) src.initial[w] = 1.0 / n_det;

  SyntheticLanguageSpec& tgt = pair.target;
  tgt.name = "target";
  tgt.range_lo = static_cast<TokenId>(words);
  tgt.range_hi = static_cast<TokenId>(2 * words);
  std::vector<TokenId> perm(words);
  std::iota(perm.begin(), perm.end(), TokenId{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  tgt.words.resize(words);
  for (std::size_t w = 0; w < words; ++w) tgt.words[w] = tgt.range_lo + perm[w];

  std::vector<std::size_t> order(words);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_shared = static_cast<std::size_t>(std::llround(o.overlap_fraction * static_cast<double>(words)));
  for (std::size_t i = 0; i < n_shared; ++i) {
    const std::size_t w = order[i];
    tgt.words[w] = src.words[w];
    tgt.shared_tokens.push_back(src.words[w]);
  }
  std::sort(tgt.shared_tokens.begin(), tgt.shared_tokens.end());
  src.shared_tokens = tgt.shared_tokens;

  tgt.transitions = src.transitions;
  if (o.grammar_perturbation > 0.0) {
    Tensor2D noise = random_transitions(layout, words, o.transition_spread, rng);
    auto t = tgt.transitions.values();
    auto n = noise.values();
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (1.0 - o.grammar_perturbation) * t[i] + o.grammar_perturbation * n[i];
  }
  tgt.initial = src.initial;

  for (std::size_t w = 0; w < words; ++w) {
    const TokenProperties p = properties_of(class_of(layout, w));
    src.property_labels[src.words[w]] = p;
    tgt.property_labels[tgt.words[w]] = p;
  }
  return pair;
}

std::vector<TokenId> sample_corpus(const SyntheticLanguageSpec& spec, std::size_t n_sentences,
                                   std::size_t sentence_len, std::uint64_t seed) {
  const std::size_t words = spec.words.size();
  if (words == 0 || spec.transitions.rows() != words || spec.initial.size() != words) {
    throw InvalidArgument("sample_corpus: malformed language spec '" + spec.name + "'");
  }
  std::vector<std::vector<double>> cumulative(words + 1);
  auto build = [](std::span<const double> p) {
    std::vector<double> c(p.size());
    std::partial_sum(p.begin(), p.end(), c.begin());
    return c;
  };
  for (std::size_t w = 0; w < words; ++w) cumulative[w] = build(spec.transitions.row(w));
  cumulative[words] = build(spec.initial);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  auto draw = [&](const std::vector<double>& c) {
    const double u = uniform(rng) * c.back();
    auto it = std::upper_bound(c.begin(), c.end(), u);
    if (it == c.end()) --it;
    return static_cast<std::size_t>(it - c.begin());
  };

  std::vector<TokenId> out;
  out.reserve(n_sentences * sentence_len);
  for (std::size_t s = 0; s < n_sentences; ++s) {
    std::size_t w = draw(cumulative[words]);
    for (std::size_t i = 0; i < sentence_len; ++i) {
      if (i > 0) w = draw(cumulative[w]);
      out.push_back(spec.words[w]);
    }
  }
  return out;
}

LanguagePair generate_language_pair(const LanguagePairOptions& options, std::size_t n_sentences,
                                    std::size_t sentence_len) {
  LanguagePair pair;
  pair.spec = make_language_pair(options);
  std::seed_seq seq{options.seed, std::uint64_t{1}};
  std::mt19937_64 split(seq);
  const std::uint64_t source_seed = split();
  const std::uint64_t target_seed = split();
  pair.source = sample_corpus(pair.spec.source, n_sentences, sentence_len, source_seed);
  pair.target = sample_corpus(pair.spec.target, n_sentences, sentence_len, target_seed);
  return pair;
}

std::vector<TokenId> mix_corpora(std::span<const TokenId> base, std::span<const TokenId> other, double fraction,
                                 std::size_t sentence_len, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidArgument("mix fraction must be in [0, 1]");
  if (sentence_len == 0) throw InvalidArgument("mix_corpora: sentence_len must be positive");
  std::vector<TokenId> out(base.begin(), base.end());
  const std::size_t other_sentences = other.size() / sentence_len;
  if (fraction == 0.0 || other_sentences == 0) return out;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution take(fraction);
  std::size_t next_other = 0;
  for (std::size_t s = 0; s + sentence_len <= out.size(); s += sentence_len) {
    if (!take(rng)) continue;
    const std::size_t from = (next_other++ % other_sentences) * sentence_len;
    std::copy_n(other.begin() + static_cast<std::ptrdiff_t>(from), sentence_len,
                out.begin() + static_cast<std::ptrdiff_t>(s));
  }
  return out;
}

LangIdTable build_langid_table(const LanguagePairSpec& spec, std::span<const TokenId> source_corpus,
                               std::span<const TokenId> target_corpus, std::size_t vocab_size, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw InvalidArgument("language-id threshold must be in (0, 1]");
  LangIdTable t;
  t.source_lo = spec.source.range_lo;
  t.source_hi = spec.source.range_hi;
  t.target_lo = spec.target.range_lo;
  t.target_hi = spec.target.range_hi;
  t.shared_tokens = spec.target.shared_tokens;
  t.threshold = threshold;
  t.source_counts.assign(vocab_size, 0);
  t.target_counts.assign(vocab_size, 0);
  validate_tokens(source_corpus, vocab_size);
  validate_tokens(target_corpus, vocab_size);
  for (TokenId id : source_corpus) ++t.source_counts[id];
  for (TokenId id : target_corpus) ++t.target_counts[id];
  return t;
}

Language classify_token(TokenId token, const LangIdTable& table) {
  if (token >= table.source_counts.size()) return Language::other;
  const std::uint64_t src = table.source_counts[token];
  const std::uint64_t tgt = table.target_counts[token];
  if (src == 0 && tgt == 0) return Language::other;
  const bool shared = std::binary_search(table.shared_tokens.begin(), table.shared_tokens.end(), token);
  if (!shared) {
    const bool in_src = token >= table.source_lo && token < table.source_hi;
    const bool in_tgt = token >= table.target_lo && token < table.target_hi;
    if (in_src && !in_tgt) return Language::source;
    if (in_tgt && !in_src) return Language::target;
    return Language::other;
  }
  if (tgt <= src) return Language::source;
  const double ratio = static_cast<double>(src) / static_cast<double>(tgt);
  return ratio <= table.threshold ? Language::target : Language::source;
}

BatchIterator::BatchIterator(std::span<const TokenId> corpus, std::size_t batch_size, std::size_t seq_len,
                             std::uint64_t seed, std::size_t max_seq_len)
    : corpus_(corpus), batch_size_(batch_size), seq_len_(seq_len), seed_(seed) {
  if (corpus.empty()) throw InvalidArgument("batch_iterator: empty corpus");
  if (batch_size == 0 || seq_len < 2) throw InvalidArgument("batch_iterator: need batch_size >= 1 and seq_len >= 2");
  if (seq_len > max_seq_len) {
    throw InvalidArgument("batch_iterator: seq_len " + std::to_string(seq_len) + " exceeds max_seq_len " +
                          std::to_string(max_seq_len));
  }
  n_chunks_ = corpus.size() / seq_len;
  if (n_chunks_ < batch_size) {
    throw InvalidArgument("batch_iterator: corpus of " + std::to_string(corpus.size()) +
                          " tokens holds no full batch of " + std::to_string(batch_size) + "x" +
                          std::to_string(seq_len));
  }
  order_.resize(n_chunks_);
  shuffle();
}

void BatchIterator::shuffle() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::seed_seq seq{seed_, static_cast<std::uint64_t>(epoch_)};
  std::mt19937_64 rng(seq);
  std::shuffle(order_.begin(), order_.end(), rng);
  cursor_ = 0;
}

std::vector<std::vector<TokenId>> BatchIterator::next() {
  if (cursor_ + batch_size_ > n_chunks_) {
    ++epoch_;
    shuffle();
  }
  std::vector<std::vector<TokenId>> batch;
  batch.reserve(batch_size_);
  for (std::size_t b = 0; b < batch_size_; ++b) {
    const std::size_t start = order_[cursor_++] * seq_len_;
    batch.emplace_back(corpus_.begin() + static_cast<std::ptrdiff_t>(start),
                       corpus_.begin() + static_cast<std::ptrdiff_t>(start + seq_len_));
  }
  return batch;
}

void validate_tokens(std::span<const TokenId> tokens, std::size_t vocab_size) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= vocab_size) {
      throw InvalidArgument("token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                            " is outside vocab of size " + std::to_string(vocab_size));
    }
  }
}

void write_corpus(const std::filesystem::path& path, std::span<const TokenId> tokens) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (TokenId t : tokens) out << t << '\n';
}

std::vector<TokenId> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("corpus not found: " + path.string());
  std::vector<TokenId> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(line, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != line.size()) {
      throw InvalidArgument(path.string() + ":" + std::to_string(lineno) + ": not a token id: '" + line + "'");
    }
    out.push_back(static_cast<TokenId>(v));
  }
  return out;
}

Json to_json(const SyntheticLanguageSpec& spec) {
  Json labels = Json::array();
  for (const auto& [token, p] : spec.property_labels) {
    Json entry{{"token", token}, {"pos", to_string(p.pos)}};
    if (p.number) entry["number"] = to_string(*p.number);
    if (p.tense) entry["tense"] = to_string(*p.tense);
    labels.push_back(std::move(entry));
  }
  Json rows = Json::array();
  for (std::size_t r = 0; r < spec.transitions.rows(); ++r) {
    auto row = spec.transitions.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return Json{{"name", spec.name},
              {"script_range", {spec.range_lo, spec.range_hi}},
              {"words", spec.words},
              {"initial", spec.initial},
              {"transitions", std::move(rows)},
              {"shared_tokens", spec.shared_tokens},
              {"property_labels", std::move(labels)}};
}

SyntheticLanguageSpec language_spec_from_json(const Json& j) {
  SyntheticLanguageSpec s;
  s.name = j.at("name").get<std::string>();
  s.range_lo = j.at("script_range").at(0).get<TokenId>();
  s.range_hi = j.at("script_range").at(1).get<TokenId>();
  s.words = j.at("words").get<std::vector<TokenId>>();
  s.initial = j.at("initial").get<std::vector<double>>();
  const auto& rows = j.at("transitions");
  s.transitions = Tensor2D(rows.size(), rows.empty() ? 0 : rows.at(0).size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto row = rows.at(r).get<std::vector<double>>();
    if (row.size() != s.transitions.cols()) throw InvalidArgument("language spec: ragged transition table");
    std::copy(row.begin(), row.end(), s.transitions.row(r).begin());
  }
  s.shared_tokens = j.at("shared_tokens").get<std::vector<TokenId>>();
  for (const auto& entry : j.at("property_labels")) {
    TokenProperties p;
    const std::string pos = entry.at("pos").get<std::string>();
    if (pos == "DET") p.pos = PartOfSpeech::det;
    else if (pos == "NOUN") p.pos = PartOfSpeech::noun;
    else if (pos == "VERB") p.pos = PartOfSpeech::verb;
    else if (pos == "ADP") p.pos = PartOfSpeech::adp;
    else throw InvalidArgument("language spec: unknown pos '" + pos + "'");
    if (entry.contains("number")) {
      p.number = entry.at("number").get<std::string>() == "sing" ? GrammaticalNumber::sing : GrammaticalNumber::plur;
    }
    if (entry.contains("tense")) p.tense = entry.at("tense").get<std::string>() == "pres" ? Tense::pres : Tense::past;
    s.property_labels[entry.at("token").get<TokenId>()] = p;
  }
  return s;
}

}  // namespace adaptlab
