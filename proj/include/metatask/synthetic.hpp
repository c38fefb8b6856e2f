#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <string>
#include <vector>

#include "metatask/corpus.hpp"
#include "metatask/error.hpp"
#include "metatask/rng.hpp"

namespace metatask {

/// Planted-structure corpus generator.
///
/// Every topic owns `subtopics * subtopic_words` words, disjoint between topics.
/// A small shared "style" vocabulary is spread over all topics: each sentence
/// picks one style independently of its topic and draws most of its tokens
/// from that style's words. Topic and subtopic information therefore sits in a
/// minority of the tokens of every sentence.
struct SyntheticSpec {
  int topics = 10;
  int subtopics = 5;
  int subtopic_words = 60;
  double zipf = 0.0;           ///< rank exponent inside a subtopic (0: uniform)
  int styles = 5;
  int style_words = 3;
  int docs_per_topic = 250;
  int sentences_min = 16;
  int sentences_max = 24;
  int subtopic_tokens_min = 3;
  int subtopic_tokens_max = 5;
  int topic_tokens_min = 1;
  int topic_tokens_max = 2;
  int style_tokens_min = 16;
  int style_tokens_max = 24;
  double focus_prob = 0.6;     ///< chance a sentence uses its document's focus subtopic
  double cross_topic_rate = 0.0;  ///< chance per sentence of one extra word from another topic

  /// Throws SpecError listing the first problem found.
  void validate() const {
    auto need = [](bool ok, const char* msg) {
      if (!ok) throw SpecError(msg);
    };
    need(topics >= 2, "topics must be >= 2");
    need(subtopics >= 1 && subtopic_words >= 1, "subtopics and subtopic_words must be >= 1");
    need(styles >= 0 && style_words >= 0, "styles and style_words must be >= 0");
    need(docs_per_topic >= 1, "docs_per_topic must be >= 1");
    need(sentences_min >= 1 && sentences_max >= sentences_min, "bad sentences_min/max");
    need(subtopic_tokens_min >= 0 && subtopic_tokens_max >= subtopic_tokens_min, "bad subtopic_tokens range");
    need(topic_tokens_min >= 0 && topic_tokens_max >= topic_tokens_min, "bad topic_tokens range");
    need(style_tokens_min >= 0 && style_tokens_max >= style_tokens_min, "bad style_tokens range");
    need(subtopic_tokens_min + topic_tokens_min >= 1, "sentences need at least one topic token");
    need(styles > 0 && style_words > 0 ? true : style_tokens_max == 0, "style tokens requested without styles");
    need(focus_prob >= 0 && focus_prob <= 1, "focus_prob must lie in [0,1]");
    need(cross_topic_rate >= 0 && cross_topic_rate <= 1, "cross_topic_rate must lie in [0,1]");
    need(zipf >= 0 && std::isfinite(zipf), "zipf must be finite and >= 0");
  }

  int words_per_topic() const { return subtopics * subtopic_words; }

  /// "key = value" lines; '#' starts a comment. Unknown keys are errors.
  static SyntheticSpec parse(std::istream& in) {
    SyntheticSpec s;
    std::map<std::string, int*> ints = {
        {"topics", &s.topics},
        {"subtopics", &s.subtopics},
        {"subtopic_words", &s.subtopic_words},
        {"styles", &s.styles},
        {"style_words", &s.style_words},
        {"docs_per_topic", &s.docs_per_topic},
        {"sentences_min", &s.sentences_min},
        {"sentences_max", &s.sentences_max},
        {"subtopic_tokens_min", &s.subtopic_tokens_min},
        {"subtopic_tokens_max", &s.subtopic_tokens_max},
        {"topic_tokens_min", &s.topic_tokens_min},
        {"topic_tokens_max", &s.topic_tokens_max},
        {"style_tokens_min", &s.style_tokens_min},
        {"style_tokens_max", &s.style_tokens_max},
    };
    std::map<std::string, double*> reals = {
        {"zipf", &s.zipf}, {"focus_prob", &s.focus_prob}, {"cross_topic_rate", &s.cross_topic_rate}};
    std::string line;
    std::size_t line_no = 0;
    auto trim = [](std::string x) {
      auto b = x.find_first_not_of(" \t\r");
      auto e = x.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : x.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
      ++line_no;
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      line = trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError(line_no, "expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string val = trim(line.substr(eq + 1));
      if (auto it = ints.find(key); it != ints.end()) {
        int v = 0;
        auto [p, ec] = std::from_chars(val.data(), val.data() + val.size(), v);
        if (ec != std::errc() || p != val.data() + val.size()) throw FormatError(line_no, "bad integer for " + key);
        *it->second = v;
      } else if (auto jt = reals.find(key); jt != reals.end()) {
        try {
          std::size_t used = 0;
          *jt->second = std::stod(val, &used);
          if (used != val.size()) throw std::invalid_argument(val);
        } catch (const std::exception&) {
          throw FormatError(line_no, "bad number for " + key);
        }
      } else {
        throw FormatError(line_no, "unknown key '" + key + "'");
      }
    }
    s.validate();
    return s;
  }

  static SyntheticSpec parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    return parse(in);
  }
};

/// Ground truth kept by the generator (tests only; the learner never sees it).
struct SyntheticLedger {
  std::vector<int> doc_topic;          ///< per document
  std::vector<int> doc_focus;          ///< focus subtopic per document
  std::vector<int> sentence_style;     ///< per sentence
  std::vector<int> sentence_topic;     ///< per sentence
  std::vector<int> word_topic;         ///< per token id; -1 for style and reserved ids
  std::vector<int> word_subtopic;      ///< per token id; -1 outside topics
  std::vector<int> word_style;         ///< per token id; -1 outside styles
  std::size_t sentences_emitted = 0;
  std::size_t tokens_emitted = 0;
};

struct SyntheticCorpus {
  Corpus corpus;
  SyntheticLedger ledger;
};

/// Lexicon shared by every corpus generated from the same spec (seed independent).
inline Lexicon synthetic_lexicon(const SyntheticSpec& spec) {
  Lexicon lex;
  for (int t = 0; t < spec.topics; ++t)
    for (int p = 0; p < spec.subtopics; ++p)
      for (int j = 0; j < spec.subtopic_words; ++j)
        lex.add("t" + std::to_string(t) + "p" + std::to_string(p) + "w" + std::to_string(j));
  for (int s = 0; s < spec.styles; ++s)
    for (int j = 0; j < spec.style_words; ++j) lex.add("s" + std::to_string(s) + "w" + std::to_string(j));
  return lex;
}

inline SyntheticCorpus gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  SyntheticCorpus out;
  Corpus& c = out.corpus;
  SyntheticLedger& led = out.ledger;
  c.lexicon = synthetic_lexicon(spec);

  const int wpt = spec.words_per_topic();
  const TokenId style_base = kFirstWordId + spec.topics * wpt;
  auto topic_word = [&](int t, int p, int j) { return static_cast<TokenId>(kFirstWordId + t * wpt + p * spec.subtopic_words + j); };

  const std::size_t nwords = c.lexicon.size();
  led.word_topic.assign(nwords, -1);
  led.word_subtopic.assign(nwords, -1);
  led.word_style.assign(nwords, -1);
  for (int t = 0; t < spec.topics; ++t)
    for (int p = 0; p < spec.subtopics; ++p)
      for (int j = 0; j < spec.subtopic_words; ++j) {
        auto id = static_cast<std::size_t>(topic_word(t, p, j));
        led.word_topic[id] = t;
        led.word_subtopic[id] = p;
      }
  for (int s = 0; s < spec.styles; ++s)
    for (int j = 0; j < spec.style_words; ++j)
      led.word_style[static_cast<std::size_t>(style_base + s * spec.style_words + j)] = s;

  std::vector<double> zipf_w(static_cast<std::size_t>(spec.subtopic_words));
  for (int j = 0; j < spec.subtopic_words; ++j) zipf_w[static_cast<std::size_t>(j)] = 1.0 / std::pow(j + 1.0, spec.zipf);

  Rng rng = Rng::stream(seed, "synthetic");
  auto between = [&rng](int lo, int hi) { return lo + static_cast<int>(rng.index(static_cast<std::size_t>(hi - lo + 1))); };

  const int ndocs = spec.topics * spec.docs_per_topic;
  for (int d = 0; d < ndocs; ++d) {
    const int topic = d % spec.topics;
    const int focus = static_cast<int>(rng.index(static_cast<std::size_t>(spec.subtopics)));
    Document doc{static_cast<DocId>(d), static_cast<SentId>(c.sentences.size()), 0};
    const int nsent = between(spec.sentences_min, spec.sentences_max);
    for (int k = 0; k < nsent; ++k) {
      Sentence s{doc.id, static_cast<SentId>(c.sentences.size()), {}};
      const int sub = rng.bernoulli(spec.focus_prob) ? focus
                                                      : static_cast<int>(rng.index(static_cast<std::size_t>(spec.subtopics)));
      const int n_sub = between(spec.subtopic_tokens_min, spec.subtopic_tokens_max);
      const int n_top = between(spec.topic_tokens_min, spec.topic_tokens_max);
      for (int i = 0; i < n_sub; ++i)
        s.tokens.push_back(topic_word(topic, sub, static_cast<int>(rng.weighted_index(zipf_w))));
      for (int i = 0; i < n_top; ++i) {
        const auto r = static_cast<int>(rng.index(static_cast<std::size_t>(wpt)));
        s.tokens.push_back(static_cast<TokenId>(kFirstWordId + topic * wpt + r));
      }
      if (spec.cross_topic_rate > 0 && rng.bernoulli(spec.cross_topic_rate)) {
        int other = static_cast<int>(rng.index(static_cast<std::size_t>(spec.topics - 1)));
        if (other >= topic) ++other;
        const auto r = static_cast<int>(rng.index(static_cast<std::size_t>(wpt)));
        s.tokens.push_back(static_cast<TokenId>(kFirstWordId + other * wpt + r));
      }
      int style = -1;
      if (spec.styles > 0) {
        style = static_cast<int>(rng.index(static_cast<std::size_t>(spec.styles)));
        const int n_sty = between(spec.style_tokens_min, spec.style_tokens_max);
        for (int i = 0; i < n_sty; ++i)
          s.tokens.push_back(style_base + style * spec.style_words +
                             static_cast<TokenId>(rng.index(static_cast<std::size_t>(spec.style_words))));
      }
      rng.shuffle(s.tokens);
      led.sentence_style.push_back(style);
      led.sentence_topic.push_back(topic);
      led.tokens_emitted += s.tokens.size();
      c.sentences.push_back(std::move(s));
      doc.count += 1;
    }
    c.documents.push_back(doc);
    led.doc_topic.push_back(topic);
    led.doc_focus.push_back(focus);
  }
  led.sentences_emitted = c.sentences.size();
  return out;
}

}  // namespace metatask
