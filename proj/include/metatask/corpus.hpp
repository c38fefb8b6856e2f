#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "metatask/error.hpp"

namespace metatask {

using TokenId = std::int32_t;
using SentId = std::int32_t;
using DocId = std::int32_t;

/// Reserved token ids. They occupy the first lexicon slots of every corpus.
inline constexpr TokenId kMaskId = 0;
inline constexpr TokenId kSepId = 1;
inline constexpr TokenId kUnkId = 2;
inline constexpr TokenId kFirstWordId = 3;
inline constexpr std::string_view kMaskText = "[MASK]";
inline constexpr std::string_view kSepText = "[SEP]";
inline constexpr std::string_view kUnkText = "[UNK]";

inline bool is_reserved(TokenId id) { return id >= 0 && id < kFirstWordId; }

/// Word <-> id bijection.
class Lexicon {
 public:
  Lexicon() {
    add(std::string(kMaskText));
    add(std::string(kSepText));
    add(std::string(kUnkText));
  }

  TokenId add(const std::string& word) {
    auto [it, inserted] = ids_.emplace(word, static_cast<TokenId>(words_.size()));
    if (inserted) words_.push_back(word);
    return it->second;
  }

  /// Id of `word`, or -1.
  TokenId find(std::string_view word) const {
    auto it = ids_.find(std::string(word));
    return it == ids_.end() ? -1 : it->second;
  }

  const std::string& word(TokenId id) const { return words_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  friend bool operator==(const Lexicon& a, const Lexicon& b) { return a.words_ == b.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

struct Sentence {
  DocId doc_id = 0;
  SentId sent_id = 0;
  std::vector<TokenId> tokens;

  friend bool operator==(const Sentence&, const Sentence&) = default;
};

/// A document owns the contiguous sentence range [first, first + count).
struct Document {
  DocId id = 0;
  SentId first = 0;
  SentId count = 0;

  friend bool operator==(const Document&, const Document&) = default;
};

struct Corpus {
  Lexicon lexicon;
  std::vector<Document> documents;
  std::vector<Sentence> sentences;

  const Sentence& sentence(SentId id) const { return sentences.at(static_cast<std::size_t>(id)); }
  std::span<const Sentence> sentences_of(const Document& d) const {
    return std::span<const Sentence>(sentences).subspan(static_cast<std::size_t>(d.first),
                                                         static_cast<std::size_t>(d.count));
  }
  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sentences) n += s.tokens.size();
    return n;
  }

  /// Order-sensitive hash of every token and boundary; identifies a corpus.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t v) {
      h ^= v;
      h *= 1099511628211ULL;
    };
    mix(lexicon.size());
    for (const auto& w : lexicon.words()) {
      for (unsigned char ch : w) mix(ch);
      mix(0xFF00);
    }
    for (const auto& d : documents) {
      mix(0xD0C0000000000000ULL | static_cast<std::uint64_t>(d.count));
    }
    for (const auto& s : sentences) {
      mix(s.tokens.size());
      for (TokenId t : s.tokens) mix(static_cast<std::uint64_t>(t));
    }
    return h;
  }

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

enum class DocMode { BlankLine, WholeStream };

struct IngestConfig {
  DocMode doc_mode = DocMode::BlankLine;
  bool lowercase = true;
  /// Treat a line break as a sentence boundary (one sentence per line files).
  bool newline_ends_sentence = false;
};

namespace detail {

struct CodePoint {
  char32_t value;
  std::size_t offset;
  std::size_t length;
};

/// Decodes one code point at `pos`; throws DecodeError on malformed input.
inline CodePoint decode_utf8(std::string_view s, std::size_t pos) {
  const auto b0 = static_cast<unsigned char>(s[pos]);
  if (b0 < 0x80) return {b0, pos, 1};
  std::size_t len;
  char32_t cp;
  if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    throw DecodeError(pos, "invalid leading byte");
  }
  if (pos + len > s.size()) throw DecodeError(pos, "truncated sequence");
  for (std::size_t i = 1; i < len; ++i) {
    const auto b = static_cast<unsigned char>(s[pos + i]);
    if ((b & 0xC0) != 0x80) throw DecodeError(pos + i, "invalid continuation byte");
    cp = (cp << 6) | (b & 0x3F);
  }
  static constexpr char32_t kMin[5] = {0, 0, 0x80, 0x800, 0x10000};
  if (cp < kMin[len]) throw DecodeError(pos, "overlong encoding");
  if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) throw DecodeError(pos, "invalid code point");
  return {cp, pos, len};
}

inline bool is_space(char32_t c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f' || c == 0x85 ||
         c == 0xA0 || c == 0x1680 || (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 ||
         c == 0x202F || c == 0x205F || c == 0x3000 || c == 0xFEFF;
}

inline bool is_punct(char32_t c) {
  if (c < 0x80) return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
                       (c >= 0x7B && c <= 0x7E);
  return (c >= 0xA1 && c <= 0xBF) || c == 0xD7 || c == 0xF7 || (c >= 0x2010 && c <= 0x2027) ||
         (c >= 0x2030 && c <= 0x205E) || (c >= 0x3001 && c <= 0x303F) || (c >= 0xFF01 && c <= 0xFF0F) ||
         (c >= 0xFF1A && c <= 0xFF20);
}

inline bool is_terminator(char32_t c) {
  return c == '.' || c == '!' || c == '?' || c == 0x3002 || c == 0xFF01 || c == 0xFF1F || c == 0x2026;
}

inline char32_t to_lower(char32_t c) {
  if (c >= 'A' && c <= 'Z') return c + 32;
  if (c >= 0xC0 && c <= 0xDE && c != 0xD7) return c + 32;
  return c;
}

inline void append_utf8(std::string& out, char32_t c) {
  if (c < 0x80) {
    out.push_back(static_cast<char>(c));
  } else if (c < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (c >> 6)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  } else if (c < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (c >> 12)));
    out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (c >> 18)));
    out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  }
}

}  // namespace detail

/// Splits a text into lowercase word tokens (no sentence or document structure).
inline std::vector<std::string> tokenize(std::string_view text, bool lowercase = true) {
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t pos = 0; pos < text.size();) {
    auto cp = detail::decode_utf8(text, pos);
    pos += cp.length;
    if (detail::is_space(cp.value) || detail::is_punct(cp.value)) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
      continue;
    }
    detail::append_utf8(cur, lowercase ? detail::to_lower(cp.value) : cp.value);
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Accumulates documents from one or more streams into a single corpus.
class CorpusBuilder {
 public:
  CorpusBuilder() = default;
  /// Continue numbering words from an existing lexicon (e.g. to share ids with a training corpus).
  /// With `frozen`, words outside that lexicon become UNK instead of new ids.
  explicit CorpusBuilder(Lexicon lexicon, bool frozen = false) : frozen_(frozen) { corpus_.lexicon = std::move(lexicon); }

  void add_text(std::string_view text, const IngestConfig& cfg) {
    std::vector<TokenId> sentence;
    std::string word;
    bool line_has_content = false;
    std::size_t newlines_in_gap = 0;

    auto flush_word = [&] {
      if (word.empty()) return;
      if (frozen_) {
        const TokenId id = corpus_.lexicon.find(word);
        sentence.push_back(id < 0 ? kUnkId : id);
      } else {
        sentence.push_back(corpus_.lexicon.add(word));
      }
      word.clear();
    };
    auto flush_sentence = [&] {
      flush_word();
      if (!sentence.empty()) {
        open_document();
        Sentence s;
        s.doc_id = static_cast<DocId>(corpus_.documents.size() - 1);
        s.sent_id = static_cast<SentId>(corpus_.sentences.size());
        s.tokens = std::move(sentence);
        corpus_.sentences.push_back(std::move(s));
        corpus_.documents.back().count += 1;
      }
      sentence.clear();
    };

    for (std::size_t pos = 0; pos < text.size();) {
      auto cp = detail::decode_utf8(text, pos);
      pos += cp.length;
      const char32_t c = cp.value;
      if (c == '\n') {
        if (!line_has_content) ++newlines_in_gap;
        line_has_content = false;
        if (cfg.newline_ends_sentence) flush_sentence();
        else flush_word();
        continue;
      }
      if (detail::is_space(c)) {
        flush_word();
        continue;
      }
      if (!line_has_content) {
        // First visible character of a line: a preceding blank line closes the document.
        if (cfg.doc_mode == DocMode::BlankLine && newlines_in_gap >= 1 && seen_line_) {
          flush_sentence();
          close_document();
        }
        line_has_content = true;
        seen_line_ = true;
        newlines_in_gap = 0;
      }
      if (detail::is_terminator(c)) {
        flush_sentence();
      } else if (detail::is_punct(c)) {
        flush_word();
      } else {
        detail::append_utf8(word, cfg.lowercase ? detail::to_lower(c) : c);
      }
    }
    flush_sentence();
    close_document();
    seen_line_ = false;
  }

  void add_stream(std::istream& in, const IngestConfig& cfg) {
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    add_text(text, cfg);
  }

  /// Hands over the corpus; throws EmptyCorpusError when nothing was ingested.
  Corpus finish() {
    if (corpus_.sentences.empty()) throw EmptyCorpusError();
    return std::move(corpus_);
  }

 private:
  void open_document() {
    if (doc_open_) return;
    Document d;
    d.id = static_cast<DocId>(corpus_.documents.size());
    d.first = static_cast<SentId>(corpus_.sentences.size());
    d.count = 0;
    corpus_.documents.push_back(d);
    doc_open_ = true;
  }
  void close_document() { doc_open_ = false; }

  Corpus corpus_;
  bool frozen_ = false;
  bool doc_open_ = false;
  bool seen_line_ = false;
};

inline Corpus ingest_corpus(std::istream& in, const IngestConfig& cfg = {}) {
  CorpusBuilder b;
  b.add_stream(in, cfg);
  return b.finish();
}

inline Corpus ingest_text(std::string_view text, const IngestConfig& cfg = {}) {
  CorpusBuilder b;
  b.add_text(text, cfg);
  return b.finish();
}

/// Plain-text export: one sentence per line ending in " .", blank line between documents.
/// Reserved ids are written as their bracketed literal.
inline void write_corpus_text(const Corpus& c, std::ostream& out) {
  for (std::size_t d = 0; d < c.documents.size(); ++d) {
    if (d) out << '\n';
    for (const auto& s : c.sentences_of(c.documents[d])) {
      for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        if (i) out << ' ';
        out << c.lexicon.word(s.tokens[i]);
      }
      out << " .\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Snapshot file.
//
//   metatask-corpus 1
//   lexicon <n>
//   <word>                      (n lines, id order, reserved first)
//   documents <d> sentences <s>
//   doc <count>                 (per document, followed by its sentences)
//   <ntok> <id> <id> ...
//   end
// ---------------------------------------------------------------------------

inline constexpr int kCorpusSnapshotVersion = 1;

inline void save_corpus(const Corpus& c, std::ostream& out) {
  out << "metatask-corpus " << kCorpusSnapshotVersion << '\n';
  out << "lexicon " << c.lexicon.size() << '\n';
  for (const auto& w : c.lexicon.words()) out << w << '\n';
  out << "documents " << c.documents.size() << " sentences " << c.sentences.size() << '\n';
  for (const auto& d : c.documents) {
    out << "doc " << d.count << '\n';
    for (const auto& s : c.sentences_of(d)) {
      out << s.tokens.size();
      for (TokenId t : s.tokens) out << ' ' << t;
      out << '\n';
    }
  }
  out << "end\n";
}

inline Corpus load_corpus(std::istream& in) {
  std::size_t line_no = 0;
  std::string line;
  auto next = [&]() -> std::string& {
    if (!std::getline(in, line)) throw FormatError(line_no + 1, "unexpected end of corpus snapshot");
    ++line_no;
    return line;
  };
  auto expect_header = [&](std::string_view key) {
    std::istringstream is(next());
    std::string k;
    std::size_t n = 0;
    if (!(is >> k >> n) || k != key) throw FormatError(line_no, "expected '" + std::string(key) + "'");
    return n;
  };
  {
    std::istringstream is(next());
    std::string magic;
    int version = 0;
    if (!(is >> magic >> version) || magic != "metatask-corpus") throw FormatError(line_no, "not a corpus snapshot");
    if (version != kCorpusSnapshotVersion) throw FormatError(line_no, "unsupported version " + std::to_string(version));
  }
  Corpus c;
  const std::size_t nwords = expect_header("lexicon");
  if (nwords < static_cast<std::size_t>(kFirstWordId)) throw FormatError(line_no, "lexicon lacks reserved ids");
  for (std::size_t i = 0; i < nwords; ++i) {
    const std::string& w = next();
    if (i < static_cast<std::size_t>(kFirstWordId)) {
      if (w != c.lexicon.word(static_cast<TokenId>(i))) throw FormatError(line_no, "reserved id mismatch");
      continue;
    }
    if (c.lexicon.add(w) != static_cast<TokenId>(i)) throw FormatError(line_no, "duplicate word '" + w + "'");
  }
  std::size_t ndocs = 0, nsent = 0;
  {
    std::istringstream is(next());
    std::string k1, k2;
    if (!(is >> k1 >> ndocs >> k2 >> nsent) || k1 != "documents" || k2 != "sentences")
      throw FormatError(line_no, "expected 'documents <d> sentences <s>'");
  }
  c.documents.reserve(ndocs);
  c.sentences.reserve(nsent);
  for (std::size_t d = 0; d < ndocs; ++d) {
    const std::size_t count = expect_header("doc");
    if (count == 0) throw FormatError(line_no, "empty document");
    Document doc{static_cast<DocId>(d), static_cast<SentId>(c.sentences.size()), static_cast<SentId>(count)};
    c.documents.push_back(doc);
    for (std::size_t k = 0; k < count; ++k) {
      std::istringstream is(next());
      std::size_t ntok = 0;
      if (!(is >> ntok) || ntok == 0) throw FormatError(line_no, "bad sentence length");
      Sentence s{doc.id, static_cast<SentId>(c.sentences.size()), {}};
      s.tokens.resize(ntok);
      for (auto& t : s.tokens) {
        if (!(is >> t) || t < 0 || static_cast<std::size_t>(t) >= nwords)
          throw FormatError(line_no, "bad token id");
      }
      c.sentences.push_back(std::move(s));
    }
  }
  if (c.sentences.size() != nsent) throw FormatError(line_no, "sentence count mismatch");
  if (next() != "end") throw FormatError(line_no, "expected 'end'");
  if (c.sentences.empty()) throw EmptyCorpusError();
  return c;
}

inline void save_corpus_file(const Corpus& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  save_corpus(c, out);
  if (!out) throw IoError("write failed: " + path);
}

inline Corpus load_corpus_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return load_corpus(in);
}

// ---------------------------------------------------------------------------
// Vocabulary statistics.
// ---------------------------------------------------------------------------

struct Vocabulary {
  Lexicon lexicon;
  std::vector<std::int64_t> freq;             ///< occurrences in the corpus
  std::vector<std::int32_t> sentence_count;   ///< distinct sentences containing the word
  std::vector<char> eligible;                 ///< usable as a masked-word label
  std::int32_t min_sentences = 1;
  std::uint64_t corpus_fingerprint = 0;

  std::size_t size() const { return lexicon.size(); }
  bool is_eligible(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < eligible.size() && eligible[static_cast<std::size_t>(id)];
  }
  std::vector<TokenId> eligible_words() const {
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < eligible.size(); ++i)
      if (eligible[i]) out.push_back(static_cast<TokenId>(i));
    return out;
  }
};

/// Counts frequencies; words seen in fewer than `min_sentences` sentences stay in the
/// id space but are not eligible as labels. Reserved ids are never eligible.
inline Vocabulary build_vocabulary(const Corpus& c, std::int32_t min_sentences) {
  if (min_sentences < 1) throw ArgumentError("min_sentences must be >= 1");
  Vocabulary v;
  v.lexicon = c.lexicon;
  v.min_sentences = min_sentences;
  v.corpus_fingerprint = c.fingerprint();
  const std::size_t n = c.lexicon.size();
  v.freq.assign(n, 0);
  v.sentence_count.assign(n, 0);
  v.eligible.assign(n, 0);
  std::vector<SentId> last_seen(n, -1);
  for (const auto& s : c.sentences) {
    for (TokenId t : s.tokens) {
      auto i = static_cast<std::size_t>(t);
      v.freq[i] += 1;
      if (last_seen[i] != s.sent_id) {
        last_seen[i] = s.sent_id;
        v.sentence_count[i] += 1;
      }
    }
  }
  for (std::size_t i = static_cast<std::size_t>(kFirstWordId); i < n; ++i)
    v.eligible[i] = v.sentence_count[i] >= min_sentences ? 1 : 0;
  return v;
}

/// Postings: word id -> sorted distinct sentence ids (CSR layout).
class InvertedIndex {
 public:
  std::span<const SentId> postings(TokenId w) const {
    auto i = static_cast<std::size_t>(w);
    if (w < 0 || i + 1 >= offsets_.size()) return {};
    return std::span<const SentId>(ids_).subspan(offsets_[i], offsets_[i + 1] - offsets_[i]);
  }
  std::size_t vocab_size() const { return offsets_.empty() ? 0 : offsets_.size() - 1; }
  std::size_t total_postings() const { return ids_.size(); }

  friend InvertedIndex build_index(const Corpus& c, const Vocabulary& v);

 private:
  std::vector<std::size_t> offsets_;
  std::vector<SentId> ids_;
};

inline InvertedIndex build_index(const Corpus& c, const Vocabulary& v) {
  if (v.size() != c.lexicon.size() || v.corpus_fingerprint != c.fingerprint())
    throw ConsistencyError("vocabulary was not built from this corpus");
  const std::size_t n = v.size();
  InvertedIndex idx;
  idx.offsets_.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) idx.offsets_[i + 1] = idx.offsets_[i] + static_cast<std::size_t>(v.sentence_count[i]);
  idx.ids_.resize(idx.offsets_[n]);
  std::vector<std::size_t> fill(idx.offsets_.begin(), idx.offsets_.end() - 1);
  std::vector<SentId> last_seen(n, -1);
  // Sentences are visited in id order, so every posting list comes out sorted.
  for (const auto& s : c.sentences) {
    for (TokenId t : s.tokens) {
      auto i = static_cast<std::size_t>(t);
      if (last_seen[i] == s.sent_id) continue;
      last_seen[i] = s.sent_id;
      idx.ids_[fill[i]++] = s.sent_id;
    }
  }
  return idx;
}

struct MaskedExample {
  std::vector<TokenId> tokens;
  SentId source_sent = 0;
  TokenId masked_word = 0;
};

/// Replaces every occurrence of `word` in the sentence by the mask id.
inline MaskedExample mask_sentence(const Sentence& s, TokenId word, const Vocabulary& v) {
  if (is_reserved(word) || static_cast<std::size_t>(word) >= v.size())
    throw PreconditionError("cannot mask reserved or unknown id " + std::to_string(word));
  MaskedExample m;
  m.source_sent = s.sent_id;
  m.masked_word = word;
  m.tokens = s.tokens;
  bool found = false;
  for (auto& t : m.tokens) {
    if (t == word) {
      t = kMaskId;
      found = true;
    }
  }
  if (!found)
    throw PreconditionError("word '" + v.lexicon.word(word) + "' does not occur in sentence " +
                            std::to_string(s.sent_id));
  return m;
}

}  // namespace metatask
