#pragma once

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>

#include "metatask/embeddings.hpp"
#include "metatask/synthetic.hpp"
#include "metatask/taskgen.hpp"

namespace testutil {

using namespace metatask;

inline SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.topics = 4;
  s.subtopics = 2;
  s.subtopic_words = 10;
  s.styles = 2;
  s.style_words = 3;
  s.docs_per_topic = 30;
  s.style_tokens_min = 4;
  s.style_tokens_max = 6;
  return s;
}

/// Shared small synthetic corpus (about 2400 sentences) and its context.
inline const SyntheticCorpus& small_corpus() {
  static const SyntheticCorpus sc = gen_synthetic(small_spec(), 11);
  return sc;
}

inline std::shared_ptr<const TaskContext> small_context() {
  static const auto ctx = make_context(small_corpus().corpus, 45);
  return ctx;
}

/// Word clustering that follows the planted topics exactly.
inline std::shared_ptr<const Clustering> topic_word_clusters(const SyntheticCorpus& sc, const Vocabulary& v) {
  auto c = std::make_shared<Clustering>();
  int topics = 0;
  for (int t : sc.ledger.word_topic) topics = std::max(topics, t + 1);
  c->k = topics;
  for (std::size_t w = 0; w < sc.ledger.word_topic.size(); ++w) {
    if (sc.ledger.word_topic[w] < 0 || !v.is_eligible(static_cast<TokenId>(w))) continue;
    c->items.push_back(static_cast<std::int32_t>(w));
    c->assignment.push_back(sc.ledger.word_topic[w]);
  }
  c->centroids = Matrix::Zero(topics, 1);
  c->rebuild_members();
  return c;
}

/// Sentence clustering by planted topic.
inline std::shared_ptr<const Clustering> topic_sentence_clusters(const SyntheticCorpus& sc) {
  auto c = std::make_shared<Clustering>();
  int topics = 0;
  for (int t : sc.ledger.sentence_topic) topics = std::max(topics, t + 1);
  c->k = topics;
  for (std::size_t s = 0; s < sc.ledger.sentence_topic.size(); ++s) {
    c->items.push_back(static_cast<std::int32_t>(s));
    c->assignment.push_back(sc.ledger.sentence_topic[s]);
  }
  c->centroids = Matrix::Zero(topics, 1);
  c->rebuild_members();
  return c;
}

/// Sentence clustering by (topic, style): eight clusters on the small corpus.
inline std::shared_ptr<const Clustering> topic_style_sentence_clusters(const SyntheticCorpus& sc) {
  auto c = std::make_shared<Clustering>();
  int topics = 0, styles = 0;
  for (int t : sc.ledger.sentence_topic) topics = std::max(topics, t + 1);
  for (int s : sc.ledger.sentence_style) styles = std::max(styles, s + 1);
  c->k = topics * styles;
  for (std::size_t s = 0; s < sc.ledger.sentence_topic.size(); ++s) {
    c->items.push_back(static_cast<std::int32_t>(s));
    c->assignment.push_back(sc.ledger.sentence_topic[s] * styles + sc.ledger.sentence_style[s]);
  }
  c->centroids = Matrix::Zero(c->k, 1);
  c->rebuild_members();
  return c;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("metatask-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace testutil
