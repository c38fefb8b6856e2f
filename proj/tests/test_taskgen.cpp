#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "common.hpp"
#include "metatask/embeddings.hpp"
#include "metatask/stats.hpp"
#include "metatask/taskgen.hpp"

using namespace metatask;

namespace {

/// Vocabulary of `freqs.size()` eligible words w0.. with the given frequencies.
Vocabulary make_vocab(const std::vector<std::int64_t>& freqs) {
  Vocabulary v;
  for (std::size_t i = 0; i < freqs.size(); ++i) v.lexicon.add("w" + std::to_string(i));
  v.freq.assign(v.lexicon.size(), 0);
  v.sentence_count.assign(v.lexicon.size(), 0);
  v.eligible.assign(v.lexicon.size(), 0);
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    const auto id = static_cast<std::size_t>(kFirstWordId) + i;
    v.freq[id] = freqs[i];
    v.sentence_count[id] = static_cast<std::int32_t>(freqs[i]);
    v.eligible[id] = 1;
  }
  return v;
}

TokenId wid(int i) { return static_cast<TokenId>(kFirstWordId + i); }

/// Clustering of word ids by explicit cluster sizes, in id order.
Clustering make_clusters(const std::vector<int>& sizes) {
  Clustering c;
  c.k = static_cast<int>(sizes.size());
  int w = 0;
  for (int k = 0; k < c.k; ++k)
    for (int j = 0; j < sizes[static_cast<std::size_t>(k)]; ++j) {
      c.items.push_back(wid(w++));
      c.assignment.push_back(k);
    }
  c.centroids = Matrix::Zero(c.k, 1);
  c.rebuild_members();
  return c;
}

double chi_p(const std::vector<std::int64_t>& obs, const std::vector<double>& p) { return stats::chi_square_gof(obs, p).p_value; }

PresetInputs small_inputs(double sentpair_prob = 1.0 / 16) {
  PresetInputs in;
  in.ctx = testutil::small_context();
  in.word_clusters = testutil::topic_word_clusters(testutil::small_corpus(), in.ctx->vocab);
  in.sent_clusters = testutil::topic_style_sentence_clusters(testutil::small_corpus());
  in.sentpair_prob = sentpair_prob;
  return in;
}

}  // namespace

TEST(UniformLabels, ExactVocabularyReturnsEverything) {
  Vocabulary v = make_vocab({5, 5, 5, 5});
  Rng rng(1);
  auto w = UniformLabels(v).draw(4, rng);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(w, (std::vector<TokenId>{wid(0), wid(1), wid(2), wid(3)}));
  EXPECT_THROW(UniformLabels(v).draw(5, rng), ExhaustionError);
}

TEST(UniformLabels, MarginalsAreUniform) {
  Vocabulary v = make_vocab(std::vector<std::int64_t>(10, 3));
  UniformLabels s(v);
  Rng rng(2);
  std::vector<std::int64_t> count(10, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    auto w = s.draw(2, rng);
    ASSERT_NE(w[0], w[1]);
    for (TokenId t : w) count[static_cast<std::size_t>(t - kFirstWordId)] += 1;
  }
  for (auto c : count) EXPECT_NEAR(static_cast<double>(c) / draws, 0.2, 0.01);
  EXPECT_GT(chi_p(count, std::vector<double>(10, 0.1)), 0.01);
}

TEST(LogFrequencyLabels, OddsFollowLogWeights) {
  // log(1 + 1) : log(1 + 7) = 1 : 3
  Vocabulary v = make_vocab({1, 7});
  LogFrequencyLabels s(v);
  EXPECT_NEAR(s.weights()[1] / s.weights()[0], 3.0, 1e-12);
  Rng rng(3);
  std::vector<std::int64_t> first(2, 0);
  for (int i = 0; i < 40000; ++i) first[static_cast<std::size_t>(s.draw(1, rng)[0] - kFirstWordId)] += 1;
  EXPECT_GT(chi_p(first, {0.25, 0.75}), 0.01);
}

TEST(LogFrequencyLabels, FirstDrawMarginalsOnTwentyWords) {
  std::vector<std::int64_t> freqs;
  for (int i = 0; i < 20; ++i) freqs.push_back(1 + i * i * 7);
  Vocabulary v = make_vocab(freqs);
  LogFrequencyLabels s(v);
  Rng rng(4);
  std::vector<std::int64_t> first(20, 0);
  for (int i = 0; i < 100000; ++i) {
    auto w = s.draw(3, rng);
    ASSERT_EQ(std::set<TokenId>(w.begin(), w.end()).size(), 3u);
    first[static_cast<std::size_t>(w[0] - kFirstWordId)] += 1;
  }
  std::vector<double> p;
  for (auto f : freqs) p.push_back(std::log1p(static_cast<double>(f)));
  EXPECT_GT(chi_p(first, p), 0.01);
}

TEST(LogFrequencyLabels, EqualFrequenciesReduceToUniform) {
  Vocabulary v = make_vocab(std::vector<std::int64_t>(6, 9));
  LogFrequencyLabels s(v);
  Rng rng(5);
  std::vector<std::int64_t> first(6, 0);
  for (int i = 0; i < 30000; ++i) first[static_cast<std::size_t>(s.draw(2, rng)[0] - kFirstWordId)] += 1;
  EXPECT_GT(chi_p(first, std::vector<double>(6, 1.0)), 0.01);
}

TEST(IntraClusterLabels, ClusterOddsFollowSizes) {
  Vocabulary v = make_vocab(std::vector<std::int64_t>(10, 2));
  Clustering c = make_clusters({3, 7});
  IntraClusterLabels s(c, v);
  Rng rng(6);
  std::vector<std::int64_t> hits(2, 0);
  for (int i = 0; i < 20000; ++i) {
    int cl = -1;
    auto w = s.draw(2, rng, &cl);
    for (TokenId t : w) ASSERT_EQ(c.cluster_of(t), cl);
    hits[static_cast<std::size_t>(cl)] += 1;
  }
  EXPECT_GT(chi_p(hits, {0.3, 0.7}), 0.01);
}

TEST(IntraClusterLabels, SmallClustersAreExcluded) {
  Vocabulary v = make_vocab(std::vector<std::int64_t>(9, 2));
  Clustering c = make_clusters({2, 4, 3});
  IntraClusterLabels s(c, v);
  Rng rng(7);
  for (int i = 0; i < 500; ++i) {
    int cl = -1;
    s.draw(4, rng, &cl);
    EXPECT_EQ(cl, 1);  // the only cluster with 4 words
  }
  EXPECT_THROW(s.draw(5, rng), ExhaustionError);
}

TEST(IntraClusterLabels, FiveClusterFrequencies) {
  const std::vector<int> sizes{2, 5, 9, 14, 20};
  Vocabulary v = make_vocab(std::vector<std::int64_t>(50, 2));
  Clustering c = make_clusters(sizes);
  IntraClusterLabels s(c, v);
  Rng rng(8);
  std::vector<std::int64_t> hits(5, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    int cl = -1;
    s.draw(3, rng, &cl);
    hits[static_cast<std::size_t>(cl)] += 1;
  }
  // the size-2 cluster cannot host 3 labels; the rest renormalize over 48 words
  EXPECT_EQ(hits[0], 0);
  for (int k = 1; k < 5; ++k)
    EXPECT_NEAR(static_cast<double>(hits[static_cast<std::size_t>(k)]) / draws, sizes[static_cast<std::size_t>(k)] / 48.0, 0.01);
  EXPECT_GT(chi_p(hits, {0, 5, 9, 14, 20}), 0.01);
}

TEST(InterClusterLabels, DistinctClustersAndFirstMarginal) {
  const std::vector<int> sizes{1, 3, 6, 10};
  Vocabulary v = make_vocab(std::vector<std::int64_t>(20, 2));
  Clustering c = make_clusters(sizes);
  InterClusterLabels s(c, v);
  Rng rng(9);
  std::vector<std::int64_t> first(4, 0);
  for (int i = 0; i < 100000; ++i) {
    std::vector<int> cl;
    auto w = s.draw(2, rng, &cl);
    ASSERT_NE(cl[0], cl[1]);
    for (std::size_t j = 0; j < w.size(); ++j) ASSERT_EQ(c.cluster_of(w[j]), cl[j]);
    first[static_cast<std::size_t>(cl[0])] += 1;
  }
  EXPECT_GT(chi_p(first, {1, 3, 6, 10}), 0.01);
  // N equal to the cluster count uses every cluster once
  std::vector<int> all;
  s.draw(4, rng, &all);
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_THROW(s.draw(5, rng), ExhaustionError);
}

TEST(SmlmtTask, ValidAndDeterministic) {
  const auto ctx = testutil::small_context();
  auto words = ctx->vocab.eligible_words();
  Rng a(10), b(10);
  std::vector<TokenId> labels{words[0], words[5]};
  Episode e1 = build_smlmt_task(labels, ctx->index, ctx->corpus, ctx->vocab, 4, 1, a);
  Episode e2 = build_smlmt_task(labels, ctx->index, ctx->corpus, ctx->vocab, 4, 1, b);
  EXPECT_TRUE(validate_episode(e1, ctx->corpus).empty());
  EXPECT_EQ(episode_to_json(e1).dump(), episode_to_json(e2).dump());
  EXPECT_EQ(e1.support.size(), 8u);
  EXPECT_EQ(e1.query.size(), 2u);
}

TEST(SmlmtTask, MaskedWordNeverVisibleInItsExamples) {
  auto sampler = make_preset("uniform", small_inputs(0.0));
  const auto& corpus = testutil::small_context()->corpus;
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    Episode ep = sampler->next_episode(rng);
    for (const auto* part : {&ep.support, &ep.query})
      for (const auto& e : *part) {
        const TokenId w = ep.meta[static_cast<std::size_t>(e.label)];
        ASSERT_EQ(std::count(e.tokens.begin(), e.tokens.end(), w), 0);
        ASSERT_GE(std::count(e.tokens.begin(), e.tokens.end(), kMaskId), 1);
      }
    ASSERT_TRUE(validate_episode(ep, corpus).empty());
  }
}

TEST(SmlmtTask, TooFewSentencesIsExhaustion) {
  Corpus c = ingest_text("a b. a c. d e.");
  auto ctx = make_context(c, 1);
  Rng rng(1);
  std::vector<TokenId> labels{c.lexicon.find("d")};
  EXPECT_THROW(build_smlmt_task(labels, ctx->index, ctx->corpus, ctx->vocab, 1, 1, rng), ExhaustionError);
}

TEST(SentClusterTask, PermutationIsFreshEachEpisode) {
  const auto& sc = testutil::small_corpus();
  auto clusters = testutil::topic_sentence_clusters(sc);
  Rng rng(12);
  const int n = 4;
  std::map<std::pair<int, int>, std::int64_t> pairs;
  const int episodes = 10000;
  for (int i = 0; i < episodes; ++i) {
    Episode ep = build_sentcluster_task(*clusters, sc.corpus, n, 2, 1, rng);
    for (int l = 0; l < n; ++l) pairs[{ep.meta[static_cast<std::size_t>(l)], l}] += 1;
  }
  ASSERT_EQ(pairs.size(), 16u);  // all four clusters used in every episode, under every label
  for (const auto& [key, cnt] : pairs) EXPECT_NEAR(static_cast<double>(cnt) / episodes, 0.25, 0.02);
}

TEST(SentClusterTask, ValidUnmaskedAndMembershipChecked) {
  const auto& sc = testutil::small_corpus();
  auto clusters = testutil::topic_sentence_clusters(sc);
  Rng rng(13);
  Episode ep = build_sentcluster_task(*clusters, sc.corpus, 3, 5, 2, rng);
  EXPECT_TRUE(validate_episode(ep, sc.corpus, clusters.get()).empty());
  for (const auto& e : ep.support) EXPECT_EQ(std::count(e.tokens.begin(), e.tokens.end(), kMaskId), 0);
  // swapping two labels breaks the cluster mapping
  std::swap(ep.meta[0], ep.meta[1]);
  EXPECT_FALSE(validate_episode(ep, sc.corpus, clusters.get()).empty());
  EXPECT_THROW(build_sentcluster_task(*clusters, sc.corpus, 5, 2, 1, rng), ExhaustionError);
}

TEST(SentPairTask, TwoTinyDocuments) {
  Corpus c = ingest_text("a b. c d.\n\ne f. g h.");
  Rng rng(14);
  std::set<std::pair<SentId, SentId>> positives;
  for (int i = 0; i < 200; ++i) {
    Episode ep = build_sentpair_task(c, 1, 1, rng);
    ASSERT_TRUE(validate_episode(ep, c).empty());
    for (const auto* part : {&ep.support, &ep.query})
      for (const auto& e : *part)
        if (e.label == 1) positives.insert({e.sources[0], e.sources[1]});
  }
  // ordered pairs of distinct sentences inside one document
  EXPECT_EQ(positives, (std::set<std::pair<SentId, SentId>>{{0, 1}, {1, 0}, {2, 3}, {3, 2}}));
}

TEST(SentPairTask, DocumentMembershipFuzz) {
  const auto& c = testutil::small_context()->corpus;
  Rng rng(15);
  for (int i = 0; i < 1000; ++i) {
    Episode ep = build_sentpair_task(c, 40, 5, rng);
    ASSERT_EQ(ep.support.size(), 80u);
    ASSERT_EQ(ep.query.size(), 10u);
    for (const auto* part : {&ep.support, &ep.query})
      for (const auto& e : *part) {
        const bool same = c.sentence(e.sources[0]).doc_id == c.sentence(e.sources[1]).doc_id;
        ASSERT_EQ(same, e.label == 1);
        ASSERT_EQ(std::count(e.tokens.begin(), e.tokens.end(), kSepId), 1);
      }
  }
}

TEST(SentPairTask, NeedsTwoMultiSentenceDocuments) {
  Corpus c = ingest_text("a b. c d.\n\ne f.");
  Rng rng(1);
  EXPECT_THROW(build_sentpair_task(c, 1, 1, rng), ExhaustionError);
}

TEST(Mixture, KindFrequencies) {
  auto in = small_inputs(0.25);
  auto sampler = make_preset("cluster", in);
  Rng rng(16);
  std::map<TaskKind, std::int64_t> kinds;
  const int episodes = 20000;
  for (int i = 0; i < episodes; ++i) kinds[sampler->next_episode(rng).kind] += 1;
  EXPECT_NEAR(kinds[TaskKind::SentPair] / double(episodes), 0.25, 0.015);
  EXPECT_NEAR(kinds[TaskKind::IntraCluster] / double(episodes), 0.75 * 0.75, 0.015);
  EXPECT_NEAR(kinds[TaskKind::Frequency] / double(episodes), 0.75 * 0.25, 0.015);
}

TEST(Mixture, ZeroSentPairProbabilityNeverPairs) {
  auto sampler = make_preset("mix", small_inputs(0.0));
  Rng rng(17);
  for (int i = 0; i < 2000; ++i) ASSERT_NE(sampler->next_episode(rng).kind, TaskKind::SentPair);
}

TEST(Mixture, ConfigErrors) {
  EXPECT_THROW(make_mixture_sampler({}, 0.1, nullptr), ConfigError);
  auto in = small_inputs(0.0);
  SamplerPtr u = make_preset("uniform", in);
  EXPECT_THROW(make_mixture_sampler({{u, 1.0}}, 1.5, u), ConfigError);
  EXPECT_THROW(make_mixture_sampler({{u, -1.0}}, 0.0, nullptr), ConfigError);
  EXPECT_THROW(make_mixture_sampler({{u, 0.0}}, 0.0, nullptr), ConfigError);
  EXPECT_THROW(make_preset("bogus", in), ConfigError);
  in.word_clusters = nullptr;
  EXPECT_THROW(make_preset("intra-cluster", in), ConfigError);
}

TEST(Sampler, ClassCountMarginalAndPerClassCounts) {
  auto sampler = make_preset("uniform", small_inputs(0.0));
  Rng rng(18);
  std::vector<std::int64_t> hist(4, 0);
  const int episodes = 10000;
  const auto& corpus = testutil::small_context()->corpus;
  for (int i = 0; i < episodes; ++i) {
    Episode ep = sampler->next_episode(rng);
    hist[static_cast<std::size_t>(ep.n_classes - 2)] += 1;
    ASSERT_EQ(ep.k_support, 80 / ep.n_classes);
    ASSERT_EQ(ep.k_query, (10 + ep.n_classes - 1) / ep.n_classes);
    if (i < 200) ASSERT_TRUE(validate_episode(ep, corpus).empty());
  }
  for (auto h : hist) EXPECT_NEAR(h / double(episodes), 0.25, 0.02);
}

TEST(Sampler, SameSeedSameStream) {
  auto sampler = make_preset("mix", small_inputs());
  Rng a(19), b(19);
  for (int i = 0; i < 50; ++i) ASSERT_EQ(sampler->next_episode(a), sampler->next_episode(b));
}

TEST(Sampler, BoundedRetriesThenExhausted) {
  // every word has exactly two sentences; the default config needs far more
  Corpus c = ingest_text("a b. a b. c d. c d.");
  auto ctx = make_context(c, 1);
  SamplerConfig cfg;
  cfg.max_retries = 3;
  SmlmtSampler s(ctx, LabelStrategy::Uniform, cfg);
  Rng rng(1);
  EXPECT_THROW(s.next_episode(rng), DistributionExhaustedError);
}

TEST(Validator, CatchesTampering) {
  auto sampler = make_preset("uniform", small_inputs(0.0));
  const auto& corpus = testutil::small_context()->corpus;
  Rng rng(20);
  const Episode good = sampler->next_episode(rng);
  ASSERT_TRUE(validate_episode(good, corpus).empty());

  Episode e = good;
  e.query[0].sources = e.support[0].sources;
  e.query[0].tokens = e.support[0].tokens;
  e.query[0].label = e.support[0].label;
  EXPECT_FALSE(validate_episode(e, corpus).empty());  // overlap (and unbalanced)

  e = good;
  e.support.pop_back();
  EXPECT_FALSE(validate_episode(e, corpus).empty());

  e = good;
  e.support[0].tokens = corpus.sentence(e.support[0].sources[0]).tokens;
  EXPECT_FALSE(validate_episode(e, corpus).empty());  // mask removed

  e = good;
  e.support[0].label = e.n_classes;
  EXPECT_FALSE(validate_episode(e, corpus).empty());

  e = good;
  e.meta[0] = e.meta[1];
  EXPECT_FALSE(validate_episode(e, corpus).empty());
  EXPECT_THROW(check_episode(e, corpus), ConsistencyError);
}

TEST(EpisodeFile, RoundTripAndValidationOnLoad) {
  auto sampler = make_preset("mix", small_inputs(0.5));
  const auto& corpus = testutil::small_context()->corpus;
  auto clusters = testutil::topic_style_sentence_clusters(testutil::small_corpus());
  Rng rng(21);
  std::vector<Episode> eps;
  for (int i = 0; i < 30; ++i) eps.push_back(sampler->next_episode(rng));
  std::stringstream s;
  for (const auto& e : eps) write_episode(e, s);
  const std::string text = s.str();
  std::istringstream in(text);
  auto back = read_episodes(in, &corpus, clusters.get());
  EXPECT_EQ(back, eps);
  std::ostringstream again;
  for (const auto& e : back) write_episode(e, again);
  EXPECT_EQ(again.str(), text);

  Episode bad = eps[0];
  bad.support.pop_back();
  std::stringstream t;
  write_episode(eps[1], t);
  write_episode(bad, t);
  try {
    read_episodes(t, &corpus);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  std::istringstream junk("{\"version\": 99}\n");
  EXPECT_THROW(read_episodes(junk), FormatError);
}

TEST(Difficulty, IntraClusterHarderThanInterClusterForPrototypes) {
  const auto ctx = testutil::small_context();
  auto in = small_inputs(0.0);
  in.cfg.n_choices = {3};
  EmbeddingTable table = cooc_embeddings(ctx->corpus, ctx->vocab, 8, 5, 1);
  auto score = [&](const Episode& ep) {
    Matrix proto = Matrix::Zero(ep.n_classes, table.dim);
    for (const auto& e : ep.support) proto.row(e.label) += embed_sentence(e.tokens, table).transpose() / ep.k_support;
    int ok = 0;
    for (const auto& e : ep.query) {
      Vector q = embed_sentence(e.tokens, table);
      Eigen::Index best = 0;
      (proto.rowwise() - q.transpose()).rowwise().squaredNorm().minCoeff(&best);
      ok += best == e.label;
    }
    return static_cast<double>(ok) / static_cast<double>(ep.query.size());
  };
  auto intra = make_preset("intra-cluster", in), inter = make_preset("inter-cluster", in);
  Rng r1(22), r2(22);
  double a = 0, b = 0;
  for (int i = 0; i < 300; ++i) {
    a += score(intra->next_episode(r1));
    b += score(inter->next_episode(r2));
  }
  EXPECT_LT(a / 300, b / 300 - 0.05);
}
