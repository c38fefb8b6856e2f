#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "common.hpp"
#include "metatask/config.hpp"

using namespace metatask;

namespace {

std::string resolved_text(const RunConfig& c) {
  std::ostringstream os;
  write_run_config(c, os);
  return os.str();
}

std::function<const char*(const char*)> fake_env(std::map<std::string, std::string> vars) {
  auto shared = std::make_shared<std::map<std::string, std::string>>(std::move(vars));
  return [shared](const char* n) -> const char* {
    auto it = shared->find(n);
    return it == shared->end() ? nullptr : it->second.c_str();
  };
}

RunConfig valid() {
  RunConfig c;
  c.seed = 1;
  return c;
}

bool mentions(const std::vector<std::string>& v, const std::string& needle) {
  for (const auto& s : v)
    if (s.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST(Config, DefaultsAreValidOnceSeeded) {
  EXPECT_TRUE(config_violations(valid()).empty());
  auto v = config_violations(RunConfig{});
  ASSERT_EQ(v.size(), 1u);
  EXPECT_NE(v[0].find("run.seed"), std::string::npos);
  RunConfig d;
  EXPECT_EQ(d.n_choices, (std::vector<int>{2, 3, 4, 5}));
  EXPECT_EQ(d.support_total, 80);
  EXPECT_EQ(d.query_total, 10);
  EXPECT_EQ(d.adapt_steps, 7);
  EXPECT_EQ(d.tasks_per_batch, 4);
  EXPECT_DOUBLE_EQ(d.sentpair_prob, 1.0 / 16.0);
}

TEST(Config, FileThenEnvironmentThenOverrides) {
  const auto dir = testutil::temp_dir("cfg");
  const auto path = (dir / "run.conf").string();
  {
    std::ofstream out(path);
    out << "# run settings\n[run]\nseed = 5\n\n[train]\nadapt_steps = 3\ntotal_steps = 100  # short\n"
           "[model]\nhidden = 16\ntasks.n_choices = 2,4\n";
  }
  RunConfig c = load_run_config(path, fake_env({{"METATASK_TRAIN_ADAPT_STEPS", "4"}, {"METATASK_MODEL_DIM", "8"}}));
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.adapt_steps, 4);  // environment beats the file
  EXPECT_EQ(c.total_steps, 100);
  EXPECT_EQ(c.hidden, 16);
  EXPECT_EQ(c.dim, 8);
  EXPECT_EQ(c.n_choices, (std::vector<int>{2, 4}));
  set_config_value(c, "train.adapt_steps", "6");  // command line beats both
  EXPECT_EQ(c.adapt_steps, 6);
  std::filesystem::remove_all(dir);
}

TEST(Config, UnknownKeysAndBadValuesAreAllReported) {
  std::istringstream in("[train]\nbogus = 1\nadapt_steps = seven\n[model\nno equals sign\n");
  RunConfig c;
  std::vector<std::string> errors;
  apply_config_text(c, in, errors);
  ASSERT_EQ(errors.size(), 4u);
  EXPECT_NE(errors[0].find("unknown key 'train.bogus'"), std::string::npos);
  EXPECT_NE(errors[1].find("line 3"), std::string::npos);
  EXPECT_NE(errors[2].find("section"), std::string::npos);
  EXPECT_NE(errors[3].find("key = value"), std::string::npos);
  EXPECT_THROW(set_config_value(c, "nope.key", "1"), ConfigError);
  EXPECT_THROW(set_config_value(c, "train.adapt_steps", "x"), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/run.conf", fake_env({})), IoError);
  try {
    load_run_config("", fake_env({{"METATASK_TRAIN_THREADS", "many"}}));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_TRUE(mentions(e.violations(), "METATASK_TRAIN_THREADS"));
  }
}

TEST(Config, EveryViolationIsListed) {
  RunConfig c = valid();
  c.adapt_steps = 0;
  c.outer_lr = -1;
  c.inner_lr = 0;
  c.preset = "nonsense";
  c.lambda = "sometimes";
  c.eval_classes = 1;
  c.adapt = {"enc1", "enc9"};
  auto v = config_violations(c);
  for (const char* field : {"adapt_steps", "outer_lr", "model.inner_lr", "tasks.preset", "curriculum.lambda",
                            "eval.n_classes", "enc9"})
    EXPECT_TRUE(mentions(v, field)) << field;
  EXPECT_GE(v.size(), 7u);
  try {
    validate_config(c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.violations(), v);
  }
}

TEST(Config, MissingCorpusNamesTheField) {
  RunConfig c = valid();
  EXPECT_TRUE(config_violations(c, false).empty());
  EXPECT_TRUE(mentions(config_violations(c, true), "corpus.paths"));
  c.corpus_paths = {"/nonexistent/corpus.txt"};
  auto v = config_violations(c, true);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_NE(v[0].find("corpus.paths: no such file"), std::string::npos);
  c = valid();
  c.embedding_source = "file";
  EXPECT_TRUE(mentions(config_violations(c), "embeddings.path"));
}

TEST(Config, ResolvedConfigRoundTrips) {
  RunConfig c = valid();
  c.out_dir = "somewhere";
  c.corpus_paths = {"a.txt", "b.txt"};
  c.n_choices = {3};
  c.inner_lr = 0.123456789012345;
  c.sentpair_prob = 1.0 / 3.0;
  c.curriculum = true;
  c.lambda = "fixed:0.25";
  c.eval_distributions = {"uniform", "sentpair"};
  const std::string text = resolved_text(c);
  std::istringstream in(text);
  RunConfig back;
  std::vector<std::string> errors;
  apply_config_text(back, in, errors);
  EXPECT_TRUE(errors.empty());
  EXPECT_EQ(resolved_text(back), text);
  EXPECT_EQ(back.inner_lr, c.inner_lr);
  EXPECT_EQ(back.sentpair_prob, c.sentpair_prob);
  EXPECT_EQ(back.corpus_paths, c.corpus_paths);
}

TEST(Config, DerivedComponentConfigs) {
  RunConfig c = valid();
  c.total_steps = 50;
  c.curriculum = true;
  c.lambda = "fixed:0.4";
  c.adapt = {"head"};
  EXPECT_EQ(c.train_config().total_steps, 50);
  EXPECT_EQ(c.curriculum_config().total_steps, 50);
  EXPECT_FALSE(c.curriculum_config().lambda.anneal);
  EXPECT_EQ(c.sampler_config().support_total, 80);
  auto spec = c.model_spec(100);
  EXPECT_EQ(spec.vocab, 100);
  EXPECT_FALSE(spec.adapt[0]);
  EXPECT_TRUE(spec.adapt[kLayers - 1]);
}

TEST(Config, ReferenceListsEveryKey) {
  const std::string ref = config_reference();
  for (const char* key : {"run.seed", "corpus.paths", "embeddings.source", "clusters.words", "tasks.preset", "model.dim",
                          "train.adapt_steps", "curriculum.lambda", "eval.k_values", "METATASK_TRAIN_OUTER_LR"})
    EXPECT_NE(ref.find(key), std::string::npos) << key;
}
