// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "repr/checkpoint.hpp"
#include "repr/config.hpp"
#include "repr/errors.hpp"
#include "repr/experiment.hpp"
#include "repr/rng.hpp"

using namespace repr;
namespace fs = std::filesystem;

namespace {

using Flags = std::vector<std::pair<std::string, std::string>>;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

// Two-class toy images written as IDX files.
void write_toy_idx(const fs::path& dir, const std::string& split, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.images = Tensor({n, 1, 6, 6});
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(rng.below(2));
    ds.labels.push_back(y);
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 6; ++c) {
        const bool lit = (c < 3) == (y == 0);
        ds.images.at(i, 0, r, c) = std::clamp((lit ? 0.7 : 0.2) + 0.2 * rng.normal(), 0.0, 1.0);
      }
  }
  write_idx(ds, (dir / (split + "-images.idx")).string(), (dir / (split + "-labels.idx")).string());
}

class IoTest : public ::testing::Test {
protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("repr_test_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write_toy_idx(dir_, "train", 60, 1);
    write_toy_idx(dir_, "test", 20, 2);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Flags toy_flags(const std::string& out) const {
    return {{"train_images", (dir_ / "train-images.idx").string()},
            {"train_labels", (dir_ / "train-labels.idx").string()},
            {"test_images", (dir_ / "test-images.idx").string()},
            {"test_labels", (dir_ / "test-labels.idx").string()},
            {"probe_size", "12"},
            {"layers", "2"},
            {"filters", "4"},
            {"epochs", "7"},
            {"s1", "2"},
            {"s2", "1"},
            {"n", "2"},
            {"batch_size", "8"},
            {"lr", "0.05"},
            {"seed", "3"},
            {"out_dir", (dir_ / out).string()}};
  }

  RunConfig config(Flags flags) const {
    ConfigSources src;
    src.flags = std::move(flags);
    return parse_config(src);
  }

  fs::path dir_;
};

Checkpoint sample_checkpoint() {
  ModelSpec s;
  s.in_channels = 1;
  s.height = 5;
  s.width = 5;
  s.num_classes = 3;
  s.layers = 2;
  s.filters = 3;
  s.batch_norm = true;
  Checkpoint ck;
  ck.model = Model::create(s, 4);
  Rng rng(5);
  for (auto& l : ck.model.conv_layers)
    for (double& v : l.bn->running_mean.data()) v = rng.normal();
  ck.optimizer = OptimizerState::create(OptimizerRule::Adam, 0.003, {}, ck.model);
  for (auto& slot : ck.optimizer.slots) {
    for (double& v : slot.first.data()) v = rng.normal();
    for (double& v : slot.steps.data()) v = static_cast<double>(rng.below(9));
  }
  ReprSchedule sch;
  ck.cycle = CycleState::initial(ck.model, sch);
  ck.cycle.phase = Phase::Sub;
  ck.cycle.iteration = 1;
  ck.cycle.epoch_in_phase = 2;
  ck.cycle.next_epoch = 52;
  ck.cycle.mask.set({0, 1}, false);
  ck.cycle.dropped = {{0, 1}, {1, 2}};
  ck.cycle.pending_chunks = {{{1, 2}}};
  ck.cycle.events.push_back({50, "prune", 1, "count=2;per_layer=1/1"});
  return ck;
}

} // namespace

TEST(Config, EmptyFileGivesDefaults) {
  const fs::path p = fs::temp_directory_path() / "repr_empty.cfg";
  spit(p, "# nothing here\n\n");
  ConfigSources src;
  src.file = p.string();
  const RunConfig c = parse_config(src);
  EXPECT_EQ(c.repr.s1, 20u);
  EXPECT_EQ(c.repr.s2, 10u);
  EXPECT_EQ(c.repr.n, 3u);
  EXPECT_EQ(c.repr.p_percent, 30.0);
  EXPECT_EQ(c.repr.metric, Metric::Ortho);
  EXPECT_EQ(c.epochs, 100u);
  EXPECT_EQ(c.model.filters, 8u);
  EXPECT_EQ(c.values.size(), config_defaults().size());
  fs::remove(p);
}

TEST(Config, FlagOverridesFileAndFileOverridesDefault) {
  const fs::path p = fs::temp_directory_path() / "repr_prec.cfg";
  spit(p, "metric = weights\nepochs=95  # shorter\n");
  ConfigSources src;
  src.file = p.string();
  src.flags = {{"metric", "ortho"}};
  const RunConfig c = parse_config(src);
  EXPECT_EQ(c.repr.metric, Metric::Ortho);
  EXPECT_EQ(c.epochs, 95u);
  fs::remove(p);
}

TEST(Config, PrecedencePropertyOverRandomKeySubsets) {
  const std::vector<std::pair<std::string, std::vector<std::string>>> keys = {
      {"seed", {"11", "12", "13"}}, {"batch_size", {"16", "32", "48"}}, {"out_dir", {"/a", "/b", "/c"}},
      {"p_percent", {"10", "20", "40"}}, {"metric", {"weights", "random", "apoz"}}};
  const fs::path p = fs::temp_directory_path() / "repr_prop.cfg";
  Rng rng(9);
  for (int trial = 0; trial < 60; ++trial) {
    std::string file;
    ConfigSources src;
    std::map<std::string, std::string> want;
    for (const auto& [k, v] : config_defaults()) want[k] = v;
    for (const auto& [key, vals] : keys) {
      if (rng.bernoulli(0.5)) {
        file += key + "=" + vals[0] + "\n";
        want[key] = vals[0];
      }
      if (key == "out_dir" && rng.bernoulli(0.5)) {
        src.env_out_dir = vals[1];
        want[key] = vals[1];
      }
      if (rng.bernoulli(0.5)) {
        src.flags.emplace_back(key, vals[2]);
        want[key] = vals[2];
      }
    }
    spit(p, file);
    src.file = p.string();
    const RunConfig c = parse_config(src);
    for (const auto& [key, vals] : keys) EXPECT_EQ(c.values.at(key), want[key]) << key << " trial " << trial;
  }
  fs::remove(p);
}

TEST(Config, AllProblemsReportedTogether) {
  ConfigSources src;
  src.flags = {{"p_percent", "0"}, {"bogus_key", "1"}, {"epochs", "many"}, {"kernel", "4"}};
  try {
    parse_config(src);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const char* needle : {"p_percent", "bogus_key", "epochs", "kernel"})
      EXPECT_NE(msg.find(needle), std::string::npos) << needle << " missing from: " << msg;
  }
}

TEST(Config, UnknownKeyInFileIsError) {
  const fs::path p = fs::temp_directory_path() / "repr_unknown.cfg";
  spit(p, "s1=5\nlearning_rate=0.1\n");
  ConfigSources src;
  src.file = p.string();
  EXPECT_THROW(parse_config(src), ConfigError);
  spit(p, "this line has no equals sign\n");
  EXPECT_THROW(parse_config(src), ConfigError);
  fs::remove(p);
  EXPECT_THROW(parse_config(src), ConfigError);
}

TEST(Config, RelativePathsResolveAgainstFileDirectory) {
  const fs::path d = fs::temp_directory_path() / "repr_rel";
  fs::create_directories(d / "cfg");
  spit(d / "cfg" / "run.cfg", "train_images=../data/x.idx\ncheckpoint=/abs/y.ckpt\n");
  ConfigSources src;
  src.file = (d / "cfg" / "run.cfg").string();
  src.flags = {{"test_images", "rel/z.idx"}};
  const RunConfig c = parse_config(src);
  EXPECT_EQ(c.train_images, (d / "data" / "x.idx").lexically_normal().string());
  EXPECT_EQ(c.checkpoint, "/abs/y.ckpt");
  EXPECT_EQ(c.test_images, "rel/z.idx");
  EXPECT_THROW(check_files(c), ConfigError);
  fs::remove_all(d);
}

TEST(Config, RenderRoundTrips) {
  ConfigSources src;
  src.flags = {{"metric", "taylor"}, {"lr_schedule", "step"}, {"lr_milestones", "0:0.1,60:0.01"}, {"augment", "true"},
               {"train_images", "/d/a"}, {"train_labels", "/d/b"}, {"test_images", "/d/c"}, {"test_labels", "/d/e"}};
  const RunConfig c = parse_config(src);
  EXPECT_EQ(c.lr.milestones.size(), 2u);
  const fs::path p = fs::temp_directory_path() / "repr_render.cfg";
  spit(p, render_config(c));
  ConfigSources again;
  again.file = p.string();
  const RunConfig d = parse_config(again);
  EXPECT_EQ(render_config(d), render_config(c));
  fs::remove(p);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const fs::path a = fs::temp_directory_path() / "repr_a.ckpt", b = fs::temp_directory_path() / "repr_b.ckpt";
  const Checkpoint ck = sample_checkpoint();
  save_checkpoint(ck, a.string());
  const Checkpoint loaded = load_checkpoint(a.string());
  save_checkpoint(loaded, b.string());
  EXPECT_EQ(slurp(a), slurp(b));

  EXPECT_EQ(loaded.model.spec, ck.model.spec);
  const auto pa = parameters(loaded.model);
  const auto pb = parameters(ck.model);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i], *pb[i]);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(loaded.model.conv_layers[l].bn->running_mean, ck.model.conv_layers[l].bn->running_mean);
    EXPECT_EQ(loaded.model.conv_layers[l].bn->running_var, ck.model.conv_layers[l].bn->running_var);
  }
  EXPECT_EQ(loaded.optimizer, ck.optimizer);
  EXPECT_EQ(loaded.cycle, ck.cycle);
  fs::remove(a);
  fs::remove(b);
}

TEST(Checkpoint, CorruptionIsFormatError) {
  const fs::path p = fs::temp_directory_path() / "repr_c.ckpt";
  save_checkpoint(sample_checkpoint(), p.string());
  const std::string good = slurp(p);

  spit(p, good.substr(0, good.size() - 8));
  try {
    load_checkpoint(p.string());
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("cycle.pending"), std::string::npos) << e.what();
  }

  spit(p, good + "xx");
  EXPECT_THROW(load_checkpoint(p.string()), FormatError);

  std::string v2 = good;
  v2.replace(0, std::string("repr-checkpoint 1").size(), "repr-checkpoint 2");
  spit(p, v2);
  try {
    load_checkpoint(p.string());
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos) << e.what();
  }

  spit(p, "not a checkpoint\n");
  EXPECT_THROW(load_checkpoint(p.string()), FormatError);
  fs::remove(p);
  EXPECT_THROW(load_checkpoint(p.string()), FormatError);
}

TEST_F(IoTest, IdenticalConfigGivesByteIdenticalMetrics) {
  std::ostringstream sink;
  Flags a = toy_flags("a"), b = toy_flags("b");
  for (Flags* f : {&a, &b}) {
    f->emplace_back("augment", "true");
    f->emplace_back("dropout", "0.2");
    f->emplace_back("batchnorm", "true");
  }
  ASSERT_EQ(cmd_train(config(a), sink), 0);
  ASSERT_EQ(cmd_train(config(b), sink), 0);
  const std::string ma = slurp(dir_ / "a" / "metrics.csv");
  EXPECT_EQ(std::count(ma.begin(), ma.end(), '\n'), 8);
  EXPECT_EQ(ma, slurp(dir_ / "b" / "metrics.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "events.csv"), slurp(dir_ / "b" / "events.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "final.ckpt"), slurp(dir_ / "b" / "final.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "a" / "summary.json"));
}

TEST_F(IoTest, ResumeReproducesRemainingRows) {
  std::ostringstream sink;
  for (const std::string& at : {"2", "4"}) {
    Flags full = toy_flags("full");
    full.emplace_back("checkpoint_every", "1");
    full.emplace_back("optimizer", "adam");
    full.emplace_back("lr", "0.01");
    full.emplace_back("staged_prune_batches", "2");
    ASSERT_EQ(cmd_train(config(full), sink), 0);

    // Resume into a directory whose metrics.csv already holds the first rows
    // (plus stale rows past the checkpoint, which must be dropped).
    const fs::path part = dir_ / ("part" + at);
    fs::create_directories(part);
    fs::copy_file(dir_ / "full" / "metrics.csv", part / "metrics.csv", fs::copy_options::overwrite_existing);
    Flags resumed = full;
    resumed.emplace_back("resume", (dir_ / "full" / ("checkpoint-" + at + ".ckpt")).string());
    resumed.emplace_back("out_dir", part.string());
    ASSERT_EQ(cmd_train(config(resumed), sink), 0);
    EXPECT_EQ(slurp(part / "metrics.csv"), slurp(dir_ / "full" / "metrics.csv")) << "resume at " << at;
    EXPECT_EQ(slurp(part / "events.csv"), slurp(dir_ / "full" / "events.csv")) << "resume at " << at;
    EXPECT_EQ(slurp(part / "final.ckpt"), slurp(dir_ / "full" / "final.ckpt")) << "resume at " << at;
  }
}

TEST_F(IoTest, CompareWithZeroCyclesGivesIdenticalArms) {
  std::ostringstream sink;
  Flags f = toy_flags("cmp");
  f.emplace_back("n", "0");
  ASSERT_EQ(cmd_compare(config(f), sink), 0);
  EXPECT_EQ(slurp(dir_ / "cmp" / "standard" / "metrics.csv"), slurp(dir_ / "cmp" / "repr" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "cmp" / "compare.csv"));
  EXPECT_NE(sink.str().find("standard"), std::string::npos);
}

TEST_F(IoTest, OracleAndAnalyzeWriteReports) {
  std::ostringstream sink;
  Flags f = toy_flags("run");
  f.emplace_back("epochs", "3");
  f.emplace_back("n", "1");
  ASSERT_EQ(cmd_train(config(f), sink), 0);

  Flags o = f;
  o.emplace_back("checkpoint", (dir_ / "run" / "final.ckpt").string());
  o.emplace_back("out_dir", (dir_ / "inspect").string());
  o.emplace_back("analyze_log", (dir_ / "run" / "metrics.csv").string());
  ASSERT_EQ(cmd_oracle(config(o), sink), 0);
  ASSERT_EQ(cmd_analyze(config(o), sink), 0);
  const std::string oracle = slurp(dir_ / "inspect" / "oracle_scores.csv");
  EXPECT_EQ(oracle.substr(0, oracle.find('\n')), "metric,layer,filter,value,rank");
  EXPECT_EQ(std::count(oracle.begin(), oracle.end(), '\n'), 9);
  EXPECT_TRUE(fs::exists(dir_ / "inspect" / "correlation_pearson.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "inspect" / "agreement.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "inspect" / "gap.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "inspect" / "scores_ortho.csv"));
}

TEST_F(IoTest, ArchitectureMismatchOnResumeIsConfigError) {
  std::ostringstream sink;
  Flags f = toy_flags("r");
  f.emplace_back("epochs", "3");
  f.emplace_back("n", "1");
  ASSERT_EQ(cmd_train(config(f), sink), 0);
  Flags g = f;
  g.emplace_back("filters", "5");
  g.emplace_back("resume", (dir_ / "r" / "final.ckpt").string());
  EXPECT_THROW(cmd_train(config(g), sink), ConfigError);
}

TEST_F(IoTest, MetricsCsvReadsBack) {
  std::ostringstream sink;
  Flags f = toy_flags("m");
  f.emplace_back("epochs", "3");
  f.emplace_back("n", "1");
  ASSERT_EQ(cmd_train(config(f), sink), 0);
  const auto rows = read_metrics_csv((dir_ / "m" / "metrics.csv").string());
  ASSERT_EQ(rows.size(), 3u);
  std::ostringstream os;
  write_metrics_csv(os, rows);
  EXPECT_EQ(os.str(), slurp(dir_ / "m" / "metrics.csv"));
}
