#include "veroi/pipeline.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

namespace veroi {
namespace {

using testing::TempDir;

std::string slurp(const std::filesystem::path& p) { return io::read_file(p); }

PipelineConfig small_config() {
  PipelineConfig c;
  c.vocab_k = 16;
  c.pca_dim = 32;
  c.pq_m = 8;
  c.pq_zp = 32;
  c.synth_size = 40;
  c.synth_train_size = 60;
  c.synth_objects = 4;
  c.synth_dim = 16;
  c.synth_background_min = 150;
  c.synth_background_max = 200;
  return c;
}

// Runs synth and all training steps in `dir`; returns the wired config.
PipelineConfig build_pipeline(const std::filesystem::path& dir, bool quantized) {
  const auto base = small_config();
  const auto out = cmd_synth(base, dir);
  auto c = load_config(out.config);
  c.vocab_k = base.vocab_k;
  c.quantized = quantized;
  cmd_train_vocab(c);
  cmd_train_pca(c);
  if (quantized) cmd_train_pq(c);
  cmd_encode(c);
  return c;
}

TEST(Config, ParsesKeysCommentsAndWhitespace) {
  PipelineConfig c;
  std::istringstream in("# comment\n  levels = 2  \nbranching=4 # trailing\n\nquantized = true\nmethod = global\n"
                        "synth_texture_noise = 0.125\n");
  read_config(c, in);
  EXPECT_EQ(c.levels, 2u);
  EXPECT_EQ(c.branching, 4u);
  EXPECT_TRUE(c.quantized);
  EXPECT_EQ(c.method, "global");
  EXPECT_EQ(c.synth_texture_noise, 0.125);
}

TEST(Config, SubqueryKeySelectsMethod) {
  PipelineConfig c;
  set_config(c, "subquery", "true");
  EXPECT_EQ(c.method, "subquery");
}

TEST(Config, Errors) {
  PipelineConfig c;
  EXPECT_THROW(set_config(c, "nope", "1"), Error);
  EXPECT_THROW(set_config(c, "levels", "-1"), Error);
  EXPECT_THROW(set_config(c, "levels", "3x"), Error);
  EXPECT_THROW(set_config(c, "ssr", "maybe"), Error);
  std::istringstream bad("levels 3\n");
  try {
    read_config(c, bad, "f.conf");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kParse);
    EXPECT_NE(std::string(e.what()).find("f.conf:1"), std::string::npos);
  }
  EXPECT_THROW(load_config("/nonexistent/veroi.conf"), Error);
}

TEST(Config, Validation) {
  PipelineConfig c;
  c.quantized = true;
  c.pq_m = 24;
  EXPECT_THROW(validate(c), Error);
  c.sign_limit = true;
  EXPECT_NO_THROW(validate(c));
  PipelineConfig g;
  g.partition = "grid";
  g.quantized = true;
  EXPECT_THROW(validate(g), Error);
  PipelineConfig m;
  m.method = "best";
  EXPECT_THROW(validate(m), Error);
  EXPECT_THROW(validate_search(Method::kFast, false, true, false), Error);
  EXPECT_NO_THROW(validate_search(Method::kGlobal, false, true, false));
  EXPECT_THROW(validate_search(Method::kSubquery, true, false, false), Error);
  EXPECT_THROW(validate_search(Method::kGlobal, true, false, true), Error);
  EXPECT_EQ(parse_block_list("8, 16,32"), (std::vector<std::size_t>{8, 16, 32}));
  EXPECT_THROW(parse_block_list("8,x"), Error);
  EXPECT_THROW(parse_method("best"), Error);
}

TEST(Pipeline, MissingManifestIsIoError) {
  auto c = small_config();
  c.train_manifest = "/nonexistent/train.tsv";
  c.test_manifest = "/nonexistent/test.tsv";
  try {
    cmd_train_vocab(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kIo);
  }
}

TEST(Pipeline, OverlappingTrainAndTestRejected) {
  TempDir dir("overlap");
  const auto out = cmd_synth(small_config(), dir.path());
  auto c = load_config(out.config);
  c.train_manifest = c.test_manifest;
  EXPECT_THROW(cmd_train_vocab(c), Error);
  c.allow_overlap = true;
  c.vocab_k = 8;
  std::ostringstream err;
  EXPECT_NO_THROW(cmd_train_vocab(c, {&err}));
  EXPECT_NE(err.str().find("training manifest"), std::string::npos);
}

TEST(Pipeline, DeterministicModelsAndIndex) {
  TempDir a("det_a"), b("det_b");
  build_pipeline(a.path(), true);
  build_pipeline(b.path(), true);
  for (const char* f : {"vocab.vvoc", "pca.vpca", "pq.vpqm", "index.vidx", "groundtruth.tsv", "queries.tsv"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

TEST(Pipeline, EvalRunsForEveryMethod) {
  TempDir dir("eval");
  auto c = build_pipeline(dir.path(), false);
  for (const char* method : {"fast", "global", "root", "subquery"}) {
    c.method = method;
    std::ostringstream out;
    const auto rep = cmd_eval(c, out);
    EXPECT_EQ(rep.ap.size(), 4u) << method;
    EXPECT_GE(rep.map, 0.0);
    EXPECT_LE(rep.map, 1.0);
    EXPECT_NE(out.str().find("mAP\t"), std::string::npos);
    // One unit is a 128-D inner product; this index is 32-D.
    const std::map<std::string, double> max_units{{"fast", 7.0 / 4}, {"global", 13.0 / 4}, {"root", 1.0 / 4}};
    if (max_units.count(method)) {
      EXPECT_LE(rep.complexity.normalized, max_units.at(method)) << method;
    }
    if (std::string(method) == "root") {
      EXPECT_DOUBLE_EQ(rep.complexity.normalized, 32.0 / 128.0);
    }
  }
}

TEST(Pipeline, QuantizedAndSignEval) {
  TempDir dir("quant");
  auto c = build_pipeline(dir.path(), true);
  std::ostringstream out;
  const auto rep = cmd_eval(c, out);
  EXPECT_LE(rep.complexity.normalized, 7.0);
  c.sign_limit = true;
  cmd_encode(c);
  const auto sign = cmd_eval(c, out);
  EXPECT_LE(sign.complexity.normalized, 7.0);
  c.sign_limit = false;
  EXPECT_THROW(cmd_eval(c, out), Error);  // index M does not match the trained quantizer
}

TEST(Pipeline, FullImageRoiEqualsWholeImageQuery) {
  TempDir dir("roi");
  const auto c = build_pipeline(dir.path(), false);
  const auto entry = read_manifest(c.test_manifest).front();
  const auto fs = load_features(entry.path);
  std::ostringstream a, b;
  const auto whole = cmd_query(c, entry.path, std::nullopt, a);
  const Rect full{0.0f, 0.0f, static_cast<float>(fs.width), static_cast<float>(fs.height)};
  const auto cropped = cmd_query(c, entry.path, full, b);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(whole.entries.front().image_id, entry.image_id);
  EXPECT_EQ(a.str().substr(0, a.str().find('\n')), "rank\timage_id\tscore\tcells_accessed\ttable_reads");
  EXPECT_EQ(cropped.entries.size(), 40u);
}

TEST(Pipeline, LevelProjectionAndGridIndexes) {
  TempDir dir("variants");
  auto c = build_pipeline(dir.path(), false);
  std::ostringstream out;
  c.level_projection = true;
  EXPECT_EQ(cmd_encode(c).kind, IndexKind::kLeaves);
  EXPECT_GE(cmd_eval(c, out).map, 0.0);
  c.level_projection = false;
  c.partition = "grid";
  c.method = "global";
  EXPECT_EQ(cmd_encode(c).grid.front().cells.size(), 14u);
  EXPECT_DOUBLE_EQ(cmd_eval(c, out).complexity.normalized, 14.0 * 32.0 / 128.0);
  c.method = "fast";
  EXPECT_THROW(cmd_eval(c, out), Error);
}

TEST(Pipeline, MinKeypointsSkipsSparseImages) {
  TempDir dir("minkp");
  auto c = build_pipeline(dir.path(), false);
  c.min_keypoints = 1000000;
  std::ostringstream err;
  EXPECT_EQ(cmd_encode(c, {&err}).image_count(), 0u);
  EXPECT_NE(err.str().find("min_keypoints"), std::string::npos);
}

TEST(Pipeline, BenchWritesOneRowPerM) {
  TempDir dir("bench");
  auto c = build_pipeline(dir.path(), false);
  c.bench_m = "4,8,32";
  std::ostringstream out;
  const auto rows = cmd_bench(c, out);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[2].reads_per_query, 0.0);
}

int run(const std::string& args, const std::filesystem::path& log) {
  const std::string cmd = std::string(VEROI_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, EndToEndAndExitCodes) {
  TempDir dir("cli");
  const auto log = dir / "log.txt";
  const std::string small =
      " --set vocab_k=16 --set pca_dim=32 --set pq_m=8 --set pq_zp=32 --set synth_size=40 --set synth_train_size=60"
      " --set synth_objects=4 --set synth_dim=16 --set synth_background_min=150 --set synth_background_max=200";
  ASSERT_EQ(run("synth --out " + dir.path().string() + small, log), 0) << slurp(log);
  const std::string conf = " --config " + (dir / "pipeline.conf").string() + " --set vocab_k=16";
  for (const char* step : {"train-vocab", "train-pca", "train-pq", "encode"})
    ASSERT_EQ(run(std::string(step) + conf, log), 0) << step << ": " << slurp(log);
  ASSERT_EQ(run("eval" + conf, log), 0) << slurp(log);
  EXPECT_NE(slurp(log).find("mAP\t"), std::string::npos);
  const auto first = read_manifest((dir / "test.tsv").string()).front().path;
  ASSERT_EQ(run("query " + first.string() + " --roi 10,10,300,200" + conf, log), 0) << slurp(log);
  EXPECT_EQ(slurp(log).rfind("rank\timage_id", 0), 0u);

  EXPECT_EQ(run("eval --config /nonexistent.conf", log), 2);
  EXPECT_NE(slurp(log).find("error: "), std::string::npos);
  EXPECT_EQ(run("eval" + conf + " --set bogus=1", log), 2);
  EXPECT_EQ(run("query " + first.string() + " --roi 1,2,3" + conf, log) != 0, true);
  EXPECT_NE(run("frobnicate", log), 0);
}

}  // namespace
}  // namespace veroi
