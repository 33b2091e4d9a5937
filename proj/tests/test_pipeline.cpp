#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "exfm/cli.hpp"
#include "exfm/error.hpp"
#include "exfm/pipeline.hpp"

using namespace exfm;
using distill::DistillMode;
namespace fs = std::filesystem;

namespace {

config::ExperimentConfig small_config() {
  config::ExperimentConfig cfg;
  cfg.stream.examples_per_day = 300;
  cfg.stream.num_days = 5;
  cfg.fm_days = 2;
  cfg.fm_hidden = {64, 64};
  cfg.vm.backbone_widths = {16};
  cfg.vm.head_hidden = {4};
  cfg.trace_every = 100;
  cfg.seeds = {3, 4, 5};
  return cfg;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("exfm_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Pipeline, OneSupervisionLogFeedsEveryTraffic) {
  const auto cfg = small_config();
  const auto res = pipeline::run_pipeline(cfg, cfg.seeds);
  ASSERT_TRUE(res.supervision);
  EXPECT_EQ(res.vms.runs.size(), 3u * 4u);
  EXPECT_EQ(res.fm.snapshots.size(), cfg.stream.num_days);
  for (const auto& inv : res.supervision->invariants) EXPECT_TRUE(inv.passed) << inv.name;
  std::size_t used = 0;
  for (const auto& r : res.vms.runs) {
    EXPECT_GT(r.trained, 0u);
    if (r.mode != DistillMode::kNoDistill) used += r.trained - r.missing_supervision;
  }
  EXPECT_GT(used, 0u);
}

TEST(Pipeline, RecordsNeverUseTheirOwnDay) {
  const auto cfg = small_config();
  const auto data = pipeline::build_dataset(cfg, cfg.seeds);
  const auto fm = pipeline::train_fm(cfg, cfg.seeds, data);
  for (std::size_t delay : {0u, 1u}) {
    const auto sup = pipeline::run_das(cfg, data, fm, delay);
    std::unordered_map<std::uint64_t, das::Time> when;
    for (const auto& row : data.join.rows) when[row.example_id] = row.impression_time;
    ASSERT_FALSE(sup.records.empty());
    for (const auto& rec : sup.records) {
      const auto day = std::uint64_t(when.at(rec.example_id) / stream::kDayMs);
      EXPECT_LE(rec.fm_version + delay, day);
    }
  }
}

TEST(Pipeline, NoDistillIgnoresTheService) {
  auto cfg = small_config();
  cfg.modes = {DistillMode::kNoDistill};
  const auto with = pipeline::run_pipeline(cfg, cfg.seeds);
  cfg.das_enabled = false;
  const auto without = pipeline::run_pipeline(cfg, cfg.seeds);
  EXPECT_FALSE(without.supervision);
  for (int t = 0; t < 3; ++t) {
    std::ostringstream a, b;
    stream::write_trace_csv(a, with.vms.find(t, DistillMode::kNoDistill).trace);
    stream::write_trace_csv(b, without.vms.find(t, DistillMode::kNoDistill).trace);
    EXPECT_EQ(a.str(), b.str());
  }
}

TEST(Pipeline, TeacherMustBeWider) {
  auto cfg = small_config();
  cfg.fm_hidden = {4};
  const auto data = pipeline::build_dataset(cfg, cfg.seeds);
  try {
    pipeline::train_fm(cfg, cfg.seeds, data);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfigError);
  }
}

TEST(Pipeline, PublishSchedule) {
  EXPECT_EQ(pipeline::publish_time(0, 0), stream::kDayMs);
  EXPECT_EQ(pipeline::publish_time(3, 2), 6 * stream::kDayMs);
}

TEST(Cli, RunIsByteIdenticalAcrossReruns) {
  const auto cfg = small_config();
  const fs::path a = fresh_dir("run_a"), b = fresh_dir("run_b");
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_run(cfg, a, log), cli::kExitPass) << log.str();
  ASSERT_EQ(cli::cmd_run(cfg, b, log), cli::kExitPass);
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    ++files;
    const auto name = entry.path().filename();
    EXPECT_EQ(slurp(entry.path()), slurp(b / name)) << name;
  }
  EXPECT_EQ(files, 3u + 3u + 2u);
  const std::string summary = slurp(a / "summary.csv");
  EXPECT_EQ(summary.substr(0, summary.find('\n')), cli::kSummaryHeader);
  EXPECT_NE(summary.find("all,AH_plus_SA,"), std::string::npos);
  // The dumped config reproduces the run.
  const auto again = config::load_config((a / "config.conf").string());
  std::ostringstream x, y;
  config::write_config(x, cfg);
  config::write_config(y, again);
  EXPECT_EQ(x.str(), y.str());
}

TEST(Cli, ReplayedStreamMatchesGenerated) {
  const auto cfg = small_config();
  const fs::path gen = fresh_dir("gen"), direct = fresh_dir("direct"), replay = fresh_dir("replay");
  std::ostringstream log;
  ASSERT_EQ(cli::cmd_gen_stream(cfg, gen, log), cli::kExitPass);
  ASSERT_EQ(cli::cmd_run(cfg, direct, log), cli::kExitPass);
  ASSERT_EQ(cli::cmd_run(cfg, replay, log, (gen / "stream.csv").string()), cli::kExitPass);
  EXPECT_EQ(slurp(direct / "summary.csv"), slurp(replay / "summary.csv"));
  EXPECT_EQ(slurp(direct / "supervision.jsonl"), slurp(replay / "supervision.jsonl"));
}

TEST(Cli, ReplayWithWrongTrafficCountIsConfigError) {
  auto cfg = small_config();
  const fs::path gen = fresh_dir("gen_wrong");
  std::ostringstream log;
  cli::cmd_gen_stream(cfg, gen, log);
  cfg.stream.num_traffics = 2;
  try {
    cli::cmd_run(cfg, fresh_dir("wrong"), log, (gen / "stream.csv").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfigError);
  }
}

TEST(Cli, StalenessAtZeroDelayMatchesRun) {
  auto cfg = small_config();
  cfg.num_seeds = 1;
  cfg.max_delay = 1;
  const fs::path st = fresh_dir("staleness"), run = fresh_dir("run_st");
  std::ostringstream log;
  cli::cmd_staleness(cfg, st, log);
  cli::cmd_run(cfg, run, log);
  const std::string seeds = slurp(st / "staleness_seeds.csv");
  const std::string summary = slurp(run / "summary.csv");
  for (const char* mode : {"AH", "AH_plus_SA"}) {
    const std::string key = std::string("3,0,") + mode + ",";
    const auto pos = seeds.find(key);
    ASSERT_NE(pos, std::string::npos) << seeds;
    const std::string ne = seeds.substr(pos + key.size(), seeds.find(',', pos + key.size()) -
                                                              pos - key.size());
    const std::string row = std::string("all,") + mode + ",";
    const auto rpos = summary.find(row);
    ASSERT_NE(rpos, std::string::npos);
    const std::string line = summary.substr(rpos, summary.find('\n', rpos) - rpos);
    EXPECT_NE(line.find("," + ne + ","), std::string::npos) << line << " vs " << ne;
  }
}

TEST(Cli, TheoremRejectsUnknownName) {
  std::ostringstream log;
  try {
    cli::cmd_theorem("nope", 1, fresh_dir("theorem"), log);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfigError);
  }
}

TEST(Cli, DasVerifyPassesAndMutantFails) {
  std::ostringstream log;
  const fs::path ok = fresh_dir("das_ok"), bad = fresh_dir("das_bad");
  EXPECT_EQ(cli::cmd_das_verify(50, 1, false, ok, log), cli::kExitPass) << log.str();
  EXPECT_TRUE(fs::exists(ok / "das_verify.csv"));
  EXPECT_EQ(cli::cmd_das_verify(50, 1, true, bad, log), cli::kExitFailure);
  EXPECT_TRUE(fs::exists(bad / "counterexample_exhaustive.csv"));
}
