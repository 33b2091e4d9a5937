#include <gtest/gtest.h>

#include <sstream>

#include "exfm/config.hpp"
#include "exfm/error.hpp"

using namespace exfm;
using namespace exfm::config;

namespace {

const std::string kSeeds = "[seeds]\ndata = 3\ninit = 4\ndas = 5\n";

ExperimentConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

std::string config_error(const std::string& text) {
  try {
    parse(text);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfigError);
    return e.what();
  }
  ADD_FAILURE() << "accepted: " << text;
  return {};
}

}  // namespace

TEST(Config, ShippedConfigsLoad) {
  for (const char* name : {"default.conf", "staleness.conf", "sweep.conf"}) {
    const auto cfg = load_config(std::string(EXFM_SOURCE_DIR) + "/configs/" + name);
    EXPECT_NO_THROW(cfg.validate()) << name;
  }
  const auto cfg = load_config(std::string(EXFM_SOURCE_DIR) + "/configs/default.conf");
  EXPECT_EQ(cfg.stream.num_traffics, 3u);
  EXPECT_EQ(cfg.stream.num_days, 8u);
  EXPECT_EQ(cfg.fm_days, 4u);
  EXPECT_EQ(cfg.modes.size(), 4u);
  EXPECT_EQ(cfg.out_dir, "out/run");
}

TEST(Config, SectionsAndComments) {
  const auto cfg = parse(kSeeds + "# note\n[stream]\nnum_days = 5  # inline\n[protocol]\nfm_days = 2\n"
                                "[distill]\nbeta = 4\n");
  EXPECT_EQ(cfg.stream.num_days, 5u);
  EXPECT_EQ(cfg.ah.grad_scale, 4.0);
  EXPECT_EQ(cfg.seeds.init, 4u);
  EXPECT_EQ(parse("seeds.data = 1\nseeds.init = 1\nseeds.das = 9\n").seeds.das, 9u);
}

TEST(Config, UnknownKeyNamesTheLine) {
  const std::string msg = config_error(kSeeds + "[stream]\nnum_dayz = 5\n");
  EXPECT_NE(msg.find("line 6"), std::string::npos) << msg;
}

TEST(Config, MissingSeedRejected) {
  config_error("[seeds]\ndata = 1\ninit = 1\n");
}

TEST(Config, DuplicateKeyRejected) {
  config_error(kSeeds + "[stream]\nnum_days = 9\nnum_days = 10\n");
}

TEST(Config, BadValuesRejected) {
  config_error(kSeeds + "[stream]\nnum_days = five\n");
  config_error(kSeeds + "[distill]\nalpha = 0.5\n");
  config_error(kSeeds + "[distill]\nmodes = AH,Bogus\n");
  config_error(kSeeds + "[das]\nenabled = maybe\n");
  config_error(kSeeds + "no equals sign\n");
}

TEST(Config, MissingFileIsConfigError) {
  try {
    load_config("/nonexistent/exfm.conf");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfigError);
  }
}

TEST(Config, WriteParseRoundTrip) {
  auto cfg = parse(kSeeds + "[stream]\nchurn_rate = 0.125\n[models]\nfm_hidden = 64,32\n"
                            "[distill]\nmodes = AH,AH_plus_SA\nw = 0.3\n[sweep]\nbeta = 1,2\n");
  std::ostringstream a;
  write_config(a, cfg);
  const auto back = parse(a.str());
  std::ostringstream b;
  write_config(b, back);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(back.stream.churn_rate, 0.125);
  EXPECT_EQ(back.fm_hidden, (std::vector<std::size_t>{64, 32}));
  EXPECT_EQ(back.modes.size(), 2u);
  EXPECT_EQ(back.sweep_beta, (std::vector<double>{1.0, 2.0}));
}

TEST(Seeds, Replicates) {
  const Seeds s{10, 20, 30};
  const Seeds r = s.replicate(2);
  EXPECT_EQ(r.data, 12u);
  EXPECT_EQ(r.init, 22u);
  EXPECT_EQ(r.das, 32u);
}
