#include "veloio/config.hpp"

#include <gtest/gtest.h>

using namespace veloio;
using namespace veloio::cfg;

TEST(Config, EmptyFileGivesAllDefaults) {
  RunConfig c = parse_config_text("");
  EXPECT_EQ(c.schema, 1);
  EXPECT_EQ(c.moe.num_experts, 8);
  EXPECT_EQ(c.moe.top_k, 2);
  EXPECT_DOUBLE_EQ(c.moe.capacity_factor, 1.25);
  EXPECT_EQ(c.moe.window_len, 200);
  EXPECT_EQ(c.train.max_epochs, 200);
  EXPECT_DOUBLE_EQ(c.ride_rate_hz, 100.0);
}

TEST(Config, CommentsAndWhitespaceIgnored) {
  RunConfig c = parse_config_text(
      "# a comment\n"
      "  moe.N = 6   # trailing comment\n"
      "\n"
      "moe.K=3\n");
  EXPECT_EQ(c.moe.num_experts, 6);
  EXPECT_EQ(c.moe.top_k, 3);
}

TEST(Config, UnknownKeyNamesLine) {
  try {
    parse_config_text("moe.N = 8\nmoe.bogus = 1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 2"), std::string::npos);
    EXPECT_NE(msg.find("moe.bogus"), std::string::npos);
  }
}

TEST(Config, KEqualNViolationNamesConstraint) {
  try {
    parse_config_text("moe.K = 8\n");  // N defaults to 8
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("K < N"), std::string::npos);
  }
}

TEST(Config, PatchProductAccepted) {
  RunConfig c = parse_config_text("moe.N_patch = 25\nmoe.L_feature = 8\n");
  EXPECT_EQ(c.moe.num_patches * c.moe.patch_len, 200);
}

TEST(Config, PatchProductViolationNamesConstraint) {
  try {
    parse_config_text("moe.N_patch = 25\n");  // 25 * 10 != 200
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("L = N_patch * L_feature"),
              std::string::npos);
  }
}

TEST(Config, BadValueNamesLine) {
  try {
    parse_config_text("moe.N = eight\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
  }
}

TEST(Config, VectorsAndBooleans) {
  RunConfig c = parse_config_text(
      "ride.init_gyro_bias = 0.01, -0.02, 0.005\n"
      "ride.add_noise = false\n");
  EXPECT_DOUBLE_EQ(c.ride_init_gyro_bias.y(), -0.02);
  EXPECT_FALSE(c.ride_add_noise);
}

TEST(Config, InfeasiblePlanRejected) {
  EXPECT_THROW(parse_config_text("ride.plan = turn,2,180,8\n"), ConfigError);
  EXPECT_THROW(parse_config_text("ride.plan = gallop,3\n"), ConfigError);
}

TEST(Config, PlanGrammar) {
  const auto plan = parse_plan("stop,2; straight,10,5 ; turn,12,-90,4");
  ASSERT_EQ(plan.size(), 3u);
  EXPECT_EQ(plan[0].kind, sim::Segment::Kind::Stop);
  EXPECT_DOUBLE_EQ(plan[1].speed, 5.0);
  EXPECT_EQ(plan[2].kind, sim::Segment::Kind::Turn);
  EXPECT_NEAR(plan[2].angle, -M_PI / 2, 1e-12);
}

TEST(Config, EchoRoundTrips) {
  RunConfig c = parse_config_text("moe.N = 6\nmoe.K = 3\nride.roughness = 2.5\n");
  RunConfig c2 = parse_config_text(echo(c));
  EXPECT_EQ(c2.moe.num_experts, 6);
  EXPECT_EQ(c2.moe.top_k, 3);
  EXPECT_DOUBLE_EQ(c2.ride_roughness, 2.5);
  EXPECT_EQ(echo(c), echo(c2));
}

TEST(Config, RideSpecProfileStaysFeasible) {
  RunConfig c = parse_config_text(
      "ride.plan = turn,4.2,180,5\n"  // 5.95 m/s^2 centripetal, near the cap
      "ride.speed_spread = 0.3\n");
  for (int i = 0; i < 20; ++i) {
    sim::RideSpec spec = ride_spec_for(c, i);
    EXPECT_NO_THROW(spec.validate()) << "ride " << i;
  }
}
