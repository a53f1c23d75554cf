#include <gtest/gtest.h>

#include <cmath>

#include "deskalign/arena.hpp"
#include "deskalign/random.hpp"

using namespace deskalign;
using namespace deskalign::arena;

namespace {

Action act(int strafe, int forward, int turn) { return Action{{strafe, forward, turn}}; }

AgentState at(double x, double y, double heading = 0.0) {
  AgentState s;
  s.position = {x, y};
  s.heading = heading;
  return s;
}

}  // namespace

TEST(Reset, UsesRequestedSpawn) {
  const auto spec = default_spec();
  auto r = reset(spec, 0, 1);
  EXPECT_EQ(r.state.position, spec.spawns[0]);
  EXPECT_EQ(r.state.step_count, 0);
  EXPECT_EQ(r.state.heading, 0.0);
  EXPECT_EQ(r.observation, render_observation(spec, r.state));
}

TEST(Reset, SeededSpawnIsDeterministic) {
  const auto spec = default_spec();
  for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_EQ(reset(spec, std::nullopt, seed).state, reset(spec, std::nullopt, seed).state);
}

TEST(Reset, DegenerateWeightsAlwaysPickLastSpawn) {
  auto spec = default_spec();
  spec.spawn_weights = {0, 0, 0, 1};
  for (std::uint64_t seed = 0; seed < 100; ++seed) EXPECT_EQ(reset(spec, std::nullopt, seed).state.position, spec.spawns[3]);
}

TEST(Reset, UniformWeightsReachEverySpawn) {
  const auto spec = default_spec();
  std::array<int, 4> hits{};
  for (std::uint64_t seed = 0; seed < 400; ++seed) ++hits[static_cast<std::size_t>(sample_spawn(spec, seed))];
  for (int h : hits) EXPECT_GT(h, 60);
}

TEST(Reset, RejectsBadSpawn) {
  const auto spec = default_spec();
  EXPECT_THROW(reset(spec, 4, 0), std::out_of_range);
  EXPECT_THROW(reset(spec, -1, 0), std::out_of_range);
}

TEST(Reset, RandomizedHeadingInRange) {
  auto spec = default_spec();
  spec.randomize_heading = true;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const double h = reset(spec, 1, seed).state.heading;
    EXPECT_GE(h, -M_PI);
    EXPECT_LT(h, M_PI);
  }
}

TEST(Step, NeutralActionIsFixpoint) {
  const auto spec = default_spec();
  const AgentState s = at(9.3, 6.1, 0.7);
  auto r = step(spec, s, act(5, 5, 5));
  EXPECT_EQ(r.state.position, s.position);
  EXPECT_EQ(r.state.heading, s.heading);
  EXPECT_EQ(r.state.step_count, 1);
}

TEST(Step, FullForwardMovesPointTwoAlongHeading) {
  const auto spec = default_spec();
  auto r = step(spec, at(12, 5), act(5, 10, 5));
  EXPECT_NEAR(r.state.position.x, 12.0, 1e-15);
  EXPECT_NEAR(r.state.position.y, 5.2, 1e-12);
  EXPECT_FALSE(r.outcome);
}

TEST(Step, BucketValuesSpanUnitInterval) {
  for (int b = 0; b < 11; ++b) EXPECT_NEAR(bucket_value(b, 11), (b - 5) / 5.0, 1e-15);
  for (int b = 0; b < 11; ++b) EXPECT_EQ(value_bucket(bucket_value(b, 11), 11), b);
}

TEST(Step, ReachesMiddlePadFromHalfUnitAway) {
  const auto spec = default_spec();
  auto r = step(spec, at(12, 13.5), act(5, 10, 5));
  ASSERT_TRUE(r.outcome);
  EXPECT_EQ(r.outcome->pad, PadId::Middle);
  EXPECT_EQ(r.outcome->duration, 1);
  EXPECT_TRUE(r.state.finished);
  EXPECT_THROW(step(spec, r.state, act(5, 5, 5)), std::logic_error);
}

TEST(Step, TurnRotatesCounterClockwise) {
  const auto spec = default_spec();
  auto r = step(spec, at(12, 5), act(5, 5, 10));
  EXPECT_NEAR(r.state.heading, M_PI * 0.1, 1e-15);
  // Moving forward after a quarter turn heads toward -x.
  AgentState s = at(12, 5, M_PI / 2);
  auto m = step(spec, s, act(5, 10, 5));
  EXPECT_NEAR(m.state.position.x, 11.8, 1e-12);
  EXPECT_NEAR(m.state.position.y, 5.0, 1e-12);
}

TEST(Step, TimeoutAtMaxSteps) {
  auto spec = default_spec();
  spec.max_steps = 3;
  AgentState s = at(12, 5);
  for (int i = 0; i < 2; ++i) {
    auto r = step(spec, s, act(5, 5, 5));
    EXPECT_FALSE(r.outcome);
    s = r.state;
  }
  auto r = step(spec, s, act(5, 5, 5));
  ASSERT_TRUE(r.outcome);
  EXPECT_FALSE(r.outcome->pad);
  EXPECT_EQ(r.outcome->duration, 3);
}

TEST(Step, RejectsBadActions) {
  const auto spec = default_spec();
  EXPECT_THROW(step(spec, at(12, 5), act(5, 11, 5)), std::invalid_argument);
  EXPECT_THROW(step(spec, at(12, 5), act(-1, 5, 5)), std::invalid_argument);
  EXPECT_THROW(step(spec, at(12, 5), Action{{5, 5}}), std::invalid_argument);
}

TEST(Step, ExtraComponentsAreInert) {
  const auto spec = default_spec();
  auto a = step(spec, at(12, 5), Action{{3, 8, 6, 0, 10}});
  auto b = step(spec, at(12, 5), act(3, 8, 6));
  EXPECT_EQ(a.state, b.state);
}

TEST(Step, WallStopsAndSlides) {
  const auto spec = default_spec();
  // Just below the middle wall, pushing up and to the right.
  AgentState s = at(12, 10.9, 0.0);
  auto r = step(spec, s, act(10, 10, 5));
  EXPECT_LT(r.state.position.y, 11.0);
  EXPECT_NEAR(r.state.position.y, 11.0, 1e-5);
  EXPECT_NEAR(r.state.position.x, 12.2, 1e-12);
}

TEST(Step, BoundaryContains) {
  const auto spec = default_spec();
  auto r = step(spec, at(0.1, 0.1, M_PI), act(10, 10, 5));
  EXPECT_GT(r.state.position.x, 0.0);
  EXPECT_GT(r.state.position.y, 0.0);
}

TEST(Step, StrafeBucketMirrorsAboutHeadingAxis) {
  const auto spec = default_spec();
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const AgentState s = at(rng.uniform(8, 16), rng.uniform(4, 8), rng.uniform(-M_PI, M_PI));
    const int b = static_cast<int>(rng.below(11));
    const int f = static_cast<int>(rng.below(11));
    auto p = step(spec, s, act(b, f, 5)).state.position;
    auto q = step(spec, s, act(10 - b, f, 5)).state.position;
    const double fx = -std::sin(s.heading), fy = std::cos(s.heading);
    const double rx = std::cos(s.heading), ry = std::sin(s.heading);
    const double dpx = p.x - s.position.x, dpy = p.y - s.position.y;
    const double dqx = q.x - s.position.x, dqy = q.y - s.position.y;
    EXPECT_NEAR(dpx * fx + dpy * fy, dqx * fx + dqy * fy, 1e-12);
    EXPECT_NEAR(dpx * rx + dpy * ry, -(dqx * rx + dqy * ry), 1e-12);
  }
}

TEST(Step, FuzzNeverTunnelsOrEscapes) {
  const auto spec = default_spec();
  Rng rng(77);
  for (int episode = 0; episode < 300; ++episode) {
    AgentState s = reset(spec, static_cast<int>(rng.below(4)), 0).state;
    // Bias motion upward so the walls actually get hit.
    while (!s.finished) {
      Action a{{static_cast<int>(rng.below(11)), 4 + static_cast<int>(rng.below(7)), static_cast<int>(rng.below(11))}};
      auto r = step(spec, s, a);
      const Vec2 p0 = s.position, p1 = r.state.position, corner{p1.x, p0.y};
      constexpr int kSub = 64;
      for (int i = 0; i <= kSub; ++i) {
        const double u = static_cast<double>(i) / kSub;
        for (Vec2 q : {Vec2{p0.x + u * (corner.x - p0.x), p0.y}, Vec2{corner.x, p0.y + u * (p1.y - p0.y)}}) {
          ASSERT_GT(q.x, 0.0);
          ASSERT_LT(q.x, spec.width);
          ASSERT_GT(q.y, 0.0);
          ASSERT_LT(q.y, spec.height);
        }
      }
      ASSERT_FALSE(path_blocked(spec, p0, corner)) << "x leg crossed a wall";
      ASSERT_FALSE(path_blocked(spec, corner, p1)) << "y leg crossed a wall";
      ASSERT_LE(r.state.step_count, spec.max_steps);
      s = r.state;
    }
  }
}

TEST(Step, IdenticalInputsGiveIdenticalSequences) {
  const auto spec = default_spec();
  Rng ra(9), rb(9);
  auto run = [&](Rng& rng) {
    std::vector<Observation> obs;
    AgentState s = reset(spec, std::nullopt, 42).state;
    while (!s.finished) {
      auto r = step(spec, s, Action{{static_cast<int>(rng.below(11)), static_cast<int>(rng.below(11)), static_cast<int>(rng.below(11))}});
      obs.push_back(r.observation);
      s = r.state;
    }
    return obs;
  };
  EXPECT_EQ(run(ra), run(rb));
}

TEST(Render, EmptyInteriorIsBlank) {
  ArenaSpec spec = default_spec();
  spec.width = 80;
  spec.height = 80;
  auto obs = render_observation(spec, at(50, 50, 0.3));
  for (double v : obs.values) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(obs.values.size(), 15u * 15u * 3u);
}

TEST(Render, FacingBoundaryFillsUpperRows) {
  const auto spec = default_spec();
  auto obs = render_observation(spec, at(12, 15.5));
  // Rows 0..6 look 7..1 units ahead, beyond y = 16.
  for (int row = 0; row < 7; ++row) {
    for (int col = 0; col < 15; ++col) EXPECT_EQ(obs.at(row, col, 0), 1.0) << row << "," << col;
  }
  int blocked_below = 0;
  for (int row = 7; row < 15; ++row) {
    for (int col = 0; col < 15; ++col) blocked_below += obs.at(row, col, 0) > 0;
  }
  EXPECT_LT(blocked_below, 8 * 15);
}

TEST(Render, PadAndSpawnChannels) {
  const auto spec = default_spec();
  auto obs = render_observation(spec, at(12, 12.5));
  // Rows 6 and 5 sample 1 and 2 units ahead, both inside the Middle pad.
  EXPECT_NEAR(obs.at(6, 7, 1), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(obs.at(5, 7, 1), 2.0 / 3.0, 1e-15);
  auto at_spawn = render_observation(spec, at(spec.spawns[1].x, spec.spawns[1].y));
  EXPECT_EQ(at_spawn.at(7, 7, 2), 1.0);
  for (double v : at_spawn.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Render, RotationFollowsHeading) {
  const auto spec = default_spec();
  // Facing -x from near the left boundary: the boundary is ahead.
  auto obs = render_observation(spec, at(1.5, 8, M_PI / 2));
  for (int col = 0; col < 15; ++col) EXPECT_EQ(obs.at(0, col, 0), 1.0);
  // The bottom row looks 7 units behind, into open floor at x = 8.5.
  for (int col = 0; col < 15; ++col) EXPECT_EQ(obs.at(14, col, 0), 0.0);
}

TEST(Render, Deterministic) {
  const auto spec = default_spec();
  EXPECT_EQ(render_observation(spec, at(7.3, 9.9, 1.1)), render_observation(spec, at(7.3, 9.9, 1.1)));
}

TEST(PadHitTest, Basics) {
  const auto spec = default_spec();
  EXPECT_EQ(pad_hit_test(spec, {4, 14}), PadId::Left);
  EXPECT_EQ(pad_hit_test(spec, {12, 8}), std::nullopt);
  EXPECT_EQ(pad_hit_test(spec, {20, 13.0}), PadId::Right);
  EXPECT_EQ(pad_hit_test(spec, {20, 12.999}), std::nullopt);
}

TEST(PadHitTest, OverlapPrefersEarlierPad) {
  auto spec = default_spec();
  spec.pads[0].center = {11, 14};
  spec.pads[0].radius = 2;
  spec.pads[1].radius = 2;
  EXPECT_EQ(pad_hit_test(spec, {11.5, 14}), PadId::Left);
  // Order is by id, not by position in the list.
  std::swap(spec.pads[0], spec.pads[1]);
  EXPECT_EQ(pad_hit_test(spec, {11.5, 14}), PadId::Left);
}

TEST(Spec, ValidationCatchesViolations) {
  EXPECT_NO_THROW(validate(default_spec()));
  auto bad = default_spec();
  bad.spawn_weights = {0.5, 0.5, 0.5, 0.0};
  EXPECT_THROW(validate(bad), std::invalid_argument);
  bad = default_spec();
  bad.pads[1].id = PadId::Left;
  EXPECT_THROW(validate(bad), std::invalid_argument);
  bad = default_spec();
  bad.spawns[0] = {-1, 3};
  EXPECT_THROW(validate(bad), std::invalid_argument);
  bad = default_spec();
  bad.max_steps = 0;
  EXPECT_THROW(validate(bad), std::invalid_argument);
  bad = default_spec();
  bad.walls.push_back({0, 0, 1, 1});
  EXPECT_THROW(validate(bad), std::invalid_argument);
}

TEST(Angles, WrapIntoHalfOpenInterval) {
  EXPECT_EQ(wrap_angle(M_PI), -M_PI);
  EXPECT_NEAR(wrap_angle(3 * M_PI + 0.1), -M_PI + 0.1, 1e-12);
  EXPECT_NEAR(wrap_angle(-0.2), -0.2, 1e-15);
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double w = wrap_angle(rng.uniform(-50, 50));
    EXPECT_GE(w, -M_PI);
    EXPECT_LT(w, M_PI);
  }
}

TEST(Outcome, TagsRoundTrip) {
  for (const char* tag : {"Left", "Middle", "Right", "Timeout"}) EXPECT_EQ(outcome_tag(parse_outcome(tag, 7)), tag);
  EXPECT_THROW(parse_outcome("Up", 1), std::invalid_argument);
}
