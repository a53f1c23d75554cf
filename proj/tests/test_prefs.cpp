#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "deskalign/prefs.hpp"

using namespace deskalign;
using namespace deskalign::prefs;
using arena::PadId;

namespace {

Trajectory outcome_only(std::uint64_t id, std::optional<PadId> pad, int duration) {
  Trajectory t;
  t.id = id;
  t.outcome = arena::Outcome{pad, duration};
  return t;
}

Trajectory random_outcome(std::uint64_t id, Rng& rng, int max_duration = 100) {
  const auto k = rng.below(4);
  std::optional<PadId> pad;
  if (k < 3) pad = static_cast<PadId>(k);
  return outcome_only(id, pad, 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_duration))));
}

std::string temp_path(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace

TEST(RankKey, ShorterSuccessRanksHigher) {
  EXPECT_GT(rank_key(outcome_only(0, PadId::Left, 40), PadId::Left), rank_key(outcome_only(1, PadId::Left, 60), PadId::Left));
}

TEST(RankKey, TargetPadBeatsOtherPadBeatsNone) {
  EXPECT_EQ(rank_key(outcome_only(0, PadId::Left, 90), PadId::Left).category, 2);
  EXPECT_EQ(rank_key(outcome_only(0, PadId::Right, 10), PadId::Left).category, 1);
  EXPECT_EQ(rank_key(outcome_only(0, std::nullopt, 100), PadId::Left).category, 0);
  // Category dominates duration.
  EXPECT_GT(rank_key(outcome_only(0, PadId::Left, 90), PadId::Left), rank_key(outcome_only(1, PadId::Right, 10), PadId::Left));
  EXPECT_GT(rank_key(outcome_only(0, PadId::Middle, 99), PadId::Left), rank_key(outcome_only(1, std::nullopt, 100), PadId::Left));
}

TEST(RankKey, EqualTimeoutsTie) {
  EXPECT_EQ(rank_key(outcome_only(0, std::nullopt, 100), PadId::Right), rank_key(outcome_only(1, std::nullopt, 100), PadId::Right));
}

TEST(RankKey, StrictOrderIsTransitiveAndAntisymmetric) {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const auto target = static_cast<PadId>(rng.below(3));
    // Short durations make ties and equal categories common.
    const auto a = rank_key(random_outcome(0, rng, 4), target);
    const auto b = rank_key(random_outcome(1, rng, 4), target);
    const auto c = rank_key(random_outcome(2, rng, 4), target);
    ASSERT_FALSE(a > b && b > a);
    ASSERT_EQ(a > b, b < a);
    if (a > b && b > c) ASSERT_GT(a, c);
    if (a >= b && b >= c) ASSERT_GE(a, c);
    ASSERT_EQ(a == b, !(a < b) && !(b < a));
  }
}

TEST(BuildPairs, DistinctKeysGiveAllPairs) {
  TrajectorySet t{outcome_only(0, PadId::Left, 10), outcome_only(1, PadId::Left, 20), outcome_only(2, PadId::Right, 5),
                  outcome_only(3, std::nullopt, 100)};
  const auto p = build_pairs(t, PadId::Left);
  EXPECT_EQ(p.size(), 6u);
  for (const auto& pair : p) {
    EXPECT_EQ(pair.source, PairSource::Synthetic);
    EXPECT_EQ(pair.target, PadId::Left);
  }
  EXPECT_EQ(p[0], (PreferencePair{0, 0, 1, PairSource::Synthetic, PadId::Left, ""}));
}

TEST(BuildPairs, TiesExcluded) {
  TrajectorySet t{outcome_only(0, std::nullopt, 100), outcome_only(1, std::nullopt, 100)};
  EXPECT_TRUE(build_pairs(t, PadId::Left).empty());
  EXPECT_THROW(build_pairs({t[0]}, PadId::Left), std::invalid_argument);
}

TEST(BuildPairs, MatchesBruteForceDoubleLoop) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    TrajectorySet trajs;
    for (std::uint64_t i = 0; i < 200; ++i) trajs.push_back(random_outcome(1000 + i, rng, 30));
    const auto target = static_cast<PadId>(seed % 3);

    std::set<std::pair<std::uint64_t, std::uint64_t>> brute;
    for (const auto& a : trajs) {
      for (const auto& b : trajs) {
        if (rank_key(a, target) > rank_key(b, target)) brute.insert({a.id, b.id});
      }
    }
    std::set<std::pair<std::uint64_t, std::uint64_t>> built;
    for (const auto& p : build_pairs(trajs, target)) {
      EXPECT_TRUE(built.insert({p.winner, p.loser}).second);
      EXPECT_EQ(built.count({p.loser, p.winner}), 0u);
    }
    EXPECT_EQ(built, brute);
  }
}

TEST(BuildPairs, ThousandWithoutTiesGivesFullCount) {
  TrajectorySet trajs;
  // Distinct (category, duration) keys: durations are unique within a category.
  for (std::uint64_t i = 0; i < 1000; ++i) {
    std::optional<PadId> pad;
    if (i % 4 < 3) pad = static_cast<PadId>(i % 4);
    trajs.push_back(outcome_only(i, pad, 1 + static_cast<int>(i)));
  }
  EXPECT_EQ(build_pairs(trajs, PadId::Left).size(), 499500u);
}

TEST(BuildPairs, PairCapIsExactSeededSubset) {
  Rng rng(3);
  TrajectorySet trajs;
  for (std::uint64_t i = 0; i < 60; ++i) trajs.push_back(random_outcome(i, rng));
  const auto all = build_pairs(trajs, PadId::Middle);
  const auto a = build_pairs(trajs, PadId::Middle, 100, 7);
  const auto b = build_pairs(trajs, PadId::Middle, 100, 7);
  const auto c = build_pairs(trajs, PadId::Middle, 100, 8);
  ASSERT_EQ(a.size(), 100u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  std::set<std::pair<std::uint64_t, std::uint64_t>> full;
  for (const auto& p : all) full.insert({p.winner, p.loser});
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].pair_id, k);
    EXPECT_TRUE(full.count({a[k].winner, a[k].loser}));
  }
  EXPECT_THROW(build_pairs(trajs, PadId::Middle, all.size() + 1, 1), std::invalid_argument);
}

TEST(BuildPairs, TrajectoryLevelCapUsesAllPairsOfSubset) {
  TrajectorySet trajs;
  for (std::uint64_t i = 0; i < 50; ++i) trajs.push_back(outcome_only(i, PadId::Left, 1 + static_cast<int>(i)));
  const auto p = build_pairs(trajs, PadId::Left, 10, 4, Subsample::Trajectories);
  EXPECT_EQ(p.size(), 45u);
  std::set<std::uint64_t> ids;
  for (const auto& pair : p) {
    ids.insert(pair.winner);
    ids.insert(pair.loser);
  }
  EXPECT_EQ(ids.size(), 10u);
}

TEST(CollectRollouts, CountsDisjointIdsAndDeterminism) {
  policy::PolicyConfig cfg;
  cfg.layers = 1;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.mlp_hidden = 8;
  cfg.head_hidden = 8;
  cfg.context = 4;
  const auto ckpt = policy::init_policy(cfg, 1);
  const auto spec = arena::default_spec();
  auto [train, eval] = collect_rollouts(ckpt, spec, 1, 1, 1.0, 5);
  ASSERT_EQ(train.size(), 1u);
  ASSERT_EQ(eval.size(), 1u);
  EXPECT_NE(train[0].id, eval[0].id);
  auto [train2, eval2] = collect_rollouts(ckpt, spec, 1, 1, 1.0, 5);
  EXPECT_EQ(train[0].actions, train2[0].actions);
  EXPECT_EQ(eval[0].actions, eval2[0].actions);
  EXPECT_THROW(collect_rollouts(ckpt, spec, 0, 1, 1.0, 5), std::invalid_argument);
}

TEST(PreferenceFile, RoundTrip) {
  Rng rng(4);
  TrajectorySet trajs;
  for (std::uint64_t i = 0; i < 10; ++i) trajs.push_back(random_outcome(i, rng));
  const auto pairs = build_pairs(trajs, PadId::Right);
  const auto path = temp_path("deskalign_prefs.ndjson");
  write_preferences(path, pairs);
  EXPECT_EQ(read_preferences(path), pairs);
  std::filesystem::remove(path);
}

TEST(IngestLabels, ValidRecordsBecomeHumanPairs) {
  const auto path = temp_path("deskalign_labels_ok.ndjson");
  write_lines(path, {
                        R"({"pair_id":0,"winner":1,"loser":2,"source":"human","target":"Left","timestamp":"t0","verdict":"A"})",
                        R"({"pair_id":1,"winner":4,"loser":3,"source":"human","target":"Left","timestamp":"t1","verdict":"B"})",
                        R"({"pair_id":2,"winner":5,"loser":6,"source":"human","target":"Left","timestamp":"t2"})",
                    });
  const auto p = ingest_labels(path);
  ASSERT_EQ(p.size(), 3u);
  for (const auto& pair : p) EXPECT_EQ(pair.source, PairSource::Human);
  EXPECT_EQ(p[1].winner, 4u);
  EXPECT_EQ(p[1].timestamp, "t1");
  std::filesystem::remove(path);
}

TEST(IngestLabels, EqualSkippedDuplicatesDroppedContradictionsKept) {
  const auto path = temp_path("deskalign_labels_mixed.ndjson");
  write_lines(path, {
                        R"({"pair_id":0,"winner":1,"loser":2,"source":"human","target":"Left","timestamp":"","verdict":"equal"})",
                        R"({"pair_id":1,"winner":3,"loser":4,"source":"human","target":"Left","timestamp":""})",
                        R"({"pair_id":2,"winner":3,"loser":4,"source":"human","target":"Left","timestamp":""})",
                        "",
                        R"({"pair_id":3,"winner":4,"loser":3,"source":"human","target":"Left","timestamp":""})",
                    });
  const auto p = ingest_labels(path);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[0].winner, 3u);
  EXPECT_EQ(p[1].winner, 4u);
  std::filesystem::remove(path);

  write_lines(path, {R"({"pair_id":0,"winner":1,"loser":2,"source":"human","target":"Left","timestamp":"","verdict":"equal"})"});
  EXPECT_TRUE(ingest_labels(path).empty());
  std::filesystem::remove(path);
}

TEST(IngestLabels, ErrorsCarryLineNumbers) {
  const auto path = temp_path("deskalign_labels_bad.ndjson");
  const std::string good = R"({"pair_id":0,"winner":1,"loser":2,"source":"human","target":"Left","timestamp":""})";
  auto expect_error_at = [&](const std::vector<std::string>& lines, const std::string& where, const std::unordered_set<std::uint64_t>* known) {
    write_lines(path, lines);
    try {
      ingest_labels(path, known);
      ADD_FAILURE() << "expected an error";
    } catch (const std::runtime_error& e) {
      EXPECT_NE(std::string(e.what()).find(path + where), std::string::npos) << e.what();
    }
  };
  const std::unordered_set<std::uint64_t> known{1, 2};
  expect_error_at({good, R"({"pair_id":1,"winner":1,"loser":9,"source":"human","target":"Left","timestamp":""})"}, ":2:", &known);
  expect_error_at({good, good, "{not json"}, ":3:", nullptr);
  expect_error_at({R"({"pair_id":1,"winner":1,"loser":2,"source":"human","target":"Up","timestamp":""})"}, ":1:", nullptr);
  expect_error_at({R"({"pair_id":1,"winner":1,"loser":2,"source":"human","target":"Left","verdict":"C"})"}, ":1:", nullptr);
  expect_error_at({R"({"pair_id":1,"winner":1,"loser":1,"source":"human","target":"Left"})"}, ":1:", nullptr);
  std::filesystem::remove(path);
  EXPECT_THROW(ingest_labels(path), std::runtime_error);
}
