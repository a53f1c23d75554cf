#pragma once

// Synthetic preference oracle, pairwise comparison sets and the
// newline-delimited preference file shared with the labeling service.

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "deskalign/policy.hpp"
#include "deskalign/trajectory.hpp"

namespace deskalign::prefs {

/// Lexicographic: category (2 target pad, 1 other pad, 0 none), then -duration.
struct RankKey {
  int category = 0;
  int tiebreak = 0;
  friend auto operator<=>(const RankKey&, const RankKey&) = default;
};

RankKey rank_key(const Trajectory& traj, arena::PadId target);

enum class PairSource { Synthetic, Human };
std::string source_name(PairSource s);
PairSource parse_source(const std::string& s);

struct PreferencePair {
  std::uint64_t pair_id = 0;
  std::uint64_t winner = 0;
  std::uint64_t loser = 0;
  PairSource source = PairSource::Synthetic;
  arena::PadId target = arena::PadId::Left;
  std::string timestamp;  // empty for synthetic pairs

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

using PreferenceSet = std::vector<PreferencePair>;

/// How `cap` is interpreted by build_pairs.
enum class Subsample {
  Pairs,         // exactly `cap` pairs drawn uniformly from all strict pairs
  Trajectories,  // all strict pairs among `cap` uniformly drawn trajectories
};

/// Every unordered pair with strictly different keys, winner first, in
/// (i, j) input order with i < j. Pair ids are positions in the result.
PreferenceSet build_pairs(const TrajectorySet& trajs, arena::PadId target, std::optional<std::size_t> cap = std::nullopt,
                          std::uint64_t seed = 0, Subsample mode = Subsample::Pairs);

/// Policy rollouts for reward-model training and held-out evaluation. Train
/// ids are 0..n_train-1, eval ids follow; the two sets use separate seed streams.
std::pair<TrajectorySet, TrajectorySet> collect_rollouts(const policy::PolicyCheckpoint& ckpt, const arena::ArenaSpec& spec,
                                                         int n_train = 1000, int n_eval = 1400, double temperature = 1.0,
                                                         std::uint64_t seed = 0);

// ---- preference file ----------------------------------------------------------------
//
// One JSON object per line:
//   {"pair_id":7,"winner":12,"loser":40,"source":"human","target":"Left",
//    "timestamp":"2024-05-01T10:00:00Z","verdict":"A"}
// "verdict" is optional and only written by the labeling service; a verdict
// of "equal" records a tie, which carries no preference.

nlohmann::json pair_to_json(const PreferencePair& p);
void write_preferences(const std::string& path, const PreferenceSet& pairs);
/// Reads every record as written (ties are rejected here).
PreferenceSet read_preferences(const std::string& path);

/// Human labels: "equal" verdicts skipped, repeated (winner, loser) records
/// kept once, contradictory orientations both kept. When `known_ids` is
/// given, a record naming any other trajectory is an error. Errors are
/// reported as "path:line: message".
PreferenceSet ingest_labels(const std::string& path, const std::unordered_set<std::uint64_t>* known_ids = nullptr);

std::unordered_set<std::uint64_t> trajectory_ids(const TrajectorySet& trajs);

}  // namespace deskalign::prefs
