#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "deskalign/arena.hpp"
#include "deskalign/tensor.hpp"

namespace deskalign {

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  friend bool operator==(const Pose&, const Pose&) = default;
};

enum class TrajectorySource : std::uint8_t { Rollout, Demo };

/// Per-step policy trunk outputs recorded while the trajectory was produced.
/// `trunk_hash` identifies the exact trunk parameters that computed them.
struct FeatureCache {
  std::uint64_t trunk_hash = 0;
  tn::Tensor values;  // duration x dim
};

/// Observations are stored as fixed-point thousandths, which is also the
/// precision the policy sees, so a trajectory read back from disk feeds the
/// model bit-identical inputs.
struct Trajectory {
  std::uint64_t id = 0;
  int spawn = 0;
  int obs_size = 0;
  int components = 3;
  std::vector<std::uint16_t> observations;  // duration * obs_size
  std::vector<std::uint8_t> actions;        // duration * components
  std::vector<Pose> poses;                  // duration + 1: pose at each observation, then the final pose
  arena::Outcome outcome;
  TrajectorySource source = TrajectorySource::Rollout;
  std::optional<arena::PadId> target;  // intended pad of a scripted demo
  std::shared_ptr<const FeatureCache> features;  // not serialized

  int duration() const { return outcome.duration; }
  std::span<const std::uint16_t> observation(int t) const {
    return {observations.data() + static_cast<std::size_t>(t) * obs_size, static_cast<std::size_t>(obs_size)};
  }
  std::vector<double> observation_values(int t) const;
  std::span<const std::uint8_t> action(int t) const {
    return {actions.data() + static_cast<std::size_t>(t) * components, static_cast<std::size_t>(components)};
  }
  arena::Action action_struct(int t) const;

  /// Appends one (observation, action) step taken at `pose`.
  void push_step(const arena::Observation& obs, const arena::Action& action, const Pose& pose);

  /// Throws when lengths disagree with the duration.
  void check() const;
};

using TrajectorySet = std::vector<Trajectory>;

std::uint16_t quantize_unit(double v);
inline double dequantize_unit(std::uint16_t q) { return q / 1000.0; }
/// Observation values rounded to the stored fixed-point precision.
std::vector<double> quantized_values(const arena::Observation& obs);

/// Counts in Left, Middle, Right, Timeout order.
std::array<int, 4> outcome_counts(std::span<const Trajectory> trajs);

struct Dataset {
  TrajectorySet trajectories;
  nlohmann::json metadata = nlohmann::json::object();
};

// ---- files ------------------------------------------------------------------
//
// Trajectory file: one JSON object per line with keys
//   id, spawn, outcome, duration, source, target, components, obs_size,
//   obs      per step, flattened grid as sparse [index, thousandths, ...] pairs
//   actions  per step, bucket list
//   poses    duration + 1 entries of [x, y, heading]
// Dataset metadata goes to "<path>.meta.json".

nlohmann::json trajectory_to_json(const Trajectory& t);
Trajectory trajectory_from_json(const nlohmann::json& j);

void write_trajectories(const std::string& path, std::span<const Trajectory> trajs);
TrajectorySet read_trajectories(const std::string& path);
void write_dataset(const std::string& path, const Dataset& ds);
Dataset read_dataset(const std::string& path);

/// Playback lines: {"step","x","y","heading","actions"}, one per step plus a
/// final pose line with an empty action list.
void write_playback(const std::string& path, const Trajectory& t);
nlohmann::json playback_track(const Trajectory& t);

nlohmann::json arena_to_json(const arena::ArenaSpec& spec);
arena::ArenaSpec arena_from_json(const nlohmann::json& j);

}  // namespace deskalign
