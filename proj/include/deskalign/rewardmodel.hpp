#pragma once

// Bradley-Terry reward model over whole trajectories.
//
// Frozen per-step features (either the trunk output of a policy or a seeded
// random projection of the raw observation) pass through a small per-step
// MLP to a few values per step; those are concatenated over T_max steps and
// a second MLP maps them to one scalar return.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "deskalign/policy.hpp"
#include "deskalign/prefs.hpp"

namespace deskalign::rm {

enum class EncoderKind { AgentFrozen, RandomProjection };
std::string kind_name(EncoderKind k);  // "agent" | "random"
EncoderKind parse_kind(const std::string& s);

struct Encoder {
  EncoderKind kind = EncoderKind::RandomProjection;
  std::string policy_id;  // AgentFrozen
  std::uint64_t seed = 0;  // RandomProjection
  int dim = 32;            // RandomProjection output width

  std::shared_ptr<const policy::PolicyCheckpoint> policy;
  tn::Tensor projection;  // [obs_size, dim]
  tn::Tensor pad_row;     // feature of a padding step

  int feature_dim() const;
};

Encoder agent_encoder(std::shared_ptr<const policy::PolicyCheckpoint> policy);
Encoder random_projection(int obs_size, std::uint64_t seed, int dim = 32);

struct RMConfig {
  int t_max = 100;
  int step_hidden = 32;
  int step_out = 3;
  int head_hidden = 32;
};

/// [t_max, feature_dim] features; rows past the duration hold the padding
/// feature (an all-zero observation, with a start-action token for the agent).
tn::Tensor trajectory_features(const Encoder& enc, const Trajectory& traj, int t_max = 100);

struct RewardModel {
  Encoder encoder;
  RMConfig config;
  tn::ParameterSet params;
  std::optional<double> r_min, r_max;
};

/// Output layer starts at zero, so a fresh model scores every trajectory 0.
RewardModel init_reward_model(Encoder enc, const RMConfig& cfg, std::uint64_t seed);

/// Raw returns for a stack of feature matrices, [n, 1].
tn::Var forward(const RewardModel& rm, const tn::Var& stacked_features, std::size_t n);

double raw_reward(const RewardModel& rm, const Trajectory& traj);
std::vector<double> raw_rewards(const RewardModel& rm, const TrajectorySet& trajs);

/// mean_pairs -log sigmoid(r_w - r_l) + l2 * mean(r^2) over all winner and loser outputs.
tn::Var bt_loss(const tn::Var& r_winners, const tn::Var& r_losers, double l2);

struct RMHyper {
  double lr = 1e-4;
  int minibatch = 256;
  int epochs = 200;
  double l2 = 0.1;
  /// Caps total optimizer steps (0 = no cap); large pair sets then get fewer epochs.
  int max_steps = 0;
  std::uint64_t seed = 0;
};

struct RMStats {
  std::vector<double> losses;  // per step
  int epochs_run = 0;
};

/// Trains the MLPs only; encoders stay frozen. Records r_min/r_max over every
/// trajectory in `trajs`.
RewardModel train_reward_model(const prefs::PreferenceSet& pairs, const TrajectorySet& trajs, Encoder enc, const RMHyper& hyper,
                               const RMConfig& cfg = {}, RMStats* stats = nullptr);

/// clamp((raw - r_min) / (r_max - r_min), 0, 1).
double normalize(const RewardModel& rm, double raw);
double normalized_reward(const RewardModel& rm, const Trajectory& traj);

/// Fraction of pairs whose winner scores higher; exact ties count one half.
double accuracy(const RewardModel& rm, const prefs::PreferenceSet& pairs, const TrajectorySet& trajs);
double accuracy_from_rewards(const prefs::PreferenceSet& pairs, const std::unordered_map<std::uint64_t, double>& raw);

/// Reward model file: checkpoint container whose header describes the
/// encoder, layer sizes and extrema. An agent encoder needs its policy back.
void write_reward_model(const std::string& path, const RewardModel& rm);
RewardModel read_reward_model(const std::string& path, std::shared_ptr<const policy::PolicyCheckpoint> policy = nullptr);
/// Encoder descriptor stored in a reward-model file.
nlohmann::json read_encoder_descriptor(const std::string& path);

struct SweepRow {
  std::string kind;
  std::size_t comparisons = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};
/// "kind,comparisons,seed,accuracy" header then one row per model.
void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);
std::vector<SweepRow> read_sweep_csv(const std::string& path);

}  // namespace deskalign::rm
