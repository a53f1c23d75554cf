#pragma once

// Aligning a fine-tuned policy to a reward model: an optional round of
// behavioural cloning on its own best-scoring rollouts, then undiscounted
// REINFORCE on whole-episode returns.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "deskalign/policy.hpp"
#include "deskalign/rewardmodel.hpp"

namespace deskalign::align {

struct PrefFTConfig {
  bool enabled = false;
  double fraction = 0.2;  // top share of trajectories kept, rounded up
  double lr = 1e-5;
  int updates = 1000;
  int batch = 32;
  int rollouts = 1000;  // drawn when align() is given no trajectories
};

struct AlignConfig {
  int updates = 600;
  int batch_episodes = 16;
  double lr = 3e-4;
  policy::Scope scope = policy::Scope::HeadOnly;
  double beta = 0.0;   // KL weight toward the starting policy
  double gamma = 1.0;  // only 1 is supported: returns are whole-episode scores
  bool baseline = false;  // subtract the batch-mean return
  double temperature = 1.0;
  arena::PadId target = arena::PadId::Left;  // for success statistics only
  PrefFTConfig pref_ft;
  std::uint64_t seed = 0;
};

void validate(const AlignConfig& cfg);

struct CurvePoint {
  int update = 0;
  double mean_reward = 0.0;      // batch mean normalized reward
  double batch_success = 0.0;    // share of this batch reaching the target pad
  double rolling_success = 0.0;  // over the last kRollingWindow updates' episodes
  int dropped = 0;
};
inline constexpr int kRollingWindow = 20;

using AlignmentCurve = std::vector<CurvePoint>;
void write_curve_csv(const std::string& path, const AlignmentCurve& curve);
AlignmentCurve read_curve_csv(const std::string& path);

/// BC hyperparameters used for preference fine-tuning.
policy::BCHyper pref_ft_hyper(const PrefFTConfig& cfg);

/// Indices (in input order) of the top ceil(fraction * n) trajectories by
/// normalized reward, ties going to the smaller trajectory id.
std::vector<std::size_t> select_top(const rm::RewardModel& rm, const TrajectorySet& trajs, double fraction);

policy::PolicyCheckpoint preference_finetune(const policy::PolicyCheckpoint& ckpt, const rm::RewardModel& rm, const TrajectorySet& trajs,
                                     const AlignConfig& cfg);

struct Episode {
  const Trajectory* traj;
  double ret;
};

/// -(1/B) sum_e R_e sum_t log pi(a_t) + beta (1/B) sum_e sum_t KL(pi || pi_ref).
/// `ref` is required when beta > 0.
tn::Var reinforce_loss(const policy::PolicyCheckpoint& ckpt, std::span<const Episode> episodes, const AlignConfig& cfg,
                       const policy::PolicyCheckpoint* ref);

/// One AdamW step on the configured scope. The caller keeps `opt` across
/// updates; gradient clipping and weight decay are off.
void reinforce_batch_update(policy::PolicyCheckpoint& ckpt, std::span<const Episode> episodes, const AlignConfig& cfg,
                            const policy::PolicyCheckpoint* ref, tn::OptimizerState& opt);

tn::OptimizerState make_optimizer(const AlignConfig& cfg);

struct AlignResult {
  policy::PolicyCheckpoint policy;
  AlignmentCurve curve;
  std::optional<policy::PolicyCheckpoint> after_pref_ft;
};

/// Hook to inject rollout failures in tests; returns true to drop the episode.
using FaultHook = std::function<bool(int update, int episode)>;

/// `pref_trajs` feeds preference fine-tuning; when absent and pref-FT is
/// enabled, cfg.pref_ft.rollouts fresh rollouts are drawn instead.
AlignResult align(const policy::PolicyCheckpoint& ckpt, const rm::RewardModel& rm, const arena::ArenaSpec& spec, const AlignConfig& cfg,
                  const TrajectorySet* pref_trajs = nullptr, const FaultHook& fault = nullptr);

}  // namespace deskalign::align
