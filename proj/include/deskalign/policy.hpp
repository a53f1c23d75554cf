#pragma once

// Causal-transformer policy over (observation, previous action) tokens.
//
// token_t = LN(W_obs o_t + b) + sum_c E[c*K + a_{t-1,c}] + P[position]
// with a dedicated start row of E standing in for a_{-1}. Pre-LN GPT blocks,
// a final layer norm (the "trunk" output), then a one-hidden-layer GELU head
// producing components x buckets logits. Parameters named "head.*" form the
// head; everything else is the trunk.

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "deskalign/arena.hpp"
#include "deskalign/autodiff.hpp"
#include "deskalign/params.hpp"
#include "deskalign/trajectory.hpp"

namespace deskalign::policy {

struct PolicyConfig {
  int layers = 2;
  int dim = 64;
  int heads = 4;
  int mlp_hidden = 256;
  int head_hidden = 128;
  int context = 32;  // H
  int components = 3;
  int buckets = 11;
  int view = 15;

  int obs_size() const { return view * view * 3; }
  int action_outputs() const { return components * buckets; }
  int start_token() const { return components * buckets; }

  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

/// Throws std::invalid_argument on a violated invariant.
void validate(const PolicyConfig& cfg);

/// "small", "medium" (the default config) or "large".
PolicyConfig preset(const std::string& name);

nlohmann::json config_to_json(const PolicyConfig& cfg);
PolicyConfig config_from_json(const nlohmann::json& j);

struct Provenance {
  std::string stage;
  std::string parent;   // checkpoint id or empty
  std::string dataset;  // dataset id or empty
  std::uint64_t seed = 0;
};

struct PolicyCheckpoint {
  PolicyConfig config;
  tn::ParameterSet params;
  Provenance provenance;

  /// Content hash of config and parameter values.
  std::string id() const;
  /// Hash of the trunk (non-head) parameter values; tags cached features.
  std::uint64_t trunk_hash() const;
};

inline bool is_head_param(const std::string& name) { return name.rfind("head.", 0) == 0; }

PolicyCheckpoint init_policy(const PolicyConfig& cfg, std::uint64_t seed);

void write_policy(const std::string& path, const PolicyCheckpoint& ckpt);
PolicyCheckpoint read_policy(const std::string& path);

// ---- inference ------------------------------------------------------------------

/// Observation embedding z_t: flatten -> linear -> layer norm.
std::vector<double> encode(const PolicyCheckpoint& ckpt, std::span<const double> obs);

/// Up to H (embedding, previous action) slots, newest last.
class ContextBuffer {
 public:
  explicit ContextBuffer(int capacity) : capacity_(capacity) {}

  /// Appends a step; `previous` is the action taken before this observation,
  /// empty for the first step of an episode.
  void push(std::vector<double> embedding, const std::optional<arena::Action>& previous);
  void clear() { slots_.clear(); }

  std::size_t size() const { return slots_.size(); }
  bool empty() const { return slots_.empty(); }
  int capacity() const { return capacity_; }

  struct Slot {
    std::vector<double> embedding;
    std::optional<arena::Action> previous;
  };
  const std::deque<Slot>& slots() const { return slots_; }

 private:
  int capacity_;
  std::deque<Slot> slots_;
};

/// Trunk output (final layer norm) for the newest context step.
std::vector<double> trunk_features(const PolicyCheckpoint& ckpt, const ContextBuffer& ctx);
/// Head logits (components*buckets) for one trunk feature row.
std::vector<double> head_logits(const PolicyCheckpoint& ckpt, std::span<const double> features);
/// components x buckets logits for the newest context step.
tn::Tensor logits(const PolicyCheckpoint& ckpt, const ContextBuffer& ctx);

/// Samples each component independently from softmax(row / temperature), or
/// takes the per-row argmax when `greedy`.
arena::Action sample_action(std::span<const double> logits, int components, int buckets, double temperature, Rng& rng,
                            bool greedy = false);
arena::Action act(const PolicyCheckpoint& ckpt, const ContextBuffer& ctx, double temperature, Rng& rng, bool greedy = false);

// ---- differentiable whole-trajectory passes -------------------------------------------

/// Trunk features for every step of `traj`, each computed from the sliding
/// window of the last H steps, exactly as during a rollout. Shape [d, dim].
tn::Var trajectory_trunk(const PolicyCheckpoint& ckpt, const Trajectory& traj);
/// Head applied to a [n, dim] feature matrix: [n, components*buckets].
tn::Var apply_head(const PolicyCheckpoint& ckpt, const tn::Var& features);
/// Features for `traj`, from its cache when it was produced by this trunk.
tn::Tensor cached_or_computed_features(const PolicyCheckpoint& ckpt, const Trajectory& traj);
/// Attaches freshly computed features to every trajectory missing a matching cache.
void ensure_features(const PolicyCheckpoint& ckpt, TrajectorySet& trajs);

// ---- rollouts ---------------------------------------------------------------------

struct RolloutOptions {
  double temperature = 1.0;
  bool greedy = false;
  bool record_features = true;
};

/// One episode from an empty context. `seed` fixes the spawn (when not
/// given) and every sampling decision.
Trajectory rollout(const PolicyCheckpoint& ckpt, const arena::ArenaSpec& spec, std::optional<int> spawn, std::uint64_t seed,
                   const RolloutOptions& opts = {});

/// Per-episode controller: sees the state and observation, returns an action.
using Controller = std::function<arena::Action(const arena::AgentState&, const arena::Observation&, Rng&)>;
Trajectory run_controller(const arena::ArenaSpec& spec, const Controller& controller, std::optional<int> spawn, std::uint64_t seed,
                          int components);

struct EvalReport {
  std::array<int, 4> counts{};                     // Left, Middle, Right, Timeout
  std::array<std::array<int, 4>, 4> per_spawn{};   // [spawn][outcome]
  double mean_duration = 0.0;
  int episodes = 0;
  TrajectorySet trajectories;

  double failure_rate() const { return episodes ? static_cast<double>(counts[3]) / episodes : 0.0; }
  double share(arena::PadId pad) const { return episodes ? static_cast<double>(counts[arena::pad_index(pad)]) / episodes : 0.0; }
  nlohmann::json summary() const;
};

EvalReport summarize(TrajectorySet trajs);

/// Episode i uses derive_seed(seed, i); spawns follow spec weights.
EvalReport evaluate(const PolicyCheckpoint& ckpt, const arena::ArenaSpec& spec, int episodes, double temperature,
                    std::uint64_t seed, bool greedy = false);
/// Same protocol for an arbitrary controller; `make` builds a fresh one per episode.
EvalReport evaluate(const std::function<Controller()>& make, const arena::ArenaSpec& spec, int episodes, std::uint64_t seed,
                    int components = 3);

// ---- behavioural cloning ------------------------------------------------------------

enum class Scope { Full, HeadOnly };
std::string scope_name(Scope s);
Scope parse_scope(const std::string& s);

struct BCHyper {
  double lr = 1e-4;
  int batch = 64;  // windows per update
  int updates = 3000;
  int warmup = 300;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  Scope scope = Scope::Full;
  bool filter_noops = false;

  static BCHyper pretrain() { return {}; }
  static BCHyper finetune() {
    BCHyper h;
    h.lr = 1e-5;
    h.batch = 32;
    h.updates = 1500;
    h.warmup = 200;
    return h;
  }
};

struct BCStats {
  std::vector<double> losses;  // per update, mean per target step
};

/// A minibatch of H-step windows. Windows shorter than H (trajectory end) are
/// padded on the right; padded rows carry no target. Returns the mean over
/// target rows of the summed per-component cross-entropy.
struct Window {
  std::size_t traj;
  int start;
};
tn::Var bc_loss(const PolicyCheckpoint& ckpt, const TrajectorySet& data, std::span<const Window> windows, bool filter_noops);
/// Same objective from precomputed per-trajectory trunk features.
tn::Var bc_loss_head(const PolicyCheckpoint& ckpt, const TrajectorySet& data, std::span<const tn::Tensor> features,
                     std::span<const Window> windows, bool filter_noops);

std::vector<Window> sample_windows(const TrajectorySet& data, int count, int context, Rng& rng);

PolicyCheckpoint train_bc(const TrajectorySet& data, const BCHyper& hyper, const PolicyCheckpoint& init, std::uint64_t seed,
                          BCStats* stats = nullptr);
PolicyCheckpoint train_bc(const TrajectorySet& data, const BCHyper& hyper, const PolicyConfig& cfg, std::uint64_t seed,
                          BCStats* stats = nullptr);

/// Linear warmup factor for update `step` (0-based).
inline double warmup_scale(int step, int warmup) { return warmup > 0 && step < warmup ? static_cast<double>(step + 1) / warmup : 1.0; }

}  // namespace deskalign::policy
