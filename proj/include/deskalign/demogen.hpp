#pragma once

// Scripted demonstrations: a waypoint-following expert, the large noisy
// pre-training corpus and the small curated successful set.

#include <array>
#include <cstdint>
#include <optional>

#include "deskalign/arena.hpp"
#include "deskalign/random.hpp"
#include "deskalign/trajectory.hpp"

namespace deskalign::demogen {

struct DemoConfig {
  std::array<double, 3> pad_mix{0.25, 0.50, 0.25};
  double novice_fraction = 0.2;
  double noise_eps = 0.15;
  std::uint64_t seed = 0;
};

void validate(const DemoConfig& cfg);

/// Per-pad spawn weights for curated generation; row = pad (Left, Middle,
/// Right), column = spawn index.
using SpawnBias = std::array<std::array<double, 4>, 3>;

/// Right-pad demonstrations almost never start from the two right spawns.
SpawnBias right_from_left_bias();

struct CuratedConfig {
  int per_pad = 100;
  double noise_eps = 0.05;
  std::optional<SpawnBias> spawn_bias;
  /// Attempts allowed per requested trajectory before giving up.
  int retries_per_demo = 50;
};

/// Expert clearance kept from walls and the boundary when planning.
inline constexpr double kPlanClearance = 0.6;

/// Next point the expert heads for: the pad centre when visible, otherwise
/// the cheapest detour point around a blocking wall end.
arena::Vec2 next_waypoint(const arena::ArenaSpec& spec, arena::Vec2 position, arena::PadId target);

/// Expert action toward `target` with per-component noise. Consumes exactly
/// `components` uniform draws for the noise decisions plus one bucket draw per
/// replaced component.
arena::Action scripted_action(const arena::ArenaSpec& spec, const arena::AgentState& state, arena::PadId target,
                              double noise_eps, Rng& rng, int components = 3);

/// Uniformly random buckets in every component.
arena::Action random_action(int components, int buckets, Rng& rng);

/// Runs one expert (target set) or novice (target empty) episode.
Trajectory run_episode(const arena::ArenaSpec& spec, int spawn, std::optional<arena::PadId> target, double noise_eps,
                       Rng& rng, int components = 3);

Dataset generate_pretrain(const arena::ArenaSpec& spec, const DemoConfig& cfg, int n, std::uint64_t seed);

Dataset generate_curated(const arena::ArenaSpec& spec, const CuratedConfig& cfg, std::uint64_t seed);
inline Dataset generate_curated(const arena::ArenaSpec& spec, int per_pad, std::uint64_t seed) {
  CuratedConfig cfg;
  cfg.per_pad = per_pad;
  return generate_curated(spec, cfg, seed);
}

}  // namespace deskalign::demogen
