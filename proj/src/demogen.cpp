#include "deskalign/demogen.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace deskalign::demogen {

using arena::PadId;
using arena::Vec2;
using nlohmann::json;

namespace {

constexpr double kEndOffset = 0.9;   // past the wall end, along the wall
constexpr double kSideOffset = 0.7;  // off the wall line, perpendicular
constexpr double kReached = 0.25;

double dist(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

bool visible(const arena::ArenaSpec& spec, Vec2 a, Vec2 b, double clearance) {
  return !arena::path_blocked(spec, a, b, clearance);
}

std::vector<Vec2> detour_points(const arena::ArenaSpec& spec) {
  std::vector<Vec2> pts;
  for (const auto& w : spec.walls) {
    for (double side : {-1.0, 1.0}) {
      if (w.vertical()) {
        const double lo = std::min(w.y0, w.y1), hi = std::max(w.y0, w.y1);
        pts.push_back({w.x0 + side * kSideOffset, lo - kEndOffset});
        pts.push_back({w.x0 + side * kSideOffset, hi + kEndOffset});
      } else {
        const double lo = std::min(w.x0, w.x1), hi = std::max(w.x0, w.x1);
        pts.push_back({lo - kEndOffset, w.y0 + side * kSideOffset});
        pts.push_back({hi + kEndOffset, w.y0 + side * kSideOffset});
      }
    }
  }
  return pts;
}

json counts_json(std::span<const Trajectory> trajs) {
  const auto c = outcome_counts(trajs);
  return json{{"Left", c[0]}, {"Middle", c[1]}, {"Right", c[2]}, {"Timeout", c[3]}};
}

const arena::Pad& pad_of(const arena::ArenaSpec& spec, PadId id) {
  for (const auto& p : spec.pads) {
    if (p.id == id) return p;
  }
  throw std::invalid_argument("arena has no pad " + arena::pad_name(id));
}

}  // namespace

void validate(const DemoConfig& cfg) {
  double total = 0.0;
  for (double w : cfg.pad_mix) {
    if (!(w >= 0.0)) throw std::invalid_argument("demogen: pad_mix weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("demogen: pad_mix must sum to 1");
  if (!(cfg.novice_fraction >= 0.0 && cfg.novice_fraction <= 1.0)) throw std::invalid_argument("demogen: novice_fraction outside [0,1]");
  if (!(cfg.noise_eps >= 0.0 && cfg.noise_eps <= 1.0)) throw std::invalid_argument("demogen: noise_eps outside [0,1]");
}

SpawnBias right_from_left_bias() {
  SpawnBias bias{};
  bias[0] = {0.25, 0.25, 0.25, 0.25};
  bias[1] = {0.25, 0.25, 0.25, 0.25};
  bias[2] = {0.495, 0.495, 0.005, 0.005};
  return bias;
}

Vec2 next_waypoint(const arena::ArenaSpec& spec, Vec2 position, PadId target) {
  const Vec2 goal = pad_of(spec, target).center;
  const auto candidates = detour_points(spec);
  // Shrinking clearance handles an agent that noise has pushed close to a wall.
  for (double clearance : {kPlanClearance, 0.3, 0.05}) {
    if (visible(spec, position, goal, clearance)) return goal;
    double best_cost = std::numeric_limits<double>::infinity();
    std::optional<Vec2> best;
    for (const Vec2& c : candidates) {
      if (c.x <= 0.0 || c.x >= spec.width || c.y <= 0.0 || c.y >= spec.height) continue;
      if (dist(c, position) < kReached || !visible(spec, position, c, clearance)) continue;
      double cost = dist(position, c) + dist(c, goal);
      if (!visible(spec, c, goal, clearance)) cost += 100.0;
      if (cost < best_cost) {
        best_cost = cost;
        best = c;
      }
    }
    if (best) return *best;
  }
  return goal;
}

arena::Action scripted_action(const arena::ArenaSpec& spec, const arena::AgentState& state, PadId target, double noise_eps,
                              Rng& rng, int components) {
  if (components < 3) throw std::invalid_argument("scripted_action: needs at least 3 components");
  const int k = spec.buckets;
  arena::Action action = arena::neutral_action(components, k);

  const Vec2 wp = next_waypoint(spec, state.position, target);
  const Vec2 d{wp.x - state.position.x, wp.y - state.position.y};
  if (std::hypot(d.x, d.y) > 1e-12) {
    const double desired = std::atan2(-d.x, d.y);
    const double err = arena::wrap_angle(desired - state.heading);
    const double step_turn = spec.omega_max * spec.dt;
    action.components[2] = arena::value_bucket(err / step_turn, k);

    const double h = state.heading + arena::bucket_value(action.components[2], k) * step_turn;
    double s = d.x * std::cos(h) + d.y * std::sin(h);
    double f = -d.x * std::sin(h) + d.y * std::cos(h);
    const double m = std::max(std::abs(s), std::abs(f));
    s /= m;
    f /= m;
    action.components[0] = arena::value_bucket(s, k);
    action.components[1] = arena::value_bucket(f, k);
  }

  for (auto& b : action.components) {
    if (rng.uniform() < noise_eps) b = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
  }
  return action;
}

arena::Action random_action(int components, int buckets, Rng& rng) {
  arena::Action a;
  a.components.resize(static_cast<std::size_t>(components));
  for (auto& b : a.components) b = static_cast<int>(rng.below(static_cast<std::uint64_t>(buckets)));
  return a;
}

Trajectory run_episode(const arena::ArenaSpec& spec, int spawn, std::optional<PadId> target, double noise_eps, Rng& rng,
                       int components) {
  auto start = arena::reset(spec, spawn, rng.next_u64());
  Trajectory traj;
  traj.spawn = spawn;
  traj.components = components;
  traj.source = TrajectorySource::Demo;
  traj.target = target;

  arena::AgentState state = start.state;
  arena::Observation obs = std::move(start.observation);
  while (true) {
    const arena::Action action =
        target ? scripted_action(spec, state, *target, noise_eps, rng, components) : random_action(components, spec.buckets, rng);
    traj.push_step(obs, action, Pose{state.position.x, state.position.y, state.heading});
    auto next = arena::step(spec, state, action);
    state = next.state;
    obs = std::move(next.observation);
    if (next.outcome) {
      traj.outcome = *next.outcome;
      break;
    }
  }
  traj.poses.push_back(Pose{state.position.x, state.position.y, state.heading});
  return traj;
}

Dataset generate_pretrain(const arena::ArenaSpec& spec, const DemoConfig& cfg, int n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("generate_pretrain: n must be >= 1");
  arena::validate(spec);
  validate(cfg);
  Dataset ds;
  ds.trajectories.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const int spawn = static_cast<int>(rng.weighted(spec.spawn_weights));
    const bool novice = rng.uniform() < cfg.novice_fraction;
    const auto pad = arena::kPadOrder[rng.weighted(cfg.pad_mix)];
    Trajectory t = run_episode(spec, spawn, novice ? std::nullopt : std::optional(pad), cfg.noise_eps, rng);
    t.id = static_cast<std::uint64_t>(i);
    ds.trajectories.push_back(std::move(t));
  }
  ds.metadata = json{{"kind", "pretrain"},
                     {"seed", seed},
                     {"episodes", n},
                     {"config", {{"pad_mix", cfg.pad_mix}, {"novice_fraction", cfg.novice_fraction}, {"noise_eps", cfg.noise_eps}}},
                     {"counts", counts_json(ds.trajectories)},
                     {"arena", arena_to_json(spec)}};
  return ds;
}

Dataset generate_curated(const arena::ArenaSpec& spec, const CuratedConfig& cfg, std::uint64_t seed) {
  if (cfg.per_pad < 1) throw std::invalid_argument("generate_curated: per_pad must be >= 1");
  arena::validate(spec);
  Dataset ds;
  for (PadId pad : arena::kPadOrder) {
    const std::uint64_t pad_seed = derive_seed(seed, 1000 + arena::pad_index(pad));
    for (int k = 0; k < cfg.per_pad; ++k) {
      bool filled = false;
      for (int attempt = 0; attempt < cfg.retries_per_demo && !filled; ++attempt) {
        Rng rng(derive_seed(pad_seed, static_cast<std::uint64_t>(k) * 1'000'003ULL + static_cast<std::uint64_t>(attempt)));
        const int spawn = cfg.spawn_bias ? static_cast<int>(rng.weighted((*cfg.spawn_bias)[arena::pad_index(pad)])) : k % 4;
        Trajectory t = run_episode(spec, spawn, pad, cfg.noise_eps, rng);
        if (t.outcome.pad != pad) continue;
        t.id = ds.trajectories.size();
        ds.trajectories.push_back(std::move(t));
        filled = true;
      }
      if (!filled) {
        throw std::runtime_error("generate_curated: could not reach " + arena::pad_name(pad) + " within " +
                                 std::to_string(cfg.retries_per_demo) + " attempts");
      }
    }
  }
  json bias = nullptr;
  if (cfg.spawn_bias) bias = *cfg.spawn_bias;
  ds.metadata = json{{"kind", "curated"},
                     {"seed", seed},
                     {"per_pad", cfg.per_pad},
                     {"noise_eps", cfg.noise_eps},
                     {"spawn_bias", bias},
                     {"counts", counts_json(ds.trajectories)},
                     {"arena", arena_to_json(spec)}};
  return ds;
}

}  // namespace deskalign::demogen
