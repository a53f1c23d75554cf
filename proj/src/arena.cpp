#include "deskalign/arena.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

#include "deskalign/random.hpp"

namespace deskalign::arena {

namespace {

constexpr double kPi = 3.14159265358979323846;
// Collision contacts stop this far short of a wall so positions never sit on one.
constexpr double kContactMargin = 1e-6;
constexpr double kWallHalfWidth = 0.5;
constexpr double kSpawnMarkerRadius = 0.5;

Vec2 forward_axis(double heading) { return {-std::sin(heading), std::cos(heading)}; }
Vec2 strafe_axis(double heading) { return {std::cos(heading), std::sin(heading)}; }

double box_distance(const Segment& s, Vec2 p) {
  const double lo_x = std::min(s.x0, s.x1), hi_x = std::max(s.x0, s.x1);
  const double lo_y = std::min(s.y0, s.y1), hi_y = std::max(s.y0, s.y1);
  const double dx = std::max({lo_x - p.x, 0.0, p.x - hi_x});
  const double dy = std::max({lo_y - p.y, 0.0, p.y - hi_y});
  return std::hypot(dx, dy);
}

// Moves one coordinate from `from` toward `to`, stopping at the first wall
// perpendicular to the motion whose span contains `other`.
double sweep_axis(const ArenaSpec& spec, double from, double to, double other, bool along_x) {
  double target = to;
  for (const auto& w : spec.walls) {
    const bool blocks = along_x ? w.vertical() : (!w.vertical() && w.y0 == w.y1);
    if (!blocks) continue;
    const double c = along_x ? w.x0 : w.y0;
    const double lo = along_x ? std::min(w.y0, w.y1) : std::min(w.x0, w.x1);
    const double hi = along_x ? std::max(w.y0, w.y1) : std::max(w.x0, w.x1);
    if (other < lo || other > hi) continue;
    if (to > from && c > from && c < target + kContactMargin) target = std::min(target, c - kContactMargin);
    if (to < from && c < from && c > target - kContactMargin) target = std::max(target, c + kContactMargin);
  }
  const double extent = along_x ? spec.width : spec.height;
  return std::clamp(target, kContactMargin, extent - kContactMargin);
}

// Liang-Barsky clip of segment a->b against an axis-aligned box.
bool segment_hits_box(Vec2 a, Vec2 b, double lo_x, double hi_x, double lo_y, double hi_y) {
  double t0 = 0.0, t1 = 1.0;
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double p[4] = {-dx, dx, -dy, dy};
  const double q[4] = {a.x - lo_x, hi_x - a.x, a.y - lo_y, hi_y - a.y};
  for (int i = 0; i < 4; ++i) {
    if (p[i] == 0.0) {
      if (q[i] < 0.0) return false;
      continue;
    }
    const double r = q[i] / p[i];
    if (p[i] < 0.0) {
      t0 = std::max(t0, r);
    } else {
      t1 = std::min(t1, r);
    }
    if (t0 > t1) return false;
  }
  return true;
}

}  // namespace

std::string pad_name(PadId id) {
  switch (id) {
    case PadId::Left:
      return "Left";
    case PadId::Middle:
      return "Middle";
    case PadId::Right:
      return "Right";
  }
  return "?";
}

PadId parse_pad(const std::string& s) {
  std::string lower;
  for (char c : s) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (lower == "left" || lower == "0") return PadId::Left;
  if (lower == "middle" || lower == "1") return PadId::Middle;
  if (lower == "right" || lower == "2") return PadId::Right;
  throw std::invalid_argument("unknown pad '" + s + "'");
}

std::string outcome_tag(const Outcome& o) { return o.pad ? pad_name(*o.pad) : "Timeout"; }

Outcome parse_outcome(const std::string& tag, int duration) {
  Outcome o;
  o.duration = duration;
  if (tag != "Timeout") o.pad = parse_pad(tag);
  return o;
}

ArenaSpec default_spec() {
  ArenaSpec spec;
  spec.spawns = {Vec2{8.0, 3.5}, Vec2{10.5, 3.5}, Vec2{13.5, 3.5}, Vec2{16.0, 3.5}};
  spec.pads = {Pad{PadId::Left, {4.0, 14.0}, 1.0}, Pad{PadId::Middle, {12.0, 14.0}, 1.0},
               Pad{PadId::Right, {20.0, 14.0}, 1.0}};
  // One short wall below each pad, offset toward the arena centre for the
  // side pads so the straight approach from the spawns is partly blocked.
  spec.walls = {Segment{4.5, 11.0, 7.0, 11.0}, Segment{10.75, 11.0, 13.25, 11.0}, Segment{17.0, 11.0, 19.5, 11.0}};
  return spec;
}

void validate(const ArenaSpec& spec) {
  auto fail = [](const std::string& what) { throw std::invalid_argument("arena spec: " + what); };
  if (!(spec.width > 0.0) || !(spec.height > 0.0)) fail("width and height must be positive");
  if (spec.max_steps < 1) fail("max_steps must be >= 1");
  if (!(spec.dt > 0.0) || !(spec.s_max > 0.0) || !(spec.omega_max > 0.0)) fail("dt, s_max, omega_max must be positive");
  if (spec.view < 1) fail("view must be >= 1");
  if (spec.buckets < 2) fail("buckets must be >= 2");
  auto inside = [&](Vec2 p) { return p.x > 0.0 && p.x < spec.width && p.y > 0.0 && p.y < spec.height; };
  double total = 0.0;
  for (double w : spec.spawn_weights) {
    if (!(w >= 0.0)) fail("spawn weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) fail("spawn weights must sum to 1");
  for (const auto& s : spec.spawns) {
    if (!inside(s)) fail("spawn outside the boundary");
  }
  for (std::size_t i = 0; i < spec.pads.size(); ++i) {
    if (!(spec.pads[i].radius > 0.0)) fail("pad radius must be positive");
    if (!inside(spec.pads[i].center)) fail("pad outside the boundary");
    for (std::size_t j = 0; j < i; ++j) {
      if (spec.pads[i].id == spec.pads[j].id) fail("pad ids must be distinct");
    }
  }
  for (const auto& w : spec.walls) {
    if (w.x0 != w.x1 && w.y0 != w.y1) fail("walls must be axis-aligned");
  }
}

Action neutral_action(int components, int buckets) {
  return Action{std::vector<int>(static_cast<std::size_t>(components), (buckets - 1) / 2)};
}

double bucket_value(int bucket, int buckets) {
  const double half = 0.5 * (buckets - 1);
  return (bucket - half) / half;
}

int value_bucket(double value, int buckets) {
  const double half = 0.5 * (buckets - 1);
  const int b = static_cast<int>(std::lround(half + half * std::clamp(value, -1.0, 1.0)));
  return std::clamp(b, 0, buckets - 1);
}

double wrap_angle(double a) {
  if (a >= -kPi && a < kPi) return a;
  double r = std::fmod(a + kPi, 2.0 * kPi);
  if (r < 0.0) r += 2.0 * kPi;
  r -= kPi;
  // fmod can land exactly on +pi after the shift.
  return r >= kPi ? r - 2.0 * kPi : r;
}

int sample_spawn(const ArenaSpec& spec, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5ba7u));
  return static_cast<int>(rng.weighted(spec.spawn_weights));
}

ResetResult reset(const ArenaSpec& spec, std::optional<int> spawn, std::uint64_t seed) {
  if (spawn && (*spawn < 0 || *spawn >= static_cast<int>(spec.spawns.size()))) {
    throw std::out_of_range("reset: spawn index " + std::to_string(*spawn) + " out of range");
  }
  const int index = spawn ? *spawn : sample_spawn(spec, seed);
  AgentState state;
  state.position = spec.spawns[static_cast<std::size_t>(index)];
  if (spec.randomize_heading) {
    Rng rng(derive_seed(seed, 0x4eadu));
    state.heading = wrap_angle(rng.uniform(-kPi, kPi));
  }
  return {state, render_observation(spec, state)};
}

StepResult step(const ArenaSpec& spec, const AgentState& state, const Action& action) {
  if (state.finished) throw std::logic_error("step: episode already produced an outcome");
  if (action.components.size() < 3) throw std::invalid_argument("step: action needs at least 3 components");
  for (int b : action.components) {
    if (b < 0 || b >= spec.buckets) throw std::invalid_argument("step: bucket " + std::to_string(b) + " out of range");
  }
  const double strafe = bucket_value(action.components[0], spec.buckets);
  const double forward = bucket_value(action.components[1], spec.buckets);
  const double turn = bucket_value(action.components[2], spec.buckets);

  AgentState next = state;
  next.heading = wrap_angle(state.heading + turn * spec.omega_max * spec.dt);
  const Vec2 f = forward_axis(next.heading), r = strafe_axis(next.heading);
  const double ds = strafe * spec.s_max * spec.dt, df = forward * spec.s_max * spec.dt;
  const Vec2 delta{ds * r.x + df * f.x, ds * r.y + df * f.y};

  if (delta.x != 0.0) next.position.x = sweep_axis(spec, state.position.x, state.position.x + delta.x, state.position.y, true);
  if (delta.y != 0.0) next.position.y = sweep_axis(spec, state.position.y, state.position.y + delta.y, next.position.x, false);
  next.step_count = state.step_count + 1;

  StepResult result{next, {}, std::nullopt};
  if (auto pad = pad_hit_test(spec, next.position)) {
    result.outcome = Outcome{pad, next.step_count};
  } else if (next.step_count >= spec.max_steps) {
    result.outcome = Outcome{std::nullopt, next.step_count};
  }
  result.state.finished = result.outcome.has_value();
  result.observation = render_observation(spec, result.state);
  return result;
}

Observation render_observation(const ArenaSpec& spec, const AgentState& state) {
  const int v = spec.view;
  Observation obs{v, std::vector<double>(static_cast<std::size_t>(v) * v * 3, 0.0)};
  const Vec2 f = forward_axis(state.heading), r = strafe_axis(state.heading);
  const double half = 0.5 * (v - 1);
  for (int row = 0; row < v; ++row) {
    const double ahead = half - row;
    for (int col = 0; col < v; ++col) {
      const double right = col - half;
      const Vec2 p{state.position.x + right * r.x + ahead * f.x, state.position.y + right * r.y + ahead * f.y};
      double* cell = obs.values.data() + (static_cast<std::size_t>(row) * v + col) * 3;
      bool blocked = p.x < 0.0 || p.x > spec.width || p.y < 0.0 || p.y > spec.height;
      for (std::size_t i = 0; !blocked && i < spec.walls.size(); ++i) {
        blocked = box_distance(spec.walls[i], p) <= kWallHalfWidth;
      }
      cell[0] = blocked ? 1.0 : 0.0;
      for (const auto& pad : spec.pads) {
        if (std::hypot(p.x - pad.center.x, p.y - pad.center.y) <= pad.radius) {
          cell[1] = kPadIntensity[pad_index(pad.id)];
          break;
        }
      }
      for (const auto& s : spec.spawns) {
        if (std::hypot(p.x - s.x, p.y - s.y) <= kSpawnMarkerRadius) {
          cell[2] = 1.0;
          break;
        }
      }
    }
  }
  return obs;
}

std::optional<PadId> pad_hit_test(const ArenaSpec& spec, Vec2 position) {
  for (PadId id : kPadOrder) {
    for (const auto& pad : spec.pads) {
      if (pad.id == id && std::hypot(position.x - pad.center.x, position.y - pad.center.y) <= pad.radius) {
        return id;
      }
    }
  }
  return std::nullopt;
}

bool path_blocked(const ArenaSpec& spec, Vec2 a, Vec2 b, double clearance) {
  const double c = clearance;
  auto outside = [&](Vec2 p) { return p.x <= c || p.x >= spec.width - c || p.y <= c || p.y >= spec.height - c; };
  if (outside(a) || outside(b)) return true;
  for (const auto& w : spec.walls) {
    const double kEps = 1e-12 + c;
    if (segment_hits_box(a, b, std::min(w.x0, w.x1) - kEps, std::max(w.x0, w.x1) + kEps, std::min(w.y0, w.y1) - kEps,
                         std::max(w.y0, w.y1) + kEps)) {
      return true;
    }
  }
  return false;
}

}  // namespace deskalign::arena
