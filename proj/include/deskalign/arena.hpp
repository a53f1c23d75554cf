#pragma once

// Deterministic 2D navigation arena: four spawn points along the bottom, three
// exit pads along the top, axis-aligned walls, an egocentric three-channel
// view and a discretised joystick (strafe, forward, turn).
//
// World frame: x to the right, y up, origin at the bottom-left corner.
// Heading 0 faces +y; positive turn is counter-clockwise. In a frame with
// heading h the forward axis is (-sin h, cos h) and the strafe (right) axis is
// (cos h, sin h).

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace deskalign::arena {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

/// Axis-aligned wall segment; either x0 == x1 or y0 == y1.
struct Segment {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  bool vertical() const { return x0 == x1; }
  friend bool operator==(const Segment&, const Segment&) = default;
};

enum class PadId : std::uint8_t { Left = 0, Middle = 1, Right = 2 };
inline constexpr std::array<PadId, 3> kPadOrder{PadId::Left, PadId::Middle, PadId::Right};

std::string pad_name(PadId id);
/// Accepts "Left"/"Middle"/"Right" (case-insensitive) or "0"/"1"/"2".
PadId parse_pad(const std::string& s);
inline std::size_t pad_index(PadId id) { return static_cast<std::size_t>(id); }

struct Pad {
  PadId id = PadId::Left;
  Vec2 center;
  double radius = 1.0;
  friend bool operator==(const Pad&, const Pad&) = default;
};

struct ArenaSpec {
  double width = 24.0;
  double height = 16.0;
  std::vector<Segment> walls;
  std::array<Vec2, 4> spawns{};
  std::array<double, 4> spawn_weights{0.25, 0.25, 0.25, 0.25};
  std::array<Pad, 3> pads{};
  int max_steps = 100;
  double dt = 0.1;
  double s_max = 2.0;
  double omega_max = 3.14159265358979323846;
  int view = 15;
  int buckets = 11;
  /// When set, reset draws the initial heading uniformly instead of facing +y.
  bool randomize_heading = false;

  friend bool operator==(const ArenaSpec&, const ArenaSpec&) = default;
};

/// The default 24x16 layout.
ArenaSpec default_spec();

/// Throws std::invalid_argument naming the first violated invariant.
void validate(const ArenaSpec& spec);

struct AgentState {
  Vec2 position;
  double heading = 0.0;
  int step_count = 0;
  bool finished = false;
  friend bool operator==(const AgentState&, const AgentState&) = default;
};

/// Bucket indices; components 0..2 drive strafe, forward and turn, any
/// further components are carried but do not move the agent.
struct Action {
  std::vector<int> components;
  friend bool operator==(const Action&, const Action&) = default;
};

/// Neutral joystick: every component at the middle bucket.
Action neutral_action(int components, int buckets);
/// Continuous value of a bucket: -1 at bucket 0, +1 at the last bucket.
double bucket_value(int bucket, int buckets);
/// Nearest bucket for a value in [-1, 1].
int value_bucket(double value, int buckets);

/// view x view x 3 grid, row-major with channels innermost. Row 0 is the
/// far edge ahead of the agent; the agent sits at the central cell.
struct Observation {
  int view = 0;
  std::vector<double> values;

  double at(int row, int col, int channel) const {
    return values[(static_cast<std::size_t>(row) * view + col) * 3 + channel];
  }
  friend bool operator==(const Observation&, const Observation&) = default;
};

inline constexpr double kPadIntensity[3] = {1.0 / 3.0, 2.0 / 3.0, 1.0};

struct Outcome {
  std::optional<PadId> pad;  // empty means timeout
  int duration = 0;
  bool success() const { return pad.has_value(); }
  friend bool operator==(const Outcome&, const Outcome&) = default;
};

std::string outcome_tag(const Outcome& o);  // "Left" | "Middle" | "Right" | "Timeout"
Outcome parse_outcome(const std::string& tag, int duration);

struct ResetResult {
  AgentState state;
  Observation observation;
};

struct StepResult {
  AgentState state;
  Observation observation;
  std::optional<Outcome> outcome;
};

/// Spawn index either given or drawn from spec.spawn_weights with `seed`.
ResetResult reset(const ArenaSpec& spec, std::optional<int> spawn, std::uint64_t seed);
/// Spawn index that reset() would pick for `seed` when none is given.
int sample_spawn(const ArenaSpec& spec, std::uint64_t seed);

StepResult step(const ArenaSpec& spec, const AgentState& state, const Action& action);

Observation render_observation(const ArenaSpec& spec, const AgentState& state);

std::optional<PadId> pad_hit_test(const ArenaSpec& spec, Vec2 position);

/// True when segment a->b passes within `clearance` of a wall or leaves the
/// boundary shrunk by `clearance`.
bool path_blocked(const ArenaSpec& spec, Vec2 a, Vec2 b, double clearance = 0.0);

double wrap_angle(double a);

}  // namespace deskalign::arena
