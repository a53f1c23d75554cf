#include "deskalign/trajectory.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace deskalign {

using nlohmann::json;

std::uint16_t quantize_unit(double v) {
  return static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 1000.0));
}

std::vector<double> quantized_values(const arena::Observation& obs) {
  std::vector<double> out(obs.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dequantize_unit(quantize_unit(obs.values[i]));
  return out;
}

std::vector<double> Trajectory::observation_values(int t) const {
  auto q = observation(t);
  std::vector<double> out(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) out[i] = dequantize_unit(q[i]);
  return out;
}

arena::Action Trajectory::action_struct(int t) const {
  auto a = action(t);
  return arena::Action{std::vector<int>(a.begin(), a.end())};
}

void Trajectory::push_step(const arena::Observation& obs, const arena::Action& act, const Pose& pose) {
  if (obs_size == 0) obs_size = static_cast<int>(obs.values.size());
  if (static_cast<int>(obs.values.size()) != obs_size) throw std::invalid_argument("trajectory: observation size changed");
  if (static_cast<int>(act.components.size()) != components) {
    throw std::invalid_argument("trajectory: action has " + std::to_string(act.components.size()) + " components, expected " +
                                std::to_string(components));
  }
  for (double v : obs.values) observations.push_back(quantize_unit(v));
  for (int b : act.components) actions.push_back(static_cast<std::uint8_t>(b));
  poses.push_back(pose);
}

void Trajectory::check() const {
  const auto d = static_cast<std::size_t>(duration());
  if (observations.size() != d * static_cast<std::size_t>(obs_size) || actions.size() != d * static_cast<std::size_t>(components) ||
      poses.size() != d + 1) {
    throw std::invalid_argument("trajectory " + std::to_string(id) + ": step arrays disagree with duration " +
                                std::to_string(d));
  }
}

std::array<int, 4> outcome_counts(std::span<const Trajectory> trajs) {
  std::array<int, 4> counts{};
  for (const auto& t : trajs) ++counts[t.outcome.pad ? arena::pad_index(*t.outcome.pad) : 3];
  return counts;
}

json trajectory_to_json(const Trajectory& t) {
  json obs = json::array();
  for (int s = 0; s < t.duration(); ++s) {
    json sparse = json::array();
    auto q = t.observation(s);
    for (std::size_t i = 0; i < q.size(); ++i) {
      if (q[i] != 0) {
        sparse.push_back(i);
        sparse.push_back(q[i]);
      }
    }
    obs.push_back(std::move(sparse));
  }
  json actions = json::array();
  for (int s = 0; s < t.duration(); ++s) {
    auto a = t.action(s);
    actions.push_back(std::vector<int>(a.begin(), a.end()));
  }
  json poses = json::array();
  for (const auto& p : t.poses) poses.push_back({p.x, p.y, p.heading});
  return json{{"id", t.id},
              {"spawn", t.spawn},
              {"outcome", arena::outcome_tag(t.outcome)},
              {"duration", t.duration()},
              {"source", t.source == TrajectorySource::Demo ? "demo" : "rollout"},
              {"target", t.target ? json(arena::pad_name(*t.target)) : json(nullptr)},
              {"components", t.components},
              {"obs_size", t.obs_size},
              {"obs", std::move(obs)},
              {"actions", std::move(actions)},
              {"poses", std::move(poses)}};
}

Trajectory trajectory_from_json(const json& j) {
  Trajectory t;
  t.id = j.at("id").get<std::uint64_t>();
  t.spawn = j.at("spawn").get<int>();
  t.outcome = arena::parse_outcome(j.at("outcome").get<std::string>(), j.at("duration").get<int>());
  const std::string source = j.at("source").get<std::string>();
  if (source != "demo" && source != "rollout") throw std::invalid_argument("trajectory: unknown source '" + source + "'");
  t.source = source == "demo" ? TrajectorySource::Demo : TrajectorySource::Rollout;
  if (!j.at("target").is_null()) t.target = arena::parse_pad(j.at("target").get<std::string>());
  t.components = j.at("components").get<int>();
  t.obs_size = j.at("obs_size").get<int>();
  const auto d = static_cast<std::size_t>(t.duration());
  const auto& obs = j.at("obs");
  if (obs.size() != d) throw std::invalid_argument("trajectory: obs length mismatch");
  t.observations.assign(d * static_cast<std::size_t>(t.obs_size), 0);
  for (std::size_t s = 0; s < d; ++s) {
    const auto& sparse = obs[s];
    if (sparse.size() % 2 != 0) throw std::invalid_argument("trajectory: odd sparse observation list");
    for (std::size_t k = 0; k < sparse.size(); k += 2) {
      const auto idx = sparse[k].get<std::size_t>();
      if (idx >= static_cast<std::size_t>(t.obs_size)) throw std::invalid_argument("trajectory: observation index out of range");
      const auto v = sparse[k + 1].get<int>();
      if (v < 0 || v > 1000) throw std::invalid_argument("trajectory: observation value out of range");
      t.observations[s * static_cast<std::size_t>(t.obs_size) + idx] = static_cast<std::uint16_t>(v);
    }
  }
  const auto& actions = j.at("actions");
  if (actions.size() != d) throw std::invalid_argument("trajectory: actions length mismatch");
  for (const auto& a : actions) {
    if (a.size() != static_cast<std::size_t>(t.components)) throw std::invalid_argument("trajectory: action width mismatch");
    for (const auto& b : a) t.actions.push_back(static_cast<std::uint8_t>(b.get<int>()));
  }
  for (const auto& p : j.at("poses")) t.poses.push_back({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()});
  t.check();
  return t;
}

void write_trajectories(const std::string& path, std::span<const Trajectory> trajs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const auto& t : trajs) out << trajectory_to_json(t).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

TrajectorySet read_trajectories(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  TrajectorySet out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(trajectory_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_dataset(const std::string& path, const Dataset& ds) {
  write_trajectories(path, ds.trajectories);
  std::ofstream meta(path + ".meta.json", std::ios::trunc);
  if (!meta) throw std::runtime_error("cannot write metadata for '" + path + "'");
  meta << ds.metadata.dump(2) << '\n';
}

Dataset read_dataset(const std::string& path) {
  Dataset ds;
  ds.trajectories = read_trajectories(path);
  std::ifstream meta(path + ".meta.json");
  if (meta) ds.metadata = json::parse(meta);
  return ds;
}

json playback_track(const Trajectory& t) {
  json track = json::array();
  for (std::size_t i = 0; i < t.poses.size(); ++i) {
    track.push_back({{"step", i}, {"x", t.poses[i].x}, {"y", t.poses[i].y}, {"heading", t.poses[i].heading}});
  }
  return track;
}

void write_playback(const std::string& path, const Trajectory& t) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (std::size_t i = 0; i < t.poses.size(); ++i) {
    json actions = json::array();
    if (static_cast<int>(i) < t.duration()) {
      auto a = t.action(static_cast<int>(i));
      actions = std::vector<int>(a.begin(), a.end());
    }
    out << json{{"step", i}, {"x", t.poses[i].x}, {"y", t.poses[i].y}, {"heading", t.poses[i].heading}, {"actions", actions}}.dump()
        << '\n';
  }
}

json arena_to_json(const arena::ArenaSpec& spec) {
  json walls = json::array();
  for (const auto& w : spec.walls) walls.push_back({w.x0, w.y0, w.x1, w.y1});
  json spawns = json::array();
  for (const auto& s : spec.spawns) spawns.push_back({s.x, s.y});
  json pads = json::array();
  for (const auto& p : spec.pads) pads.push_back({{"id", arena::pad_name(p.id)}, {"x", p.center.x}, {"y", p.center.y}, {"radius", p.radius}});
  return json{{"width", spec.width},         {"height", spec.height}, {"walls", walls},
              {"spawns", spawns},            {"spawn_weights", spec.spawn_weights},
              {"pads", pads},                {"max_steps", spec.max_steps},
              {"dt", spec.dt},               {"s_max", spec.s_max},
              {"omega_max", spec.omega_max}, {"view", spec.view},
              {"buckets", spec.buckets},     {"randomize_heading", spec.randomize_heading}};
}

arena::ArenaSpec arena_from_json(const json& j) {
  arena::ArenaSpec spec;
  spec.width = j.at("width").get<double>();
  spec.height = j.at("height").get<double>();
  for (const auto& w : j.at("walls")) spec.walls.push_back({w.at(0).get<double>(), w.at(1).get<double>(), w.at(2).get<double>(), w.at(3).get<double>()});
  const auto& spawns = j.at("spawns");
  if (spawns.size() != 4) throw std::invalid_argument("arena: exactly 4 spawns required");
  for (std::size_t i = 0; i < 4; ++i) spec.spawns[i] = {spawns[i].at(0).get<double>(), spawns[i].at(1).get<double>()};
  spec.spawn_weights = j.at("spawn_weights").get<std::array<double, 4>>();
  const auto& pads = j.at("pads");
  if (pads.size() != 3) throw std::invalid_argument("arena: exactly 3 pads required");
  for (std::size_t i = 0; i < 3; ++i) {
    spec.pads[i] = {arena::parse_pad(pads[i].at("id").get<std::string>()),
                    {pads[i].at("x").get<double>(), pads[i].at("y").get<double>()},
                    pads[i].at("radius").get<double>()};
  }
  spec.max_steps = j.at("max_steps").get<int>();
  spec.dt = j.at("dt").get<double>();
  spec.s_max = j.at("s_max").get<double>();
  spec.omega_max = j.at("omega_max").get<double>();
  spec.view = j.value("view", 15);
  spec.buckets = j.value("buckets", 11);
  spec.randomize_heading = j.value("randomize_heading", false);
  arena::validate(spec);
  return spec;
}

}  // namespace deskalign
