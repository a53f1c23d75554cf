#include "deskalign/prefs.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

namespace deskalign::prefs {

using nlohmann::json;

RankKey rank_key(const Trajectory& traj, arena::PadId target) {
  int category = 0;
  if (traj.outcome.pad) category = *traj.outcome.pad == target ? 2 : 1;
  return {category, -traj.duration()};
}

std::string source_name(PairSource s) { return s == PairSource::Synthetic ? "synthetic" : "human"; }

PairSource parse_source(const std::string& s) {
  if (s == "synthetic") return PairSource::Synthetic;
  if (s == "human") return PairSource::Human;
  throw std::invalid_argument("unknown preference source '" + s + "'");
}

namespace {

std::vector<std::size_t> choose_sorted(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

PreferenceSet build_pairs(const TrajectorySet& trajs, arena::PadId target, std::optional<std::size_t> cap, std::uint64_t seed,
                          Subsample mode) {
  if (trajs.size() < 2) throw std::invalid_argument("build_pairs: need at least 2 trajectories, got " + std::to_string(trajs.size()));
  Rng rng(derive_seed(seed, 0x9a1));

  std::vector<std::size_t> members(trajs.size());
  std::iota(members.begin(), members.end(), std::size_t{0});
  if (cap && mode == Subsample::Trajectories) {
    if (*cap > trajs.size()) throw std::invalid_argument("build_pairs: trajectory cap exceeds the set size");
    members = choose_sorted(trajs.size(), *cap, rng);
  }

  std::vector<RankKey> keys(members.size());
  for (std::size_t i = 0; i < members.size(); ++i) keys[i] = rank_key(trajs[members[i]], target);

  PreferenceSet out;
  for (std::size_t i = 0; i < members.size(); ++i) {
    for (std::size_t j = i + 1; j < members.size(); ++j) {
      if (keys[i] == keys[j]) continue;
      const bool i_wins = keys[i] > keys[j];
      PreferencePair p;
      p.winner = trajs[members[i_wins ? i : j]].id;
      p.loser = trajs[members[i_wins ? j : i]].id;
      p.target = target;
      out.push_back(p);
    }
  }

  if (cap && mode == Subsample::Pairs) {
    if (*cap > out.size()) {
      throw std::invalid_argument("build_pairs: requested " + std::to_string(*cap) + " pairs but only " + std::to_string(out.size()) +
                                  " strict pairs exist");
    }
    PreferenceSet picked;
    picked.reserve(*cap);
    for (std::size_t k : choose_sorted(out.size(), *cap, rng)) picked.push_back(out[k]);
    out = std::move(picked);
  }
  for (std::size_t k = 0; k < out.size(); ++k) out[k].pair_id = k;
  return out;
}

std::pair<TrajectorySet, TrajectorySet> collect_rollouts(const policy::PolicyCheckpoint& ckpt, const arena::ArenaSpec& spec, int n_train,
                                                         int n_eval, double temperature, std::uint64_t seed) {
  if (n_train < 1 || n_eval < 1) throw std::invalid_argument("collect_rollouts: counts must be >= 1");
  policy::RolloutOptions opts;
  opts.temperature = temperature;
  auto run = [&](int n, std::uint64_t stream, std::uint64_t first_id) {
    TrajectorySet out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      Trajectory t = policy::rollout(ckpt, spec, std::nullopt, derive_seed(stream, static_cast<std::uint64_t>(i)), opts);
      t.id = first_id + static_cast<std::uint64_t>(i);
      out.push_back(std::move(t));
    }
    return out;
  };
  auto train = run(n_train, derive_seed(seed, 1), 0);
  auto eval = run(n_eval, derive_seed(seed, 2), static_cast<std::uint64_t>(n_train));
  return {std::move(train), std::move(eval)};
}

// ---- file format ------------------------------------------------------------------------

json pair_to_json(const PreferencePair& p) {
  return json{{"pair_id", p.pair_id},
              {"winner", p.winner},
              {"loser", p.loser},
              {"source", source_name(p.source)},
              {"target", arena::pad_name(p.target)},
              {"timestamp", p.timestamp}};
}

void write_preferences(const std::string& path, const PreferenceSet& pairs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  for (const auto& p : pairs) out << pair_to_json(p).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

namespace {

struct Record {
  PreferencePair pair;
  bool tie = false;
};

Record record_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("record is not an object");
  Record r;
  r.pair.pair_id = j.at("pair_id").get<std::uint64_t>();
  r.pair.winner = j.at("winner").get<std::uint64_t>();
  r.pair.loser = j.at("loser").get<std::uint64_t>();
  r.pair.source = parse_source(j.at("source").get<std::string>());
  r.pair.target = arena::parse_pad(j.at("target").get<std::string>());
  r.pair.timestamp = j.value("timestamp", "");
  if (j.contains("verdict")) {
    const auto v = j.at("verdict").get<std::string>();
    if (v == "equal") {
      r.tie = true;
    } else if (v != "A" && v != "B") {
      throw std::invalid_argument("verdict must be A, B or equal, got '" + v + "'");
    }
  }
  if (!r.tie && r.pair.winner == r.pair.loser) throw std::invalid_argument("winner and loser are the same trajectory");
  return r;
}

template <typename F>
void for_each_record(const std::string& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      f(record_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

}  // namespace

PreferenceSet read_preferences(const std::string& path) {
  PreferenceSet out;
  for_each_record(path, [&](const Record& r) {
    if (r.tie) throw std::invalid_argument("tie record in a preference set");
    out.push_back(r.pair);
  });
  return out;
}

PreferenceSet ingest_labels(const std::string& path, const std::unordered_set<std::uint64_t>* known_ids) {
  PreferenceSet out;
  std::set<std::pair<std::uint64_t, std::uint64_t>> seen;
  for_each_record(path, [&](const Record& r) {
    if (known_ids) {
      for (auto id : {r.pair.winner, r.pair.loser}) {
        if (!known_ids->count(id)) throw std::invalid_argument("unknown trajectory id " + std::to_string(id));
      }
    }
    if (r.tie) return;
    if (!seen.insert({r.pair.winner, r.pair.loser}).second) return;
    PreferencePair p = r.pair;
    p.source = PairSource::Human;
    out.push_back(p);
  });
  return out;
}

std::unordered_set<std::uint64_t> trajectory_ids(const TrajectorySet& trajs) {
  std::unordered_set<std::uint64_t> ids;
  for (const auto& t : trajs) ids.insert(t.id);
  return ids;
}

}  // namespace deskalign::prefs
