#include "deskalign/rewardmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace deskalign::rm {

using nlohmann::json;
using tn::Tensor;
using tn::Var;

std::string kind_name(EncoderKind k) { return k == EncoderKind::AgentFrozen ? "agent" : "random"; }

EncoderKind parse_kind(const std::string& s) {
  if (s == "agent") return EncoderKind::AgentFrozen;
  if (s == "random") return EncoderKind::RandomProjection;
  throw std::invalid_argument("unknown encoder kind '" + s + "' (expected agent or random)");
}

int Encoder::feature_dim() const { return static_cast<int>(pad_row.size()); }

Encoder agent_encoder(std::shared_ptr<const policy::PolicyCheckpoint> policy) {
  if (!policy) throw std::invalid_argument("agent encoder needs a policy checkpoint");
  Encoder e;
  e.kind = EncoderKind::AgentFrozen;
  e.policy_id = policy->id();
  e.policy = std::move(policy);
  policy::ContextBuffer ctx(e.policy->config.context);
  ctx.push(policy::encode(*e.policy, std::vector<double>(static_cast<std::size_t>(e.policy->config.obs_size()), 0.0)), std::nullopt);
  const auto f = policy::trunk_features(*e.policy, ctx);
  e.pad_row = Tensor({f.size()}, f);
  return e;
}

Encoder random_projection(int obs_size, std::uint64_t seed, int dim) {
  if (obs_size < 1 || dim < 1) throw std::invalid_argument("random projection: sizes must be positive");
  Encoder e;
  e.kind = EncoderKind::RandomProjection;
  e.seed = seed;
  e.dim = dim;
  Rng rng(derive_seed(seed, 0x7a9));
  e.projection = Tensor({static_cast<std::size_t>(obs_size), static_cast<std::size_t>(dim)});
  const double sd = 1.0 / std::sqrt(static_cast<double>(obs_size));
  for (auto& v : e.projection.data) v = sd * rng.normal();
  e.pad_row = Tensor({static_cast<std::size_t>(dim)});
  return e;
}

Tensor trajectory_features(const Encoder& enc, const Trajectory& traj, int t_max) {
  const int d = traj.duration();
  if (d > t_max) throw std::invalid_argument("trajectory " + std::to_string(traj.id) + " has duration " + std::to_string(d) + " > T_max " + std::to_string(t_max));
  const std::size_t w = static_cast<std::size_t>(enc.feature_dim());
  Tensor out({static_cast<std::size_t>(t_max), w});
  if (enc.kind == EncoderKind::AgentFrozen) {
    const Tensor f = policy::cached_or_computed_features(*enc.policy, traj);
    std::copy(f.data.begin(), f.data.end(), out.data.begin());
  } else {
    const std::size_t obs = enc.projection.rows();
    if (static_cast<std::size_t>(traj.obs_size) != obs) throw std::invalid_argument("random projection: observation size mismatch");
    for (int t = 0; t < d; ++t) {
      auto q = traj.observation(t);
      auto row = out.row(static_cast<std::size_t>(t));
      for (std::size_t i = 0; i < obs; ++i) {
        if (q[i] == 0) continue;
        const double v = dequantize_unit(q[i]);
        const double* p = enc.projection.data.data() + i * w;
        for (std::size_t j = 0; j < w; ++j) row[j] += v * p[j];
      }
    }
  }
  for (int t = d; t < t_max; ++t) std::copy(enc.pad_row.data.begin(), enc.pad_row.data.end(), out.row(static_cast<std::size_t>(t)).begin());
  return out;
}

RewardModel init_reward_model(Encoder enc, const RMConfig& cfg, std::uint64_t seed) {
  if (cfg.t_max < 1 || cfg.step_hidden < 1 || cfg.step_out < 1 || cfg.head_hidden < 1) throw std::invalid_argument("reward model: sizes must be positive");
  RewardModel rm;
  rm.encoder = std::move(enc);
  rm.config = cfg;
  Rng rng(derive_seed(seed, 0x3e3));
  auto normal = [&](std::size_t rows, std::size_t cols) {
    Tensor t({rows, cols});
    const double sd = 1.0 / std::sqrt(static_cast<double>(rows));
    for (auto& v : t.data) v = sd * rng.normal();
    return t;
  };
  const auto d = static_cast<std::size_t>(rm.encoder.feature_dim());
  const auto sh = static_cast<std::size_t>(cfg.step_hidden), so = static_cast<std::size_t>(cfg.step_out);
  const auto cat = so * static_cast<std::size_t>(cfg.t_max), hh = static_cast<std::size_t>(cfg.head_hidden);
  rm.params.add("step.fc.w", normal(d, sh));
  rm.params.add("step.fc.b", Tensor({sh}));
  rm.params.add("step.out.w", normal(sh, so));
  rm.params.add("step.out.b", Tensor({so}));
  rm.params.add("head.fc.w", normal(cat, hh));
  rm.params.add("head.fc.b", Tensor({hh}));
  rm.params.add("head.out.w", Tensor({hh, 1}));
  rm.params.add("head.out.b", Tensor({1}));
  return rm;
}

Var forward(const RewardModel& rm, const Var& x, std::size_t n) {
  const auto& p = rm.params;
  Var h = tn::gelu(tn::linear(x, p.get("step.fc.w"), p.get("step.fc.b")));
  Var s = tn::linear(h, p.get("step.out.w"), p.get("step.out.b"));
  Var cat = tn::reshape(s, {n, static_cast<std::size_t>(rm.config.step_out * rm.config.t_max)});
  Var g = tn::gelu(tn::linear(cat, p.get("head.fc.w"), p.get("head.fc.b")));
  return tn::linear(g, p.get("head.out.w"), p.get("head.out.b"));
}

namespace {

Tensor stack(const std::vector<const Tensor*>& feats) {
  if (feats.empty()) return Tensor({0, 0});
  const std::size_t rows = feats[0]->rows(), cols = feats[0]->cols();
  Tensor out({feats.size() * rows, cols});
  auto it = out.data.begin();
  for (const auto* f : feats) it = std::copy(f->data.begin(), f->data.end(), it);
  return out;
}

std::unordered_map<std::uint64_t, std::size_t> index_by_id(const TrajectorySet& trajs) {
  std::unordered_map<std::uint64_t, std::size_t> idx;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    if (!idx.emplace(trajs[i].id, i).second) throw std::invalid_argument("duplicate trajectory id " + std::to_string(trajs[i].id));
  }
  return idx;
}

}  // namespace

double raw_reward(const RewardModel& rm, const Trajectory& traj) {
  tn::NoGradGuard ng;
  return forward(rm, tn::constant(trajectory_features(rm.encoder, traj, rm.config.t_max)), 1)->value.item();
}

// One trajectory per forward pass keeps every score bit-identical to
// raw_reward, so the recorded extrema normalize to exactly 0 and 1.
std::vector<double> raw_rewards(const RewardModel& rm, const TrajectorySet& trajs) {
  std::vector<double> out;
  out.reserve(trajs.size());
  for (const auto& t : trajs) out.push_back(raw_reward(rm, t));
  return out;
}

Var bt_loss(const Var& r_winners, const Var& r_losers, double l2) {
  Var bt = tn::mean(tn::softplus(tn::sub(r_losers, r_winners)));
  if (l2 == 0.0) return bt;
  Var reg = tn::scale(tn::add(tn::mean(tn::square(r_winners)), tn::mean(tn::square(r_losers))), 0.5 * l2);
  return tn::add(bt, reg);
}

RewardModel train_reward_model(const prefs::PreferenceSet& pairs, const TrajectorySet& trajs, Encoder enc, const RMHyper& hyper,
                               const RMConfig& cfg, RMStats* stats) {
  if (pairs.empty()) throw std::invalid_argument("train_reward_model: empty preference set");
  if (!(hyper.lr > 0.0) || hyper.minibatch < 1 || hyper.epochs < 1 || hyper.l2 < 0.0 || hyper.max_steps < 0) {
    throw std::invalid_argument("train_reward_model: invalid hyperparameters");
  }
  const auto idx = index_by_id(trajs);
  for (const auto& p : pairs) {
    for (auto id : {p.winner, p.loser}) {
      if (!idx.count(id)) throw std::invalid_argument("preference pair " + std::to_string(p.pair_id) + " references unknown trajectory " + std::to_string(id));
    }
  }

  RewardModel rm = init_reward_model(std::move(enc), cfg, hyper.seed);
  std::vector<Tensor> feats;
  feats.reserve(trajs.size());
  for (const auto& t : trajs) feats.push_back(trajectory_features(rm.encoder, t, cfg.t_max));

  tn::OptimizerState opt;
  opt.config.lr = hyper.lr;
  opt.config.weight_decay = 0.0;
  opt.config.clip_norm = 0.0;
  Rng rng(derive_seed(hyper.seed, 0x57e));
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t mb = static_cast<std::size_t>(hyper.minibatch);
  int steps = 0;
  int epoch = 0;
  for (; epoch < hyper.epochs && (hyper.max_steps == 0 || steps < hyper.max_steps); ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size() && (hyper.max_steps == 0 || steps < hyper.max_steps); start += mb) {
      const std::size_t end = std::min(order.size(), start + mb);
      // Score each distinct trajectory of the minibatch once.
      std::unordered_map<std::size_t, std::size_t> slot;
      std::vector<const Tensor*> batch;
      std::vector<std::size_t> w_rows, l_rows;
      auto slot_of = [&](std::uint64_t id) {
        const std::size_t ti = idx.at(id);
        auto [it, fresh] = slot.emplace(ti, batch.size());
        if (fresh) batch.push_back(&feats[ti]);
        return it->second;
      };
      for (std::size_t k = start; k < end; ++k) {
        w_rows.push_back(slot_of(pairs[order[k]].winner));
        l_rows.push_back(slot_of(pairs[order[k]].loser));
      }
      rm.params.zero_grad();
      Var r = forward(rm, tn::constant(stack(batch)), batch.size());
      Var loss = bt_loss(tn::gather_rows(r, w_rows), tn::gather_rows(r, l_rows), hyper.l2);
      tn::backward(loss);
      tn::adamw_step(rm.params, opt);
      if (stats) stats->losses.push_back(loss->value.item());
      ++steps;
    }
  }
  if (stats) stats->epochs_run = epoch;

  const auto raw = raw_rewards(rm, trajs);
  rm.r_min = *std::min_element(raw.begin(), raw.end());
  rm.r_max = *std::max_element(raw.begin(), raw.end());
  return rm;
}

double normalize(const RewardModel& rm, double raw) {
  if (!rm.r_min || !rm.r_max) throw std::logic_error("reward model has no normalization extrema (untrained)");
  if (!(*rm.r_min < *rm.r_max)) throw std::logic_error("reward model extrema are degenerate");
  return std::clamp((raw - *rm.r_min) / (*rm.r_max - *rm.r_min), 0.0, 1.0);
}

double normalized_reward(const RewardModel& rm, const Trajectory& traj) { return normalize(rm, raw_reward(rm, traj)); }

double accuracy_from_rewards(const prefs::PreferenceSet& pairs, const std::unordered_map<std::uint64_t, double>& raw) {
  if (pairs.empty()) throw std::invalid_argument("accuracy: empty preference set");
  double score = 0.0;
  for (const auto& p : pairs) {
    const auto w = raw.find(p.winner), l = raw.find(p.loser);
    if (w == raw.end() || l == raw.end()) throw std::invalid_argument("accuracy: pair " + std::to_string(p.pair_id) + " references an unknown trajectory");
    if (w->second > l->second) score += 1.0;
    else if (w->second == l->second) score += 0.5;
  }
  return score / static_cast<double>(pairs.size());
}

double accuracy(const RewardModel& rm, const prefs::PreferenceSet& pairs, const TrajectorySet& trajs) {
  const auto raw = raw_rewards(rm, trajs);
  std::unordered_map<std::uint64_t, double> by_id;
  for (std::size_t i = 0; i < trajs.size(); ++i) by_id[trajs[i].id] = raw[i];
  return accuracy_from_rewards(pairs, by_id);
}

// ---- files --------------------------------------------------------------------------

namespace {

json encoder_json(const Encoder& e) {
  json j{{"kind", kind_name(e.kind)}};
  if (e.kind == EncoderKind::AgentFrozen) {
    j["policy_id"] = e.policy_id;
  } else {
    j["seed"] = e.seed;
    j["dim"] = e.dim;
    j["obs_size"] = e.projection.rows();
  }
  return j;
}

}  // namespace

void write_reward_model(const std::string& path, const RewardModel& rm) {
  json header{{"kind", "reward_model"},
              {"encoder", encoder_json(rm.encoder)},
              {"config", {{"t_max", rm.config.t_max}, {"step_hidden", rm.config.step_hidden}, {"step_out", rm.config.step_out}, {"head_hidden", rm.config.head_hidden}}},
              {"r_min", rm.r_min ? json(*rm.r_min) : json(nullptr)},
              {"r_max", rm.r_max ? json(*rm.r_max) : json(nullptr)}};
  tn::write_checkpoint(path, tn::Checkpoint{header.dump(), rm.params});
}

json read_encoder_descriptor(const std::string& path) {
  const auto raw = tn::read_checkpoint(path);
  const json header = json::parse(raw.header);
  if (header.value("kind", "") != "reward_model") throw std::runtime_error("'" + path + "' is not a reward model");
  return header.at("encoder");
}

RewardModel read_reward_model(const std::string& path, std::shared_ptr<const policy::PolicyCheckpoint> policy) {
  auto raw = tn::read_checkpoint(path);
  const json header = json::parse(raw.header);
  if (header.value("kind", "") != "reward_model") throw std::runtime_error("'" + path + "' is not a reward model");
  const json& e = header.at("encoder");
  Encoder enc;
  if (parse_kind(e.at("kind").get<std::string>()) == EncoderKind::AgentFrozen) {
    const auto id = e.at("policy_id").get<std::string>();
    if (!policy) throw std::runtime_error("reward model '" + path + "' needs its encoder policy " + id);
    if (policy->id() != id) throw std::runtime_error("reward model '" + path + "' was trained on policy " + id + ", got " + policy->id());
    enc = agent_encoder(std::move(policy));
  } else {
    enc = random_projection(e.at("obs_size").get<int>(), e.at("seed").get<std::uint64_t>(), e.at("dim").get<int>());
  }
  const json& c = header.at("config");
  RMConfig cfg{c.at("t_max").get<int>(), c.at("step_hidden").get<int>(), c.at("step_out").get<int>(), c.at("head_hidden").get<int>()};
  RewardModel rm = init_reward_model(std::move(enc), cfg, 0);
  for (const auto& entry : rm.params.entries()) {
    if (!raw.params.contains(entry.name) || raw.params.get(entry.name)->value.shape != entry.var->value.shape) {
      throw std::runtime_error("reward model '" + path + "': parameter '" + entry.name + "' missing or misshapen");
    }
  }
  rm.params = std::move(raw.params);
  if (!header.at("r_min").is_null()) rm.r_min = header.at("r_min").get<double>();
  if (!header.at("r_max").is_null()) rm.r_max = header.at("r_max").get<double>();
  return rm;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "kind,comparisons,seed,accuracy\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f", r.accuracy);
    out << r.kind << ',' << r.comparisons << ',' << r.seed << ',' << buf << '\n';
  }
}

std::vector<SweepRow> read_sweep_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line != "kind,comparisons,seed,accuracy") throw std::runtime_error(path + ":1: unexpected header '" + line + "'");
  std::vector<SweepRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string kind, comps, seed, acc;
    if (!std::getline(ss, kind, ',') || !std::getline(ss, comps, ',') || !std::getline(ss, seed, ',') || !std::getline(ss, acc)) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected 4 fields");
    }
    try {
      rows.push_back({kind, std::stoull(comps), std::stoull(seed), std::stod(acc)});
    } catch (const std::exception&) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  return rows;
}

}  // namespace deskalign::rm
