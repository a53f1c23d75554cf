#include "deskalign/align.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace deskalign::align {

using policy::PolicyCheckpoint;
using tn::Tensor;
using tn::Var;

void validate(const AlignConfig& cfg) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("align config: " + m); };
  if (cfg.updates < 0) fail("updates must be >= 0");
  if (cfg.batch_episodes < 1) fail("batch_episodes must be >= 1");
  if (!(cfg.lr > 0.0)) fail("lr must be positive");
  if (cfg.beta < 0.0) fail("beta must be >= 0");
  if (cfg.gamma != 1.0) fail("only gamma = 1 is supported");
  if (!(cfg.temperature > 0.0)) fail("temperature must be positive");
  const auto& p = cfg.pref_ft;
  if (!(p.fraction > 0.0 && p.fraction <= 1.0)) fail("pref_ft fraction must be in (0, 1]");
  if (!(p.lr > 0.0) || p.updates < 0 || p.batch < 1 || p.rollouts < 1) fail("invalid pref_ft settings");
}

// ---- curve file ------------------------------------------------------------------------

void write_curve_csv(const std::string& path, const AlignmentCurve& curve) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "update,mean_reward,batch_success,rolling_success,dropped\n";
  char buf[160];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%d\n", p.update, p.mean_reward, p.batch_success, p.rolling_success, p.dropped);
    out << buf;
  }
}

AlignmentCurve read_curve_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  std::getline(in, line);
  AlignmentCurve curve;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    CurvePoint p;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%d", &p.update, &p.mean_reward, &p.batch_success, &p.rolling_success, &p.dropped) != 5) {
      throw std::runtime_error(path + ":" + std::to_string(n) + ": malformed curve row");
    }
    curve.push_back(p);
  }
  return curve;
}

// ---- preference fine-tuning ------------------------------------------------------------------

policy::BCHyper pref_ft_hyper(const PrefFTConfig& cfg) {
  policy::BCHyper h;
  h.lr = cfg.lr;
  h.batch = cfg.batch;
  h.updates = cfg.updates;
  h.warmup = 0;
  h.scope = policy::Scope::HeadOnly;
  return h;
}

std::vector<std::size_t> select_top(const rm::RewardModel& rm, const TrajectorySet& trajs, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("select_top: fraction must be in (0, 1]");
  std::vector<double> score(trajs.size());
  for (std::size_t i = 0; i < trajs.size(); ++i) score[i] = rm::normalized_reward(rm, trajs[i]);
  std::vector<std::size_t> order(trajs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return trajs[a].id < trajs[b].id;
  });
  // Guard against 0.2 * 10 landing a hair above 2.
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(trajs.size()) - 1e-9));
  order.resize(std::min(keep, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

PolicyCheckpoint preference_finetune(const PolicyCheckpoint& ckpt, const rm::RewardModel& rm, const TrajectorySet& trajs, const AlignConfig& cfg) {
  if (trajs.empty()) throw std::invalid_argument("preference_finetune: no trajectories");
  const auto picked = select_top(rm, trajs, cfg.pref_ft.fraction);
  if (picked.empty()) throw std::invalid_argument("preference_finetune: empty selection");
  TrajectorySet subset;
  subset.reserve(picked.size());
  for (auto i : picked) subset.push_back(trajs[i]);
  PolicyCheckpoint out = policy::train_bc(subset, pref_ft_hyper(cfg.pref_ft), ckpt, cfg.seed);
  out.provenance.stage = "pref-ft";
  return out;
}

// ---- REINFORCE ---------------------------------------------------------------------------------

Var reinforce_loss(const PolicyCheckpoint& ckpt, std::span<const Episode> episodes, const AlignConfig& cfg, const PolicyCheckpoint* ref) {
  if (episodes.empty()) throw std::invalid_argument("reinforce: empty batch");
  if (cfg.beta > 0.0 && !ref) throw std::invalid_argument("reinforce: beta > 0 needs a reference policy");
  const auto& pc = ckpt.config;
  const std::size_t comps = static_cast<std::size_t>(pc.components), buckets = static_cast<std::size_t>(pc.buckets);
  const double inv_b = 1.0 / static_cast<double>(episodes.size());

  double mean_ret = 0.0;
  for (const auto& e : episodes) {
    if (!(e.ret >= 0.0 && e.ret <= 1.0)) throw std::invalid_argument("reinforce: return outside [0, 1]");
    mean_ret += e.ret * inv_b;
  }
  auto advantage = [&](const Episode& e) { return cfg.baseline ? e.ret - mean_ret : e.ret; };

  auto targets_of = [&](const Trajectory& t) {
    return std::vector<std::int64_t>(t.actions.begin(), t.actions.end());
  };
  // Reference features come from the same code path as the policy's own, so
  // a reference equal to the policy gives a KL of exactly zero.
  auto ref_logits = [&](const Trajectory& t) {
    tn::NoGradGuard ng;
    const Tensor f = cfg.scope == policy::Scope::HeadOnly ? policy::cached_or_computed_features(*ref, t) : policy::trajectory_trunk(*ref, t)->value;
    return policy::apply_head(*ref, tn::constant(f))->value;
  };

  if (cfg.scope == policy::Scope::HeadOnly) {
    // Frozen trunk: one head pass over every step of the batch.
    std::vector<double> rows, weights, kl_weights;
    std::vector<std::int64_t> targets;
    Tensor ref_all;
    for (const auto& e : episodes) {
      const Tensor f = policy::cached_or_computed_features(ckpt, *e.traj);
      rows.insert(rows.end(), f.data.begin(), f.data.end());
      const auto tg = targets_of(*e.traj);
      targets.insert(targets.end(), tg.begin(), tg.end());
      weights.insert(weights.end(), f.rows(), advantage(e) * inv_b);
      kl_weights.insert(kl_weights.end(), f.rows(), cfg.beta * inv_b);
      if (cfg.beta > 0.0) {
        const Tensor r = ref_logits(*e.traj);
        ref_all.data.insert(ref_all.data.end(), r.data.begin(), r.data.end());
      }
    }
    const std::size_t n = weights.size();
    Var logits = policy::apply_head(ckpt, tn::constant(Tensor({n, static_cast<std::size_t>(pc.dim)}, std::move(rows))));
    Var loss = tn::categorical_nll(logits, targets, weights, comps, buckets);
    if (cfg.beta > 0.0) {
      ref_all.shape = {n, comps * buckets};
      loss = tn::add(loss, tn::categorical_kl(logits, ref_all, kl_weights, comps, buckets));
    }
    return loss;
  }

  Var loss;
  for (const auto& e : episodes) {
    Var logits = policy::apply_head(ckpt, policy::trajectory_trunk(ckpt, *e.traj));
    const std::size_t n = static_cast<std::size_t>(e.traj->duration());
    const std::vector<double> w(n, advantage(e) * inv_b);
    Var term = tn::categorical_nll(logits, targets_of(*e.traj), w, comps, buckets);
    if (cfg.beta > 0.0) {
      const std::vector<double> kw(n, cfg.beta * inv_b);
      term = tn::add(term, tn::categorical_kl(logits, ref_logits(*e.traj), kw, comps, buckets));
    }
    loss = loss ? tn::add(loss, term) : term;
  }
  return loss;
}

tn::OptimizerState make_optimizer(const AlignConfig& cfg) {
  tn::OptimizerState opt;
  opt.config.lr = cfg.lr;
  opt.config.weight_decay = 0.0;
  opt.config.clip_norm = 0.0;
  return opt;
}

void reinforce_batch_update(PolicyCheckpoint& ckpt, std::span<const Episode> episodes, const AlignConfig& cfg, const PolicyCheckpoint* ref,
                            tn::OptimizerState& opt) {
  if (cfg.scope == policy::Scope::HeadOnly) {
    ckpt.params.set_trainable(policy::is_head_param);
  } else {
    ckpt.params.set_trainable([](const std::string&) { return true; });
  }
  ckpt.params.zero_grad();
  Var loss = reinforce_loss(ckpt, episodes, cfg, ref);
  tn::backward(loss);
  tn::adamw_step(ckpt.params, opt);
  ckpt.params.set_trainable([](const std::string&) { return true; });
}

// ---- the loop ----------------------------------------------------------------------------------

namespace {

void check_compatible(const PolicyCheckpoint& ckpt, const rm::RewardModel& rm, const arena::ArenaSpec& spec) {
  const auto& enc = rm.encoder;
  const int obs = enc.kind == rm::EncoderKind::AgentFrozen ? enc.policy->config.obs_size() : static_cast<int>(enc.projection.rows());
  if (obs != ckpt.config.obs_size()) throw std::invalid_argument("align: reward model and policy disagree on observation size");
  if (rm.config.t_max < spec.max_steps) throw std::invalid_argument("align: reward model T_max is shorter than the episode limit");
  if (!rm.r_min || !rm.r_max) throw std::invalid_argument("align: reward model is untrained");
}

}  // namespace

AlignResult align(const PolicyCheckpoint& ckpt, const rm::RewardModel& rm, const arena::ArenaSpec& spec, const AlignConfig& cfg,
                  const TrajectorySet* pref_trajs, const FaultHook& fault) {
  validate(cfg);
  check_compatible(ckpt, rm, spec);
  AlignResult result{ckpt, {}, std::nullopt};
  result.policy.provenance = {"align", ckpt.id(), "", cfg.seed};

  if (cfg.pref_ft.enabled) {
    TrajectorySet drawn;
    if (!pref_trajs) {
      policy::RolloutOptions opts;
      opts.temperature = cfg.temperature;
      const auto stream = derive_seed(cfg.seed, 0x9f8);
      for (int i = 0; i < cfg.pref_ft.rollouts; ++i) {
        drawn.push_back(policy::rollout(ckpt, spec, std::nullopt, derive_seed(stream, static_cast<std::uint64_t>(i)), opts));
        drawn.back().id = static_cast<std::uint64_t>(i);
      }
      pref_trajs = &drawn;
    }
    result.policy = preference_finetune(ckpt, rm, *pref_trajs, cfg);
    result.after_pref_ft = result.policy;
    result.policy.provenance = {"align", ckpt.id(), "", cfg.seed};
  }

  std::optional<PolicyCheckpoint> ref;
  if (cfg.beta > 0.0) ref = result.policy;
  auto opt = make_optimizer(cfg);
  policy::RolloutOptions opts;
  opts.temperature = cfg.temperature;
  std::deque<std::pair<int, int>> window;  // (successes, episodes) per update

  for (int u = 0; u < cfg.updates; ++u) {
    const auto update_seed = derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(u));
    TrajectorySet batch;
    std::vector<double> returns;
    int dropped = 0;
    for (int i = 0; i < cfg.batch_episodes; ++i) {
      try {
        if (fault && fault(u, i)) throw std::runtime_error("injected rollout fault");
        Trajectory t = policy::rollout(result.policy, spec, std::nullopt, derive_seed(update_seed, static_cast<std::uint64_t>(i)), opts);
        t.id = static_cast<std::uint64_t>(i);
        const double r = rm::normalized_reward(rm, t);
        batch.push_back(std::move(t));
        returns.push_back(r);
      } catch (const std::exception&) {
        ++dropped;
      }
    }
    if (batch.empty()) continue;

    std::vector<Episode> episodes;
    int successes = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      episodes.push_back({&batch[i], returns[i]});
      successes += batch[i].outcome.pad == cfg.target;
    }
    reinforce_batch_update(result.policy, episodes, cfg, ref ? &*ref : nullptr, opt);

    window.emplace_back(successes, static_cast<int>(batch.size()));
    if (static_cast<int>(window.size()) > kRollingWindow) window.pop_front();
    int ws = 0, we = 0;
    for (const auto& [s, e] : window) {
      ws += s;
      we += e;
    }
    CurvePoint p;
    p.update = u;
    p.mean_reward = std::accumulate(returns.begin(), returns.end(), 0.0) / static_cast<double>(returns.size());
    p.batch_success = static_cast<double>(successes) / static_cast<double>(batch.size());
    p.rolling_success = static_cast<double>(ws) / static_cast<double>(we);
    p.dropped = dropped;
    result.curve.push_back(p);
  }
  return result;
}

}  // namespace deskalign::align
