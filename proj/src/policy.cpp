#include "deskalign/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "deskalign/hash.hpp"

namespace deskalign::policy {

using nlohmann::json;
using tn::Tensor;
using tn::Var;

namespace {

const Var& P(const PolicyCheckpoint& c, const std::string& name) { return c.params.get(name); }

std::string block(int l, const char* leafname) { return "blocks." + std::to_string(l) + "." + leafname; }

Var embed_obs(const PolicyCheckpoint& c, const Var& obs) {
  return tn::layer_norm(tn::linear(obs, P(c, "encoder.w"), P(c, "encoder.b")), P(c, "encoder.ln.g"), P(c, "encoder.ln.b"));
}

/// Previous-action token indices: C per row, start token first for t = 0.
void push_prev_indices(std::vector<std::int64_t>& out, const PolicyConfig& cfg, const std::uint8_t* prev) {
  if (prev == nullptr) {
    out.push_back(cfg.start_token());
    for (int c = 1; c < cfg.components; ++c) out.push_back(-1);
    return;
  }
  for (int c = 0; c < cfg.components; ++c) out.push_back(static_cast<std::int64_t>(c) * cfg.buckets + prev[c]);
}

/// x: [batch*seq, dim] token embeddings -> final layer-norm output.
Var run_trunk(const PolicyCheckpoint& c, Var x, std::size_t batch, std::size_t seq) {
  const auto& cfg = c.config;
  for (int l = 0; l < cfg.layers; ++l) {
    Var a = tn::layer_norm(x, P(c, block(l, "ln1.g")), P(c, block(l, "ln1.b")));
    Var qkv = tn::matmul(a, P(c, block(l, "attn.qkv.w")));
    Var att = tn::causal_attention(qkv, batch, seq, static_cast<std::size_t>(cfg.heads));
    x = tn::add(x, tn::linear(att, P(c, block(l, "attn.out.w")), P(c, block(l, "attn.out.b"))));
    Var m = tn::layer_norm(x, P(c, block(l, "ln2.g")), P(c, block(l, "ln2.b")));
    Var h = tn::gelu(tn::linear(m, P(c, block(l, "mlp.fc.w")), P(c, block(l, "mlp.fc.b"))));
    x = tn::add(x, tn::linear(h, P(c, block(l, "mlp.proj.w")), P(c, block(l, "mlp.proj.b"))));
  }
  return tn::layer_norm(x, P(c, "final_ln.g"), P(c, "final_ln.b"));
}

Var add_context(const PolicyCheckpoint& c, const Var& z, std::span<const std::int64_t> prev, std::span<const std::size_t> positions) {
  Var acts = tn::embedding_sum(P(c, "action_embed"), prev, static_cast<std::size_t>(c.config.components));
  return tn::add(tn::add(z, acts), tn::gather_rows(P(c, "pos_embed"), positions));
}

void check_trajectory(const PolicyConfig& cfg, const Trajectory& t) {
  if (t.obs_size != cfg.obs_size() || t.components != cfg.components) {
    throw std::invalid_argument("policy: trajectory " + std::to_string(t.id) + " shape (obs " + std::to_string(t.obs_size) +
                                ", components " + std::to_string(t.components) + ") does not match the policy config");
  }
}

bool is_noop(std::span<const std::uint8_t> a, int buckets) {
  const int mid = (buckets - 1) / 2;
  return std::all_of(a.begin(), a.end(), [&](std::uint8_t b) { return b == mid; });
}

Tensor normal_tensor(tn::Shape shape, double sd, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = sd * rng.normal();
  return t;
}

}  // namespace

// ---- config ------------------------------------------------------------------------

void validate(const PolicyConfig& cfg) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("policy config: " + m); };
  if (cfg.layers < 1 || cfg.dim < 1 || cfg.heads < 1 || cfg.mlp_hidden < 1 || cfg.head_hidden < 1) fail("sizes must be positive");
  if (cfg.dim % cfg.heads != 0) fail("dim must be divisible by heads");
  if (cfg.context < 1) fail("context must be >= 1");
  if (cfg.buckets < 2) fail("buckets must be >= 2");
  if (cfg.buckets > 256) fail("buckets must fit in a byte");
  if (cfg.components < 3) fail("at least 3 action components are required");
  if (cfg.view < 1) fail("view must be >= 1");
}

PolicyConfig preset(const std::string& name) {
  PolicyConfig cfg;
  if (name == "medium") return cfg;
  if (name == "small") {
    cfg.layers = 1;
    cfg.dim = 32;
    cfg.heads = 2;
    cfg.mlp_hidden = 128;
    cfg.head_hidden = 64;
    return cfg;
  }
  if (name == "large") {
    cfg.layers = 3;
    cfg.dim = 96;
    cfg.heads = 4;
    cfg.mlp_hidden = 384;
    cfg.head_hidden = 192;
    return cfg;
  }
  throw std::invalid_argument("unknown policy preset '" + name + "'");
}

json config_to_json(const PolicyConfig& c) {
  return json{{"layers", c.layers},   {"dim", c.dim},         {"heads", c.heads},
              {"mlp_hidden", c.mlp_hidden}, {"head_hidden", c.head_hidden}, {"context", c.context},
              {"components", c.components}, {"buckets", c.buckets},   {"view", c.view}};
}

PolicyConfig config_from_json(const json& j) {
  PolicyConfig c;
  c.layers = j.at("layers").get<int>();
  c.dim = j.at("dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_hidden = j.at("mlp_hidden").get<int>();
  c.head_hidden = j.at("head_hidden").get<int>();
  c.context = j.at("context").get<int>();
  c.components = j.at("components").get<int>();
  c.buckets = j.at("buckets").get<int>();
  c.view = j.at("view").get<int>();
  validate(c);
  return c;
}

// ---- checkpoint ----------------------------------------------------------------------

std::string PolicyCheckpoint::id() const {
  tn::Checkpoint c{config_to_json(config).dump(), params};
  return hex64(fnv1a64(tn::encode_checkpoint(c)));
}

std::uint64_t PolicyCheckpoint::trunk_hash() const {
  std::uint64_t h = fnv1a64(config_to_json(config).dump());
  for (const auto& e : params.entries()) {
    if (is_head_param(e.name)) continue;
    h = fnv1a64(e.name, h);
    const auto& d = e.var->value.data;
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double)), h);
  }
  return h;
}

PolicyCheckpoint init_policy(const PolicyConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  PolicyCheckpoint c;
  c.config = cfg;
  c.provenance = {"init", "", "", seed};
  Rng rng(derive_seed(seed, 0x9e1));
  const std::size_t d = static_cast<std::size_t>(cfg.dim);
  const double resid_sd = 0.02 / std::sqrt(2.0 * cfg.layers);
  auto& p = c.params;
  p.add("encoder.w", normal_tensor({static_cast<std::size_t>(cfg.obs_size()), d}, 1.0 / std::sqrt(cfg.obs_size()), rng));
  p.add("encoder.b", Tensor({d}));
  p.add("encoder.ln.g", Tensor({d}, 1.0));
  p.add("encoder.ln.b", Tensor({d}));
  p.add("action_embed", normal_tensor({static_cast<std::size_t>(cfg.action_outputs() + 1), d}, 0.02, rng));
  p.add("pos_embed", normal_tensor({static_cast<std::size_t>(cfg.context), d}, 0.02, rng));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::size_t m = static_cast<std::size_t>(cfg.mlp_hidden);
    p.add(block(l, "ln1.g"), Tensor({d}, 1.0));
    p.add(block(l, "ln1.b"), Tensor({d}));
    p.add(block(l, "attn.qkv.w"), normal_tensor({d, 3 * d}, 0.02, rng));
    p.add(block(l, "attn.out.w"), normal_tensor({d, d}, resid_sd, rng));
    p.add(block(l, "attn.out.b"), Tensor({d}));
    p.add(block(l, "ln2.g"), Tensor({d}, 1.0));
    p.add(block(l, "ln2.b"), Tensor({d}));
    p.add(block(l, "mlp.fc.w"), normal_tensor({d, m}, 0.02, rng));
    p.add(block(l, "mlp.fc.b"), Tensor({m}));
    p.add(block(l, "mlp.proj.w"), normal_tensor({m, d}, resid_sd, rng));
    p.add(block(l, "mlp.proj.b"), Tensor({d}));
  }
  p.add("final_ln.g", Tensor({d}, 1.0));
  p.add("final_ln.b", Tensor({d}));
  const std::size_t hh = static_cast<std::size_t>(cfg.head_hidden);
  p.add("head.fc.w", normal_tensor({d, hh}, 1.0 / std::sqrt(cfg.dim), rng));
  p.add("head.fc.b", Tensor({hh}));
  p.add("head.out.w", Tensor({hh, static_cast<std::size_t>(cfg.action_outputs())}));
  p.add("head.out.b", Tensor({static_cast<std::size_t>(cfg.action_outputs())}));
  return c;
}

void write_policy(const std::string& path, const PolicyCheckpoint& ckpt) {
  json header{{"kind", "policy"},
              {"config", config_to_json(ckpt.config)},
              {"provenance",
               {{"stage", ckpt.provenance.stage},
                {"parent", ckpt.provenance.parent},
                {"dataset", ckpt.provenance.dataset},
                {"seed", ckpt.provenance.seed}}}};
  tn::write_checkpoint(path, tn::Checkpoint{header.dump(), ckpt.params});
}

PolicyCheckpoint read_policy(const std::string& path) {
  tn::Checkpoint raw = tn::read_checkpoint(path);
  const json header = json::parse(raw.header);
  if (header.value("kind", "") != "policy") throw std::runtime_error("'" + path + "' is not a policy checkpoint");
  PolicyCheckpoint c;
  c.config = config_from_json(header.at("config"));
  const auto& prov = header.at("provenance");
  c.provenance = {prov.at("stage").get<std::string>(), prov.at("parent").get<std::string>(), prov.at("dataset").get<std::string>(),
                  prov.at("seed").get<std::uint64_t>()};
  // Shape check against a freshly laid-out parameter set.
  const PolicyCheckpoint layout = init_policy(c.config, 0);
  if (raw.params.size() != layout.params.size()) throw std::runtime_error("policy checkpoint: parameter count mismatch");
  for (const auto& e : layout.params.entries()) {
    if (!raw.params.contains(e.name) || raw.params.get(e.name)->value.shape != e.var->value.shape) {
      throw std::runtime_error("policy checkpoint: parameter '" + e.name + "' missing or misshapen");
    }
  }
  c.params = std::move(raw.params);
  return c;
}

// ---- inference ----------------------------------------------------------------------

std::vector<double> encode(const PolicyCheckpoint& ckpt, std::span<const double> obs) {
  if (static_cast<int>(obs.size()) != ckpt.config.obs_size()) {
    throw std::invalid_argument("encode: observation has " + std::to_string(obs.size()) + " values, expected " +
                                std::to_string(ckpt.config.obs_size()));
  }
  tn::NoGradGuard ng;
  Var z = embed_obs(ckpt, tn::constant(Tensor({1, obs.size()}, std::vector<double>(obs.begin(), obs.end()))));
  return z->value.data;
}

void ContextBuffer::push(std::vector<double> embedding, const std::optional<arena::Action>& previous) {
  slots_.push_back({std::move(embedding), previous});
  while (static_cast<int>(slots_.size()) > capacity_) slots_.pop_front();
}

std::vector<double> trunk_features(const PolicyCheckpoint& ckpt, const ContextBuffer& ctx) {
  if (ctx.empty()) throw std::invalid_argument("policy: empty context");
  const auto& cfg = ckpt.config;
  const std::size_t t = ctx.size(), d = static_cast<std::size_t>(cfg.dim);
  if (static_cast<int>(t) > cfg.context) throw std::invalid_argument("policy: context longer than H");
  tn::NoGradGuard ng;
  Tensor z({t, d});
  std::vector<std::int64_t> prev;
  std::vector<std::size_t> pos(t);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(cfg.components));
  for (std::size_t i = 0; i < t; ++i) {
    const auto& slot = ctx.slots()[i];
    if (slot.embedding.size() != d) throw std::invalid_argument("policy: context embedding width mismatch");
    std::copy(slot.embedding.begin(), slot.embedding.end(), z.row(i).begin());
    if (slot.previous) {
      for (int c = 0; c < cfg.components; ++c) buf[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(slot.previous->components.at(static_cast<std::size_t>(c)));
      push_prev_indices(prev, cfg, buf.data());
    } else {
      push_prev_indices(prev, cfg, nullptr);
    }
    pos[i] = i;
  }
  Var out = run_trunk(ckpt, add_context(ckpt, tn::constant(std::move(z)), prev, pos), 1, t);
  auto last = out->value.row(t - 1);
  return {last.begin(), last.end()};
}

Var apply_head(const PolicyCheckpoint& ckpt, const Var& features) {
  Var h = tn::gelu(tn::linear(features, P(ckpt, "head.fc.w"), P(ckpt, "head.fc.b")));
  return tn::linear(h, P(ckpt, "head.out.w"), P(ckpt, "head.out.b"));
}

std::vector<double> head_logits(const PolicyCheckpoint& ckpt, std::span<const double> features) {
  tn::NoGradGuard ng;
  Var f = tn::constant(Tensor({1, features.size()}, std::vector<double>(features.begin(), features.end())));
  return apply_head(ckpt, f)->value.data;
}

Tensor logits(const PolicyCheckpoint& ckpt, const ContextBuffer& ctx) {
  auto l = head_logits(ckpt, trunk_features(ckpt, ctx));
  return Tensor({static_cast<std::size_t>(ckpt.config.components), static_cast<std::size_t>(ckpt.config.buckets)}, std::move(l));
}

arena::Action sample_action(std::span<const double> logits, int components, int buckets, double temperature, Rng& rng, bool greedy) {
  arena::Action a;
  a.components.resize(static_cast<std::size_t>(components));
  for (int c = 0; c < components; ++c) {
    auto row = logits.subspan(static_cast<std::size_t>(c) * buckets, static_cast<std::size_t>(buckets));
    if (greedy) {
      a.components[static_cast<std::size_t>(c)] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    } else {
      a.components[static_cast<std::size_t>(c)] = static_cast<int>(tn::sample_categorical(tn::softmax(row, temperature), rng));
    }
  }
  return a;
}

arena::Action act(const PolicyCheckpoint& ckpt, const ContextBuffer& ctx, double temperature, Rng& rng, bool greedy) {
  const Tensor l = logits(ckpt, ctx);
  return sample_action(l.data, ckpt.config.components, ckpt.config.buckets, temperature, rng, greedy);
}

// ---- whole-trajectory passes ----------------------------------------------------------------

Var trajectory_trunk(const PolicyCheckpoint& ckpt, const Trajectory& traj) {
  const auto& cfg = ckpt.config;
  check_trajectory(cfg, traj);
  const std::size_t d = static_cast<std::size_t>(traj.duration());
  const std::size_t h = static_cast<std::size_t>(cfg.context);
  if (d == 0) throw std::invalid_argument("policy: empty trajectory");
  const std::size_t obs = static_cast<std::size_t>(cfg.obs_size());

  Tensor x({d, obs});
  for (std::size_t t = 0; t < d; ++t) {
    auto q = traj.observation(static_cast<int>(t));
    for (std::size_t i = 0; i < obs; ++i) x.data[t * obs + i] = dequantize_unit(q[i]);
  }
  Var z = embed_obs(ckpt, tn::constant(std::move(x)));

  // Window w covers steps w..w+T-1. Window 0 yields every step below H (the
  // causal mask makes its prefix rows equal to shorter windows); later
  // windows contribute only their last row.
  const std::size_t seq = std::min(d, h);
  const std::size_t windows = d - seq + 1;
  std::vector<std::size_t> steps, pos;
  std::vector<std::int64_t> prev;
  steps.reserve(windows * seq);
  for (std::size_t w = 0; w < windows; ++w) {
    for (std::size_t j = 0; j < seq; ++j) {
      const std::size_t t = w + j;
      steps.push_back(t);
      pos.push_back(j);
      push_prev_indices(prev, cfg, j == 0 && w == 0 ? nullptr : traj.action(static_cast<int>(t - 1)).data());
    }
  }
  // A window starting mid-trajectory still conditions its first token on the
  // action before it, exactly like a rollout context that has slid forward.
  Var tokens = add_context(ckpt, tn::gather_rows(z, steps), prev, pos);
  Var out = run_trunk(ckpt, tokens, windows, seq);
  std::vector<std::size_t> pick(d);
  for (std::size_t t = 0; t < d; ++t) pick[t] = t < seq ? t : (t - seq + 1) * seq + (seq - 1);
  return tn::gather_rows(out, pick);
}

Tensor cached_or_computed_features(const PolicyCheckpoint& ckpt, const Trajectory& traj) {
  if (traj.features && traj.features->trunk_hash == ckpt.trunk_hash() &&
      traj.features->values.rows() == static_cast<std::size_t>(traj.duration())) {
    return traj.features->values;
  }
  tn::NoGradGuard ng;
  return trajectory_trunk(ckpt, traj)->value;
}

void ensure_features(const PolicyCheckpoint& ckpt, TrajectorySet& trajs) {
  const std::uint64_t h = ckpt.trunk_hash();
  for (auto& t : trajs) {
    if (t.features && t.features->trunk_hash == h) continue;
    tn::NoGradGuard ng;
    t.features = std::make_shared<FeatureCache>(FeatureCache{h, trajectory_trunk(ckpt, t)->value});
  }
}

// ---- rollouts ---------------------------------------------------------------------------

Trajectory rollout(const PolicyCheckpoint& ckpt, const arena::ArenaSpec& spec, std::optional<int> spawn, std::uint64_t seed,
                   const RolloutOptions& opts) {
  const auto& cfg = ckpt.config;
  if (cfg.view != spec.view || cfg.buckets != spec.buckets) throw std::invalid_argument("rollout: policy and arena disagree on view or buckets");
  const std::uint64_t reset_seed = derive_seed(seed, 0);
  const int spawn_index = spawn ? *spawn : arena::sample_spawn(spec, reset_seed);
  auto start = arena::reset(spec, spawn_index, reset_seed);
  Rng rng(derive_seed(seed, 1));

  Trajectory traj;
  traj.spawn = spawn_index;
  traj.components = cfg.components;
  traj.source = TrajectorySource::Rollout;
  std::vector<double> feats;

  ContextBuffer ctx(cfg.context);
  arena::AgentState state = start.state;
  arena::Observation obs = std::move(start.observation);
  std::optional<arena::Action> prev;
  while (true) {
    ctx.push(encode(ckpt, quantized_values(obs)), prev);
    const auto f = trunk_features(ckpt, ctx);
    const auto l = head_logits(ckpt, f);
    arena::Action a = sample_action(l, cfg.components, cfg.buckets, opts.temperature, rng, opts.greedy);
    if (opts.record_features) feats.insert(feats.end(), f.begin(), f.end());
    traj.push_step(obs, a, Pose{state.position.x, state.position.y, state.heading});
    auto next = arena::step(spec, state, a);
    state = next.state;
    obs = std::move(next.observation);
    prev = std::move(a);
    if (next.outcome) {
      traj.outcome = *next.outcome;
      break;
    }
  }
  traj.poses.push_back(Pose{state.position.x, state.position.y, state.heading});
  if (opts.record_features) {
    const std::size_t d = static_cast<std::size_t>(traj.duration());
    traj.features = std::make_shared<FeatureCache>(
        FeatureCache{ckpt.trunk_hash(), Tensor({d, static_cast<std::size_t>(cfg.dim)}, std::move(feats))});
  }
  return traj;
}

Trajectory run_controller(const arena::ArenaSpec& spec, const Controller& controller, std::optional<int> spawn, std::uint64_t seed,
                          int components) {
  const std::uint64_t reset_seed = derive_seed(seed, 0);
  const int spawn_index = spawn ? *spawn : arena::sample_spawn(spec, reset_seed);
  auto start = arena::reset(spec, spawn_index, reset_seed);
  Rng rng(derive_seed(seed, 1));
  Trajectory traj;
  traj.spawn = spawn_index;
  traj.components = components;
  arena::AgentState state = start.state;
  arena::Observation obs = std::move(start.observation);
  while (true) {
    arena::Action a = controller(state, obs, rng);
    traj.push_step(obs, a, Pose{state.position.x, state.position.y, state.heading});
    auto next = arena::step(spec, state, a);
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

json EvalReport::summary() const {
  json per_spawn = json::array();
  for (const auto& row : this->per_spawn) {
    per_spawn.push_back({{"Left", row[0]}, {"Middle", row[1]}, {"Right", row[2]}, {"Timeout", row[3]}});
  }
  return json{{"episodes", episodes},
              {"counts", {{"Left", counts[0]}, {"Middle", counts[1]}, {"Right", counts[2]}, {"Timeout", counts[3]}}},
              {"failure_rate", failure_rate()},
              {"mean_duration", mean_duration},
              {"per_spawn", per_spawn}};
}

EvalReport summarize(TrajectorySet trajs) {
  EvalReport r;
  r.episodes = static_cast<int>(trajs.size());
  double total = 0.0;
  for (const auto& t : trajs) {
    const std::size_t k = t.outcome.pad ? arena::pad_index(*t.outcome.pad) : 3;
    ++r.counts[k];
    ++r.per_spawn[static_cast<std::size_t>(t.spawn)][k];
    total += t.duration();
  }
  r.mean_duration = trajs.empty() ? 0.0 : total / static_cast<double>(trajs.size());
  r.trajectories = std::move(trajs);
  return r;
}

EvalReport evaluate(const PolicyCheckpoint& ckpt, const arena::ArenaSpec& spec, int episodes, double temperature, std::uint64_t seed,
                    bool greedy) {
  if (episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  TrajectorySet trajs;
  trajs.reserve(static_cast<std::size_t>(episodes));
  RolloutOptions opts{temperature, greedy, true};
  for (int i = 0; i < episodes; ++i) {
    Trajectory t = rollout(ckpt, spec, std::nullopt, derive_seed(seed, static_cast<std::uint64_t>(i)), opts);
    t.id = static_cast<std::uint64_t>(i);
    trajs.push_back(std::move(t));
  }
  return summarize(std::move(trajs));
}

EvalReport evaluate(const std::function<Controller()>& make, const arena::ArenaSpec& spec, int episodes, std::uint64_t seed,
                    int components) {
  if (episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  TrajectorySet trajs;
  for (int i = 0; i < episodes; ++i) {
    Trajectory t = run_controller(spec, make(), std::nullopt, derive_seed(seed, static_cast<std::uint64_t>(i)), components);
    t.id = static_cast<std::uint64_t>(i);
    trajs.push_back(std::move(t));
  }
  return summarize(std::move(trajs));
}

// ---- behavioural cloning ----------------------------------------------------------------------

std::string scope_name(Scope s) { return s == Scope::Full ? "full" : "head"; }

Scope parse_scope(const std::string& s) {
  if (s == "full") return Scope::Full;
  if (s == "head") return Scope::HeadOnly;
  throw std::invalid_argument("unknown training scope '" + s + "' (expected full or head)");
}

std::vector<Window> sample_windows(const TrajectorySet& data, int count, int context, Rng& rng) {
  std::vector<Window> w(static_cast<std::size_t>(count));
  for (auto& win : w) {
    win.traj = static_cast<std::size_t>(rng.below(data.size()));
    const int d = data[win.traj].duration();
    win.start = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(0, d - context) + 1)));
  }
  return w;
}

Var bc_loss(const PolicyCheckpoint& ckpt, const TrajectorySet& data, std::span<const Window> windows, bool filter_noops) {
  const auto& cfg = ckpt.config;
  const std::size_t h = static_cast<std::size_t>(cfg.context), obs = static_cast<std::size_t>(cfg.obs_size());
  const std::size_t rows = windows.size() * h, comps = static_cast<std::size_t>(cfg.components);
  Tensor x({rows, obs});
  std::vector<std::int64_t> prev, targets(rows * comps, -1);
  std::vector<std::size_t> pos(rows);
  std::vector<double> weights(rows, 0.0);
  std::size_t valid = 0;
  for (std::size_t b = 0; b < windows.size(); ++b) {
    const Trajectory& t = data.at(windows[b].traj);
    check_trajectory(cfg, t);
    for (std::size_t j = 0; j < h; ++j) {
      const std::size_t r = b * h + j;
      const int step = windows[b].start + static_cast<int>(j);
      pos[r] = j;
      if (step >= t.duration()) {
        push_prev_indices(prev, cfg, nullptr);  // padding row, no target
        continue;
      }
      auto q = t.observation(step);
      for (std::size_t i = 0; i < obs; ++i) x.data[r * obs + i] = dequantize_unit(q[i]);
      push_prev_indices(prev, cfg, step == 0 ? nullptr : t.action(step - 1).data());
      auto a = t.action(step);
      if (filter_noops && is_noop(a, cfg.buckets)) continue;
      for (std::size_t c = 0; c < comps; ++c) targets[r * comps + c] = a[c];
      weights[r] = 1.0;
      ++valid;
    }
  }
  if (valid > 0) {
    for (auto& w : weights) w /= static_cast<double>(valid);
  }
  Var z = embed_obs(ckpt, tn::constant(std::move(x)));
  Var out = run_trunk(ckpt, add_context(ckpt, z, prev, pos), windows.size(), h);
  return tn::categorical_nll(apply_head(ckpt, out), targets, weights, comps, static_cast<std::size_t>(cfg.buckets));
}

Var bc_loss_head(const PolicyCheckpoint& ckpt, const TrajectorySet& data, std::span<const Tensor> features, std::span<const Window> windows,
                 bool filter_noops) {
  const auto& cfg = ckpt.config;
  const std::size_t dim = static_cast<std::size_t>(cfg.dim), comps = static_cast<std::size_t>(cfg.components);
  std::vector<double> rows;
  std::vector<std::int64_t> targets;
  for (const auto& w : windows) {
    const Trajectory& t = data.at(w.traj);
    const Tensor& f = features[w.traj];
    const int end = std::min(t.duration(), w.start + cfg.context);
    for (int step = w.start; step < end; ++step) {
      auto a = t.action(step);
      if (filter_noops && is_noop(a, cfg.buckets)) continue;
      auto fr = f.row(static_cast<std::size_t>(step));
      rows.insert(rows.end(), fr.begin(), fr.end());
      for (std::size_t c = 0; c < comps; ++c) targets.push_back(a[c]);
    }
  }
  const std::size_t n = targets.size() / comps;
  if (n == 0) return tn::constant(Tensor::scalar(0.0));
  std::vector<double> weights(n, 1.0 / static_cast<double>(n));
  Var logits = apply_head(ckpt, tn::constant(Tensor({n, dim}, std::move(rows))));
  return tn::categorical_nll(logits, targets, weights, comps, static_cast<std::size_t>(cfg.buckets));
}

PolicyCheckpoint train_bc(const TrajectorySet& data, const BCHyper& hyper, const PolicyCheckpoint& init, std::uint64_t seed, BCStats* stats) {
  if (data.empty()) throw std::invalid_argument("train_bc: empty dataset");
  if (hyper.updates < 0 || hyper.batch < 1 || !(hyper.lr >= 0.0)) throw std::invalid_argument("train_bc: invalid hyperparameters");
  for (const auto& t : data) check_trajectory(init.config, t);

  PolicyCheckpoint ckpt = init;
  ckpt.provenance = {"bc", init.id(), "", seed};
  if (hyper.updates == 0) return ckpt;

  if (hyper.scope == Scope::HeadOnly) {
    ckpt.params.set_trainable(is_head_param);
  } else {
    ckpt.params.set_trainable([](const std::string&) { return true; });
  }
  std::vector<Tensor> features;
  if (hyper.scope == Scope::HeadOnly) {
    features.reserve(data.size());
    for (const auto& t : data) features.push_back(cached_or_computed_features(ckpt, t));
  }

  tn::OptimizerState opt;
  opt.config.lr = hyper.lr;
  opt.config.weight_decay = hyper.weight_decay;
  opt.config.clip_norm = hyper.clip_norm;
  Rng rng(derive_seed(seed, 0xbc));
  for (int u = 0; u < hyper.updates; ++u) {
    const auto windows = sample_windows(data, hyper.batch, ckpt.config.context, rng);
    ckpt.params.zero_grad();
    Var loss = hyper.scope == Scope::HeadOnly ? bc_loss_head(ckpt, data, features, windows, hyper.filter_noops)
                                              : bc_loss(ckpt, data, windows, hyper.filter_noops);
    tn::backward(loss);
    tn::adamw_step(ckpt.params, opt, warmup_scale(u, hyper.warmup));
    if (stats) stats->losses.push_back(loss->value.item());
  }
  ckpt.params.set_trainable([](const std::string&) { return true; });
  return ckpt;
}

PolicyCheckpoint train_bc(const TrajectorySet& data, const BCHyper& hyper, const PolicyConfig& cfg, std::uint64_t seed, BCStats* stats) {
  PolicyCheckpoint init = init_policy(cfg, derive_seed(seed, 0x1417));
  PolicyCheckpoint out = train_bc(data, hyper, init, seed, stats);
  out.provenance.parent.clear();
  return out;
}

}  // namespace deskalign::policy
