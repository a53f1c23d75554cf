#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "deskalign/pipeline.hpp"

namespace deskalign::pipeline {

using nlohmann::json;

namespace {

struct Entry {
  std::string section;
  std::string key;
  std::string value;
  int line = 0;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Strips a trailing comment outside double quotes.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

class Binder {
 public:
  explicit Binder(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(const Entry& e, const std::string& msg) const {
    throw ConfigError(source_ + ":" + std::to_string(e.line) + ": " + msg);
  }

  long long integer(const Entry& e) const {
    long long v = 0;
    auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
    if (ec != std::errc() || p != e.value.data() + e.value.size()) fail(e, e.key + ": expected an integer, got '" + e.value + "'");
    return v;
  }
  int int32(const Entry& e) const {
    const long long v = integer(e);
    if (v < INT32_MIN || v > INT32_MAX) fail(e, e.key + ": out of range");
    return static_cast<int>(v);
  }
  std::uint64_t unsigned64(const Entry& e) const {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
    if (ec != std::errc() || p != e.value.data() + e.value.size()) fail(e, e.key + ": expected a non-negative integer, got '" + e.value + "'");
    return v;
  }
  double real(const Entry& e) const { return parse_real(e, e.value); }
  bool boolean(const Entry& e) const {
    if (e.value == "true") return true;
    if (e.value == "false") return false;
    fail(e, e.key + ": expected true or false, got '" + e.value + "'");
  }
  std::string string(const Entry& e) const {
    const auto& v = e.value;
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
    if (v.find('"') != std::string::npos) fail(e, e.key + ": unbalanced quote");
    return v;
  }
  std::vector<double> list(const Entry& e) const {
    std::vector<double> out;
    std::stringstream ss(e.value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_real(e, trim(item)));
    if (out.empty()) fail(e, e.key + ": expected a list of numbers");
    return out;
  }
  template <class F>
  auto guarded(const Entry& e, F&& f) const {
    try {
      return f();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& ex) {
      fail(e, e.key + ": " + ex.what());
    }
  }

 private:
  double parse_real(const Entry& e, const std::string& s) const {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty()) fail(e, e.key + ": expected a number, got '" + s + "'");
    return v;
  }
  std::string source_;
};

using Setter = std::function<void(RunConfig&, const Binder&, const Entry&)>;
using Table = std::map<std::string, std::map<std::string, Setter>>;

template <class T>
Setter set_int(T RunConfig::*field) {
  return [field](RunConfig& c, const Binder& b, const Entry& e) { c.*field = b.int32(e); };
}

void bc_keys(std::map<std::string, Setter>& t, const std::string& prefix, policy::BCHyper RunConfig::*h) {
  t[prefix + "lr"] = [h](RunConfig& c, const Binder& b, const Entry& e) { (c.*h).lr = b.real(e); };
  t[prefix + "batch"] = [h](RunConfig& c, const Binder& b, const Entry& e) { (c.*h).batch = b.int32(e); };
  t[prefix + "updates"] = [h](RunConfig& c, const Binder& b, const Entry& e) { (c.*h).updates = b.int32(e); };
  t[prefix + "warmup"] = [h](RunConfig& c, const Binder& b, const Entry& e) { (c.*h).warmup = b.int32(e); };
  t[prefix + "weight_decay"] = [h](RunConfig& c, const Binder& b, const Entry& e) { (c.*h).weight_decay = b.real(e); };
  t[prefix + "clip_norm"] = [h](RunConfig& c, const Binder& b, const Entry& e) { (c.*h).clip_norm = b.real(e); };
  t[prefix + "scope"] = [h](RunConfig& c, const Binder& b, const Entry& e) {
    (c.*h).scope = b.guarded(e, [&] { return policy::parse_scope(b.string(e)); });
  };
  t[prefix + "filter_noops"] = [h](RunConfig& c, const Binder& b, const Entry& e) { (c.*h).filter_noops = b.boolean(e); };
}

const Table& table() {
  static const Table t = [] {
    Table t;
    t[""]["seed"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.seed = b.unsigned64(e); };

    auto& a = t["arena"];
    a["width"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.arena.width = b.real(e); };
    a["height"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.arena.height = b.real(e); };
    a["max_steps"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.arena.max_steps = b.int32(e); };
    a["dt"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.arena.dt = b.real(e); };
    a["s_max"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.arena.s_max = b.real(e); };
    a["omega_max"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.arena.omega_max = b.real(e); };
    a["view"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.arena.view = b.int32(e); };
    a["buckets"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.arena.buckets = b.int32(e); };
    a["randomize_heading"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.arena.randomize_heading = b.boolean(e); };
    a["pad_radius"] = [](RunConfig& c, const Binder& b, const Entry& e) {
      const double r = b.real(e);
      for (auto& p : c.arena.pads) p.radius = r;
    };
    a["spawn_weights"] = [](RunConfig& c, const Binder& b, const Entry& e) {
      const auto v = b.list(e);
      if (v.size() != 4) b.fail(e, "spawn_weights: expected 4 values");
      std::copy(v.begin(), v.end(), c.arena.spawn_weights.begin());
    };

    auto& d = t["demogen"];
    d["pad_mix"] = [](RunConfig& c, const Binder& b, const Entry& e) {
      const auto v = b.list(e);
      if (v.size() != 3) b.fail(e, "pad_mix: expected 3 values");
      std::copy(v.begin(), v.end(), c.demo.pad_mix.begin());
    };
    d["novice_fraction"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.demo.novice_fraction = b.real(e); };
    d["noise_eps"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.demo.noise_eps = b.real(e); };
    d["episodes"] = set_int(&RunConfig::pretrain_episodes);
    d["curated_per_pad"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.curated.per_pad = b.int32(e); };
    d["curated_noise_eps"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.curated.noise_eps = b.real(e); };
    d["spawn_bias"] = [](RunConfig& c, const Binder& b, const Entry& e) {
      const auto v = b.string(e);
      if (v == "none") c.curated.spawn_bias.reset();
      else if (v == "right-from-left") c.curated.spawn_bias = demogen::right_from_left_bias();
      else b.fail(e, "spawn_bias: expected none or right-from-left");
    };

    auto& p = t["policy"];
    p["preset"] = [](RunConfig& c, const Binder& b, const Entry& e) {
      c.policy_preset = b.string(e);
      c.policy = b.guarded(e, [&] { return policy::preset(c.policy_preset); });
    };
    p["layers"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.policy.layers = b.int32(e); };
    p["dim"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.policy.dim = b.int32(e); };
    p["heads"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.policy.heads = b.int32(e); };
    p["mlp_hidden"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.policy.mlp_hidden = b.int32(e); };
    p["head_hidden"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.policy.head_hidden = b.int32(e); };
    p["context"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.policy.context = b.int32(e); };
    bc_keys(p, "pretrain_", &RunConfig::pretrain);
    bc_keys(p, "finetune_", &RunConfig::finetune);
    p["finetune_from_scratch"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.finetune_from_scratch = b.boolean(e); };
    p["eval_from"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.eval_from = b.string(e); };
    p["eval_episodes"] = set_int(&RunConfig::eval_episodes);
    p["eval_temperature"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.eval_temperature = b.real(e); };

    auto& r = t["prefs"];
    r["rollouts_train"] = set_int(&RunConfig::rollouts_train);
    r["rollouts_eval"] = set_int(&RunConfig::rollouts_eval);
    r["temperature"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.rollout_temperature = b.real(e); };
    r["target"] = [](RunConfig& c, const Binder& b, const Entry& e) {
      c.target = b.guarded(e, [&] { return arena::parse_pad(b.string(e)); });
    };
    r["cap"] = [](RunConfig& c, const Binder& b, const Entry& e) {
      const long long v = b.integer(e);
      if (v < 0) b.fail(e, "cap: must be >= 0");
      c.pair_cap = v == 0 ? std::nullopt : std::optional<std::size_t>(static_cast<std::size_t>(v));
    };
    r["subsample"] = [](RunConfig& c, const Binder& b, const Entry& e) {
      const auto v = b.string(e);
      if (v == "pairs") c.subsample = prefs::Subsample::Pairs;
      else if (v == "trajectories") c.subsample = prefs::Subsample::Trajectories;
      else b.fail(e, "subsample: expected pairs or trajectories");
    };
    r["labels"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.labels = b.string(e); };
    r["label_pairs"] = set_int(&RunConfig::label_pairs);

    auto& w = t["reward"];
    w["encoder"] = [](RunConfig& c, const Binder& b, const Entry& e) {
      c.encoder = b.guarded(e, [&] { return rm::parse_kind(b.string(e)); });
    };
    w["projection_dim"] = set_int(&RunConfig::projection_dim);
    w["t_max"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.rm.t_max = b.int32(e); };
    w["step_hidden"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.rm.step_hidden = b.int32(e); };
    w["step_out"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.rm.step_out = b.int32(e); };
    w["head_hidden"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.rm.head_hidden = b.int32(e); };
    w["lr"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.rm_hyper.lr = b.real(e); };
    w["minibatch"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.rm_hyper.minibatch = b.int32(e); };
    w["epochs"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.rm_hyper.epochs = b.int32(e); };
    w["l2"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.rm_hyper.l2 = b.real(e); };
    w["max_steps"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.rm_hyper.max_steps = b.int32(e); };
    w["sweep_budgets"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.sweep_budgets = b.list(e); };
    w["sweep_seeds"] = set_int(&RunConfig::sweep_seeds);

    auto& g = t["align"];
    g["updates"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.align.updates = b.int32(e); };
    g["batch_episodes"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.align.batch_episodes = b.int32(e); };
    g["lr"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.align.lr = b.real(e); };
    g["scope"] = [](RunConfig& c, const Binder& b, const Entry& e) {
      c.align.scope = b.guarded(e, [&] { return policy::parse_scope(b.string(e)); });
    };
    g["beta"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.align.beta = b.real(e); };
    g["gamma"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.align.gamma = b.real(e); };
    g["baseline"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.align.baseline = b.boolean(e); };
    g["temperature"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.align.temperature = b.real(e); };
    g["pref_ft"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.align.pref_ft.enabled = b.boolean(e); };
    g["pref_ft_fraction"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.align.pref_ft.fraction = b.real(e); };
    g["pref_ft_lr"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.align.pref_ft.lr = b.real(e); };
    g["pref_ft_updates"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.align.pref_ft.updates = b.int32(e); };
    g["pref_ft_batch"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.align.pref_ft.batch = b.int32(e); };
    g["pref_ft_rollouts"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.align.pref_ft.rollouts = b.int32(e); };

    auto& o = t["io"];
    o["out_dir"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.out_dir = b.string(e); };
    o["web_dir"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.web_dir = b.string(e); };
    o["host"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.host = b.string(e); };
    o["port"] = set_int(&RunConfig::port);
    o["heatmap_cell"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.heatmap_cell = b.real(e); };
    o["heatmap_from"] = [](RunConfig& c, const Binder& b, const Entry& e) { c.heatmap_from = b.string(e); };
    return t;
  }();
  return t;
}

void validate_all(RunConfig& cfg, const std::string& source) {
  try {
    arena::validate(cfg.arena);
    demogen::validate(cfg.demo);
    cfg.policy.view = cfg.arena.view;
    cfg.policy.buckets = cfg.arena.buckets;
    policy::validate(cfg.policy);
    cfg.align.target = cfg.target;
    cfg.align.seed = cfg.seed;
    cfg.rm_hyper.seed = cfg.seed;
    align::validate(cfg.align);
    if (cfg.pretrain_episodes < 1) throw std::invalid_argument("demogen.episodes must be >= 1");
    if (cfg.curated.per_pad < 1) throw std::invalid_argument("demogen.curated_per_pad must be >= 1");
    if (cfg.eval_episodes < 1) throw std::invalid_argument("policy.eval_episodes must be >= 1");
    if (cfg.rollouts_train < 2 || cfg.rollouts_eval < 2) throw std::invalid_argument("prefs rollout counts must be >= 2");
    if (cfg.sweep_seeds < 1) throw std::invalid_argument("reward.sweep_seeds must be >= 1");
    for (double b : cfg.sweep_budgets) {
      if (!(b >= 1.0) || b != static_cast<double>(static_cast<std::size_t>(b))) throw std::invalid_argument("reward.sweep_budgets must be positive integers");
    }
    static const std::set<std::string> policy_stages{"pretrain", "finetune", "pref-ft", "align"};
    if (!policy_stages.count(cfg.eval_from)) throw std::invalid_argument("policy.eval_from must name a policy stage, got '" + cfg.eval_from + "'");
    if (cfg.heatmap_from != "eval" && cfg.heatmap_from != "rollouts")
      throw std::invalid_argument("io.heatmap_from must be eval or rollouts, got '" + cfg.heatmap_from + "'");
    if (!(cfg.heatmap_cell > 0.0)) throw std::invalid_argument("io.heatmap_cell must be positive");
    if (cfg.port < 0 || cfg.port > 65535) throw std::invalid_argument("io.port out of range");
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(source + ": " + ex.what());
  }
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& source) {
  std::vector<Entry> entries;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  const Binder binder(source);
  const auto& t = table();
  std::map<std::pair<std::string, std::string>, int> seen;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    Entry e{section, "", "", line_no};
    if (line.front() == '[') {
      if (line.back() != ']') binder.fail(e, "malformed section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty() || !t.contains(section)) binder.fail(e, "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) binder.fail(e, "expected key = value");
    e.key = trim(std::string_view(line).substr(0, eq));
    e.value = trim(std::string_view(line).substr(eq + 1));
    if (e.key.empty()) binder.fail(e, "missing key");
    const auto& keys = t.at(section);
    if (!keys.contains(e.key)) binder.fail(e, "unknown key '" + e.key + "'" + (section.empty() ? "" : " in [" + section + "]"));
    if (e.value.empty()) binder.fail(e, e.key + ": missing value");
    if (auto [it, fresh] = seen.emplace(std::pair{section, e.key}, line_no); !fresh) {
      binder.fail(e, e.key + ": duplicate key (first set on line " + std::to_string(it->second) + ")");
    }
    entries.push_back(std::move(e));
  }

  RunConfig cfg;
  // A preset replaces the whole policy shape, so it applies before the
  // individual shape keys regardless of line order.
  std::stable_partition(entries.begin(), entries.end(), [](const Entry& e) { return e.section == "policy" && e.key == "preset"; });
  for (const auto& e : entries) t.at(e.section).at(e.key)(cfg, binder, e);
  validate_all(cfg, source);
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

namespace {
json bc_json(const policy::BCHyper& h) {
  return json{{"lr", h.lr},
              {"batch", h.batch},
              {"updates", h.updates},
              {"warmup", h.warmup},
              {"weight_decay", h.weight_decay},
              {"clip_norm", h.clip_norm},
              {"scope", policy::scope_name(h.scope)},
              {"filter_noops", h.filter_noops}};
}
}  // namespace

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["arena"] = arena_to_json(arena);
  j["demogen"] = json{{"pad_mix", demo.pad_mix},
                      {"novice_fraction", demo.novice_fraction},
                      {"noise_eps", demo.noise_eps},
                      {"episodes", pretrain_episodes},
                      {"curated_per_pad", curated.per_pad},
                      {"curated_noise_eps", curated.noise_eps},
                      {"spawn_bias", curated.spawn_bias ? json(*curated.spawn_bias) : json(nullptr)}};
  j["policy"] = json{{"preset", policy_preset},
                     {"shape", policy::config_to_json(policy)},
                     {"pretrain", bc_json(pretrain)},
                     {"finetune", bc_json(finetune)},
                     {"finetune_from_scratch", finetune_from_scratch},
                     {"eval_from", eval_from},
                     {"eval_episodes", eval_episodes},
                     {"eval_temperature", eval_temperature}};
  j["prefs"] = json{{"rollouts_train", rollouts_train},
                    {"rollouts_eval", rollouts_eval},
                    {"temperature", rollout_temperature},
                    {"target", arena::pad_name(target)},
                    {"cap", pair_cap ? json(*pair_cap) : json(nullptr)},
                    {"subsample", subsample == prefs::Subsample::Pairs ? "pairs" : "trajectories"},
                    {"labels", labels},
                    {"label_pairs", label_pairs}};
  j["reward"] = json{{"encoder", rm::kind_name(encoder)},
                     {"projection_dim", projection_dim},
                     {"t_max", rm.t_max},
                     {"step_hidden", rm.step_hidden},
                     {"step_out", rm.step_out},
                     {"head_hidden", rm.head_hidden},
                     {"lr", rm_hyper.lr},
                     {"minibatch", rm_hyper.minibatch},
                     {"epochs", rm_hyper.epochs},
                     {"l2", rm_hyper.l2},
                     {"max_steps", rm_hyper.max_steps},
                     {"sweep_budgets", sweep_budgets},
                     {"sweep_seeds", sweep_seeds}};
  j["align"] = json{{"updates", align.updates},
                    {"batch_episodes", align.batch_episodes},
                    {"lr", align.lr},
                    {"scope", policy::scope_name(align.scope)},
                    {"beta", align.beta},
                    {"gamma", align.gamma},
                    {"baseline", align.baseline},
                    {"temperature", align.temperature},
                    {"pref_ft", align.pref_ft.enabled},
                    {"pref_ft_fraction", align.pref_ft.fraction},
                    {"pref_ft_lr", align.pref_ft.lr},
                    {"pref_ft_updates", align.pref_ft.updates},
                    {"pref_ft_batch", align.pref_ft.batch},
                    {"pref_ft_rollouts", align.pref_ft.rollouts}};
  j["io"] = json{{"out_dir", out_dir.string()}, {"web_dir", web_dir.string()}, {"host", host},
                 {"port", port}, {"heatmap_cell", heatmap_cell}, {"heatmap_from", heatmap_from}};
  return j;
}

}  // namespace deskalign::pipeline
