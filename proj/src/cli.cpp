#include <chrono>
#include <fstream>
#include <iostream>
#include <set>

#include <CLI11.hpp>

#include "deskalign/pipeline.hpp"
#include "deskalign/random.hpp"

namespace deskalign::pipeline {

using nlohmann::json;

namespace {

void write_losses(const fs::path& path, const std::vector<double>& losses) {
  std::ofstream out(path);
  out.precision(17);
  out << "update,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out << i << "," << losses[i] << "\n";
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

class Stage {
 public:
  Stage(std::string name, const RunConfig& cfg, ArtifactStore& store)
      : name_(std::move(name)), cfg_(cfg), store_(store), t0_(std::chrono::steady_clock::now()) {
    dir_ = store_.begin(name_);
  }

  const fs::path& dir() const { return dir_; }

  fs::path input(const std::string& stage, const std::string& file) {
    const auto dir = store_.input(stage);
    inputs_[stage] = dir.filename().string();
    const auto path = dir / file;
    if (!fs::exists(path)) throw std::runtime_error("missing input file " + path.string());
    return path;
  }

  std::shared_ptr<const policy::PolicyCheckpoint> policy(const std::string& stage) {
    return std::make_shared<const policy::PolicyCheckpoint>(policy::read_policy(input(stage, "policy.ckpt").string()));
  }

  rm::RewardModel reward_model() {
    const auto path = input("train-rm", "reward.ckpt");
    const auto desc = rm::read_encoder_descriptor(path.string());
    std::shared_ptr<const policy::PolicyCheckpoint> pol;
    if (desc.at("kind").get<std::string>() == rm::kind_name(rm::EncoderKind::AgentFrozen)) pol = policy("finetune");
    return rm::read_reward_model(path.string(), pol);
  }

  RunArtifacts commit() {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    return store_.commit(name_, cfg_.seed, cfg_.to_json(), inputs_, secs);
  }

 private:
  std::string name_;
  const RunConfig& cfg_;
  ArtifactStore& store_;
  std::chrono::steady_clock::time_point t0_;
  fs::path dir_;
  std::map<std::string, std::string> inputs_;
};

rm::Encoder make_encoder(const RunConfig& cfg, Stage& st, std::uint64_t seed) {
  if (cfg.encoder == rm::EncoderKind::AgentFrozen) return rm::agent_encoder(st.policy("finetune"));
  return rm::random_projection(cfg.policy.obs_size(), seed, cfg.projection_dim);
}

void serve_labels(const RunConfig& cfg, ArtifactStore& store) {
  const auto rollouts = store.input("rollouts");
  const auto train = read_trajectories((rollouts / "train.ndjson").string());
  const auto dir = store.root() / "labeling";
  const auto playback_dir = dir / "playback";
  fs::create_directories(playback_dir);
  const auto queue_path = dir / "queue.json";
  const auto pref_path = dir / "labels.ndjson";

  if (!fs::exists(queue_path)) write_label_queue(queue_path, label_queue(train, cfg.label_pairs, cfg.seed));
  auto queue = read_label_queue(queue_path);
  std::set<std::uint64_t> needed;
  for (const auto& q : queue) needed.insert({q.a, q.b});
  for (const auto& t : train) {
    if (needed.contains(t.id)) write_playback(playback_path(playback_dir, t.id).string(), t);
  }
  // Resume: pairs already present in the preference file stay labeled.
  if (fs::exists(pref_path)) {
    std::set<std::uint64_t> done;
    std::ifstream in(pref_path);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) done.insert(json::parse(line).at("pair_id").get<std::uint64_t>());
    }
    std::erase_if(queue, [&](const QueuedPair& q) { return done.contains(q.pair_id); });
  }

  LabelServerOptions opts;
  opts.playback_dir = playback_dir;
  opts.preference_file = pref_path;
  opts.web_dir = cfg.web_dir;
  opts.arena = cfg.arena;
  opts.target = cfg.target;
  LabelServer server(std::move(queue), opts);
  std::cout << "serving " << server.remaining() << " pairs on http://" << cfg.host << ":" << cfg.port << "/ (labels -> " << pref_path.string()
            << ")" << std::endl;
  server.listen(cfg.host, cfg.port);
}

}  // namespace

std::string usage() {
  std::string s = "usage: deskalign <command> --config <path> [--seed N] [--out DIR] [--input STAGE=DIR]...\n\ncommands:\n";
  for (const auto& c : commands()) s += "  " + c + "\n";
  return s;
}

RunArtifacts run_stage(const std::string& command, const RunConfig& cfg, ArtifactStore& store) {
  if (command == "serve-labels") {
    serve_labels(cfg, store);
    return {};
  }
  if (std::find(commands().begin(), commands().end(), command) == commands().end()) throw std::invalid_argument("unknown command " + command);

  Stage st(command, cfg, store);
  const auto out = [&](const char* f) { return (st.dir() / f).string(); };

  if (command == "gen-pretrain") {
    write_dataset(out("dataset.ndjson"), demogen::generate_pretrain(cfg.arena, cfg.demo, cfg.pretrain_episodes, cfg.seed));
  } else if (command == "gen-curated") {
    write_dataset(out("dataset.ndjson"), demogen::generate_curated(cfg.arena, cfg.curated, cfg.seed));
  } else if (command == "pretrain") {
    const auto data = read_dataset(st.input("gen-pretrain", "dataset.ndjson").string()).trajectories;
    policy::BCStats stats;
    policy::write_policy(out("policy.ckpt"), policy::train_bc(data, cfg.pretrain, cfg.policy, cfg.seed, &stats));
    write_losses(out("losses.csv"), stats.losses);
  } else if (command == "finetune") {
    const auto data = read_dataset(st.input("gen-curated", "dataset.ndjson").string()).trajectories;
    policy::BCStats stats;
    const auto ckpt = cfg.finetune_from_scratch ? policy::train_bc(data, cfg.finetune, cfg.policy, cfg.seed, &stats)
                                                : policy::train_bc(data, cfg.finetune, *st.policy("pretrain"), cfg.seed, &stats);
    policy::write_policy(out("policy.ckpt"), ckpt);
    write_losses(out("losses.csv"), stats.losses);
  } else if (command == "eval") {
    const auto ckpt = st.policy(cfg.eval_from);
    const auto report = policy::evaluate(*ckpt, cfg.arena, cfg.eval_episodes, cfg.eval_temperature, cfg.seed);
    json summary = report.summary();
    summary["policy"] = ckpt->id();
    write_json(out("summary.json"), summary);
    write_trajectories(out("trajectories.ndjson"), report.trajectories);
  } else if (command == "rollouts") {
    const auto ckpt = st.policy("finetune");
    auto [train, eval] = prefs::collect_rollouts(*ckpt, cfg.arena, cfg.rollouts_train, cfg.rollouts_eval, cfg.rollout_temperature, cfg.seed);
    write_trajectories(out("train.ndjson"), train);
    write_trajectories(out("eval.ndjson"), eval);
  } else if (command == "prefs") {
    const auto train = read_trajectories(st.input("rollouts", "train.ndjson").string());
    const auto eval = read_trajectories(st.input("rollouts", "eval.ndjson").string());
    prefs::write_preferences(out("train_pairs.ndjson"), prefs::build_pairs(train, cfg.target, cfg.pair_cap, cfg.seed, cfg.subsample));
    prefs::write_preferences(out("eval_pairs.ndjson"), prefs::build_pairs(eval, cfg.target));
  } else if (command == "train-rm") {
    const auto train = read_trajectories(st.input("rollouts", "train.ndjson").string());
    const auto eval = read_trajectories(st.input("rollouts", "eval.ndjson").string());
    prefs::PreferenceSet pairs;
    if (!cfg.labels.empty()) {
      const auto ids = prefs::trajectory_ids(train);
      pairs = prefs::ingest_labels(cfg.labels, &ids);
    } else {
      pairs = prefs::read_preferences(st.input("prefs", "train_pairs.ndjson").string());
    }
    if (pairs.empty()) throw std::runtime_error("train-rm: no preference pairs");
    rm::RMStats stats;
    const auto model = rm::train_reward_model(pairs, train, make_encoder(cfg, st, cfg.seed), cfg.rm_hyper, cfg.rm, &stats);
    rm::write_reward_model(out("reward.ckpt"), model);
    write_losses(out("losses.csv"), stats.losses);
    const auto eval_pairs = prefs::build_pairs(eval, cfg.target);
    write_json(out("metrics.json"), json{{"pairs", pairs.size()},
                                         {"human_labels", !cfg.labels.empty()},
                                         {"steps", stats.losses.size()},
                                         {"epochs", stats.epochs_run},
                                         {"train_accuracy", rm::accuracy(model, pairs, train)},
                                         {"heldout_pairs", eval_pairs.size()},
                                         {"heldout_accuracy", rm::accuracy(model, eval_pairs, eval)},
                                         {"r_min", *model.r_min},
                                         {"r_max", *model.r_max}});
  } else if (command == "rm-sweep") {
    const auto train = read_trajectories(st.input("rollouts", "train.ndjson").string());
    const auto eval = read_trajectories(st.input("rollouts", "eval.ndjson").string());
    const auto eval_pairs = prefs::build_pairs(eval, cfg.target);
    const auto agent = rm::agent_encoder(st.policy("finetune"));
    std::vector<rm::SweepRow> rows;
    for (auto kind : {rm::EncoderKind::AgentFrozen, rm::EncoderKind::RandomProjection}) {
      for (double b : cfg.sweep_budgets) {
        const auto budget = static_cast<std::size_t>(b);
        for (int s = 0; s < cfg.sweep_seeds; ++s) {
          const auto seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(s));
          const auto pairs = prefs::build_pairs(train, cfg.target, budget, seed, cfg.subsample);
          auto hyper = cfg.rm_hyper;
          hyper.seed = seed;
          const auto enc = kind == rm::EncoderKind::AgentFrozen ? agent : rm::random_projection(cfg.policy.obs_size(), seed, cfg.projection_dim);
          const auto model = rm::train_reward_model(pairs, train, enc, hyper, cfg.rm);
          rows.push_back({rm::kind_name(kind), budget, seed, rm::accuracy(model, eval_pairs, eval)});
          std::cerr << rows.back().kind << " " << budget << " seed " << s << " accuracy " << rows.back().accuracy << std::endl;
        }
      }
    }
    rm::write_sweep_csv(out("sweep.csv"), rows);
    emit_rm_curve(rows, st.dir() / "curve.csv");
  } else if (command == "pref-ft") {
    const auto ckpt = st.policy("finetune");
    const auto model = st.reward_model();
    const auto train = read_trajectories(st.input("rollouts", "train.ndjson").string());
    policy::write_policy(out("policy.ckpt"), align::preference_finetune(*ckpt, model, train, cfg.align));
  } else if (command == "align") {
    const auto ckpt = st.policy("finetune");
    const auto model = st.reward_model();
    std::optional<TrajectorySet> pref_trajs;
    if (cfg.align.pref_ft.enabled) pref_trajs = read_trajectories(st.input("rollouts", "train.ndjson").string());
    const auto result = align::align(*ckpt, model, cfg.arena, cfg.align, pref_trajs ? &*pref_trajs : nullptr);
    policy::write_policy(out("policy.ckpt"), result.policy);
    align::write_curve_csv(out("curve.csv"), result.curve);
    if (result.after_pref_ft) policy::write_policy(out("pref_ft.ckpt"), *result.after_pref_ft);
  } else if (command == "heatmap") {
    const auto trajs = read_trajectories(st.input(cfg.heatmap_from, cfg.heatmap_from == "eval" ? "trajectories.ndjson" : "train.ndjson").string());
    emit_heatmap(heatmap(cfg.arena, trajs, cfg.heatmap_cell), st.dir() / "heatmap");
  }
  return st.commit();
}

int run(int argc, const char* const* argv) {
  if (argc < 2) {
    std::cerr << usage();
    return 2;
  }
  const std::string command = argv[1];
  if (command == "-h" || command == "--help" || command == "help") {
    std::cout << usage();
    return 0;
  }
  if (std::find(commands().begin(), commands().end(), command) == commands().end()) {
    std::cerr << "unknown command '" << command << "'\n" << usage();
    return 2;
  }

  CLI::App app{"deskalign " + command, "deskalign " + command};
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> inputs;
  app.add_option("--config", config_path, "run configuration file")->required();
  app.add_option("--seed", seed, "override the configured seed");
  app.add_option("--out", out_dir, "override the output directory");
  app.add_option("--input", inputs, "use DIR as the artifact for STAGE (STAGE=DIR)");
  try {
    app.parse(argc - 1, argv + 1);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << usage();
    return 2;
  }

  try {
    RunConfig cfg = load_config(config_path);
    if (seed) cfg.seed = cfg.align.seed = cfg.rm_hyper.seed = *seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    ArtifactStore store(cfg.out_dir);
    for (const auto& spec : inputs) {
      const auto eq = spec.find('=');
      if (eq == std::string::npos || eq == 0) {
        std::cerr << "--input expects STAGE=DIR, got '" << spec << "'\n" << usage();
        return 2;
      }
      store.set_override(spec.substr(0, eq), spec.substr(eq + 1));
    }
    const auto art = run_stage(command, cfg, store);
    if (!art.name.empty()) std::cout << art.dir.string() << " (" << art.duration_s << " s)\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace deskalign::pipeline
