#include <gtest/gtest.h>

#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "deskalign/demogen.hpp"
#include "deskalign/pipeline.hpp"

using namespace deskalign;
using namespace deskalign::pipeline;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("deskalign-" + name + "-" + std::to_string(::getpid()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "deskalign");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

Trajectory straight_line(std::uint64_t id, double x, double y0, double dy, int steps) {
  Trajectory t;
  t.id = id;
  for (int i = 0; i <= steps; ++i) t.poses.push_back({x, y0 + dy * i, 1.5707963267948966});
  t.outcome = arena::Outcome{std::nullopt, steps};
  return t;
}

TrajectorySet scripted(int n, std::uint64_t seed) {
  const auto spec = arena::default_spec();
  Rng rng(seed);
  TrajectorySet out;
  for (int i = 0; i < n; ++i) {
    auto t = demogen::run_episode(spec, i % 4, arena::kPadOrder[i % 3], 0.1, rng);
    t.id = static_cast<std::uint64_t>(i);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

// ---- config --------------------------------------------------------------------------

TEST(Config, ParsesTypedValuesAndComments) {
  const auto cfg = parse_config(R"(# run
seed = 7
[arena]
spawn_weights = 0.1, 0.2, 0.3, 0.4   # biased
randomize_heading = true
[policy]
finetune_lr = 3e-5
finetune_scope = head
[prefs]
target = Right
cap = 500
[reward]
encoder = random
sweep_budgets = 10, 20
[io]
out_dir = "my runs"
)");
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_DOUBLE_EQ(cfg.arena.spawn_weights[3], 0.4);
  EXPECT_TRUE(cfg.arena.randomize_heading);
  EXPECT_DOUBLE_EQ(cfg.finetune.lr, 3e-5);
  EXPECT_EQ(cfg.finetune.scope, policy::Scope::HeadOnly);
  EXPECT_EQ(cfg.target, arena::PadId::Right);
  EXPECT_EQ(cfg.align.target, arena::PadId::Right);
  EXPECT_EQ(cfg.align.seed, 7u);
  EXPECT_EQ(cfg.pair_cap, std::optional<std::size_t>(500));
  EXPECT_EQ(cfg.encoder, rm::EncoderKind::RandomProjection);
  EXPECT_EQ(cfg.sweep_budgets, (std::vector<double>{10, 20}));
  EXPECT_EQ(cfg.out_dir, fs::path("my runs"));
}

TEST(Config, EmptyDocumentGivesDefaults) {
  const auto cfg = parse_config("");
  EXPECT_EQ(cfg.arena, arena::default_spec());
  EXPECT_EQ(cfg.policy, policy::PolicyConfig{});
  EXPECT_EQ(cfg.pretrain_episodes, 2000);
}

TEST(Config, RejectsUnknownKeysAndSectionsWithLineNumbers) {
  try {
    parse_config("[arena]\nwidth = 24\nwidht = 3\n", "run.ini");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.ini:3:"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("widht"), std::string::npos);
  }
  EXPECT_THROW(parse_config("[nope]\n"), ConfigError);
  EXPECT_THROW(parse_config("width = 3\n"), ConfigError);  // arena key at top level
}

TEST(Config, RejectsBadValues) {
  EXPECT_THROW(parse_config("[arena]\nmax_steps = 1.5\n"), ConfigError);
  EXPECT_THROW(parse_config("[arena]\nrandomize_heading = yes\n"), ConfigError);
  EXPECT_THROW(parse_config("[arena]\nspawn_weights = 0.5, 0.5\n"), ConfigError);
  EXPECT_THROW(parse_config("[arena]\nspawn_weights = 0.5, 0.5, 0.5, 0.5\n"), ConfigError);  // must sum to 1
  EXPECT_THROW(parse_config("[prefs]\ntarget = Up\n"), ConfigError);
  EXPECT_THROW(parse_config("[arena]\ndt = 0.1\ndt = 0.2\n"), ConfigError);
  EXPECT_THROW(parse_config("[arena\n"), ConfigError);
  EXPECT_THROW(parse_config("[arena]\nwidth\n"), ConfigError);
  EXPECT_THROW(parse_config("[policy]\neval_from = rollouts\n"), ConfigError);
  EXPECT_THROW(parse_config("[io]\nheatmap_from = align\n"), ConfigError);
}

TEST(Config, PresetAppliesBeforeShapeKeys) {
  const auto cfg = parse_config("[policy]\ndim = 48\npreset = large\n");
  EXPECT_EQ(cfg.policy.layers, policy::preset("large").layers);
  EXPECT_EQ(cfg.policy.dim, 48);
}

TEST(Config, EchoIncludesEverySection) {
  const auto j = parse_config("[demogen]\nspawn_bias = right-from-left\n").to_json();
  for (const char* s : {"seed", "arena", "demogen", "policy", "prefs", "reward", "align", "io"}) EXPECT_TRUE(j.contains(s)) << s;
  EXPECT_FALSE(j["demogen"]["spawn_bias"].is_null());
}

// ---- emitters ------------------------------------------------------------------------

TEST(Heatmap, StraightLineIsConnectedAndConserved) {
  const auto spec = arena::default_spec();
  const auto m = heatmap(spec, {straight_line(0, 6.2, 2.1, 0.2, 40)}, 0.5);
  EXPECT_EQ(m.total(), 40u);
  std::vector<int> rows;
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < m.cols; ++c) {
      if (m.at(r, c)) {
        EXPECT_EQ(c, 12);
        rows.push_back(r);
      }
    }
  }
  ASSERT_FALSE(rows.empty());
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i], rows[i - 1] + 1);
}

TEST(Heatmap, DuplicatedSetDoublesEveryCell) {
  const auto spec = arena::default_spec();
  auto trajs = scripted(12, 3);
  const auto once = heatmap(spec, trajs, 0.5);
  const auto n = trajs.size();
  for (std::size_t i = 0; i < n; ++i) trajs.push_back(trajs[i]);
  const auto twice = heatmap(spec, trajs, 0.5);
  for (std::size_t i = 0; i < once.counts.size(); ++i) EXPECT_EQ(twice.counts[i], 2 * once.counts[i]);
  std::uint64_t steps = 0;
  for (const auto& t : trajs) steps += static_cast<std::uint64_t>(t.duration());
  EXPECT_EQ(twice.total(), steps);
}

TEST(Heatmap, ErrorsAndFiles) {
  const auto spec = arena::default_spec();
  EXPECT_THROW(heatmap(spec, {}, 0.5), std::invalid_argument);
  EXPECT_THROW(heatmap(spec, scripted(1, 0), 0.0), std::invalid_argument);
  const auto dir = fresh_dir("heatmap");
  const auto m = heatmap(spec, scripted(6, 1), 1.0);
  emit_heatmap(m, dir / "h");
  std::istringstream pgm(slurp(dir / "h.pgm"));
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  pgm >> magic >> w >> h >> maxv;
  EXPECT_EQ(magic, "P2");
  EXPECT_EQ(w, 24);
  EXPECT_EQ(h, 16);
  EXPECT_EQ(maxv, 255);
  int v = 0, count = 0, peak = 0;
  while (pgm >> v) {
    ++count;
    peak = std::max(peak, v);
  }
  EXPECT_EQ(count, w * h);
  EXPECT_EQ(peak, 255);
  std::istringstream csv(slurp(dir / "h.csv"));
  std::string line;
  std::uint64_t total = 0;
  int lines = 0;
  while (std::getline(csv, line)) {
    ++lines;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) total += std::stoull(cell);
  }
  EXPECT_EQ(lines, 16);
  EXPECT_EQ(total, m.total());
}

TEST(RmCurve, MeanAndStandardError) {
  const auto c = rm_curve({{"agent", 100, 0, 0.8}, {"agent", 100, 1, 0.9}, {"agent", 100, 2, 1.0}});
  ASSERT_EQ(c.size(), 1u);
  EXPECT_NEAR(c[0].mean, 0.9, 1e-12);
  EXPECT_NEAR(c[0].se, 0.0577, 5e-5);
  EXPECT_EQ(c[0].n, 3);
}

TEST(RmCurve, SingleSeedHasZeroError) {
  const auto c = rm_curve({{"random", 10, 0, 0.7}});
  EXPECT_EQ(c[0].se, 0.0);
  EXPECT_THROW(rm_curve({}), std::invalid_argument);
}

TEST(RmCurve, SortedByKindThenComparisons) {
  const auto c = rm_curve({{"random", 1000, 0, 0.6}, {"agent", 1000, 0, 0.9}, {"random", 100, 0, 0.5}, {"agent", 100, 0, 0.8}});
  ASSERT_EQ(c.size(), 4u);
  EXPECT_EQ(c[0].kind, "agent");
  EXPECT_EQ(c[0].comparisons, 100u);
  EXPECT_EQ(c[1].comparisons, 1000u);
  EXPECT_EQ(c[2].kind, "random");
  EXPECT_EQ(c[2].comparisons, 100u);
  const auto dir = fresh_dir("curve");
  emit_rm_curve({{"agent", 100, 0, 0.8}}, dir / "c.csv");
  EXPECT_EQ(slurp(dir / "c.csv").substr(0, 26), "kind,comparisons,n,mean,se");
}

// ---- labeling service ----------------------------------------------------------------

namespace {

struct LabelFixture {
  fs::path dir;
  TrajectorySet trajs;
  std::vector<QueuedPair> queue;
  LabelServerOptions opts;

  explicit LabelFixture(int pairs) : dir(fresh_dir("labels")), trajs(scripted(10, 5)), queue(label_queue(trajs, pairs, 1)) {
    fs::create_directories(dir / "playback");
    for (const auto& t : trajs) write_playback(playback_path(dir / "playback", t.id).string(), t);
    opts.playback_dir = dir / "playback";
    opts.preference_file = dir / "labels.ndjson";
  }
};

}  // namespace

TEST(LabelQueue, DistinctPairsOfDistinctTrajectories) {
  const auto trajs = scripted(6, 2);
  const auto q = label_queue(trajs, 15, 0);  // all 15 pairs
  std::set<std::pair<std::uint64_t, std::uint64_t>> seen;
  for (std::size_t i = 0; i < q.size(); ++i) {
    EXPECT_EQ(q[i].pair_id, i);
    EXPECT_NE(q[i].a, q[i].b);
    EXPECT_TRUE(seen.insert({std::min(q[i].a, q[i].b), std::max(q[i].a, q[i].b)}).second);
  }
  EXPECT_THROW(label_queue(trajs, 16, 0), std::invalid_argument);
  EXPECT_EQ(label_queue(trajs, 5, 9).size(), 5u);
}

TEST(LabelServer, RequiresPlaybackFiles) {
  LabelFixture f(3);
  fs::remove(playback_path(f.opts.playback_dir, f.queue[1].b));
  EXPECT_THROW(LabelServer(f.queue, f.opts), std::runtime_error);
}

TEST(LabelServer, ServesPairsAndRecordsVerdicts) {
  LabelFixture f(3);
  LabelServer server(f.queue, f.opts);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);

  auto res = cli.Get("/api/pairs/next");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  const auto payload = json::parse(res->body);
  EXPECT_EQ(payload["pair_id"], f.queue[0].pair_id);
  EXPECT_EQ(payload["a"]["id"], f.queue[0].a);
  const auto& ta = f.trajs[f.queue[0].a];
  EXPECT_EQ(payload["a"]["track"].size(), ta.poses.size());
  EXPECT_EQ(payload["a"]["track"][0]["step"], 0);
  EXPECT_DOUBLE_EQ(payload["a"]["track"][0]["x"].get<double>(), ta.poses[0].x);
  EXPECT_FALSE(payload["a"]["track"][0].contains("actions"));
  EXPECT_EQ(payload["arena"]["pads"].size(), 3u);

  const auto post = [&](const std::string& body) { return cli.Post("/api/labels", body, "application/json"); };
  EXPECT_EQ(post("not json")->status, 400);
  EXPECT_EQ(post(R"({"pair_id":0})")->status, 400);
  EXPECT_EQ(post(R"({"pair_id":0,"verdict":"C"})")->status, 400);
  EXPECT_EQ(post(R"({"pair_id":-1,"verdict":"A"})")->status, 400);
  EXPECT_EQ(post(R"({"pair_id":99,"verdict":"A"})")->status, 404);

  const auto p0 = f.queue[0], p1 = f.queue[1], p2 = f.queue[2];
  EXPECT_EQ(post(json{{"pair_id", p0.pair_id}, {"verdict", "A"}}.dump())->status, 200);
  EXPECT_EQ(post(json{{"pair_id", p0.pair_id}, {"verdict", "B"}}.dump())->status, 404);
  EXPECT_EQ(post(json{{"pair_id", p1.pair_id}, {"verdict", "B"}}.dump())->status, 200);

  auto prog = json::parse(cli.Get("/api/progress")->body);
  EXPECT_EQ(prog["labeled"], 2);
  EXPECT_EQ(prog["remaining"], 1);
  EXPECT_EQ(prog["total"], 3);
  EXPECT_EQ(json::parse(cli.Get("/api/pairs/next")->body)["pair_id"], p2.pair_id);
  EXPECT_EQ(post(json{{"pair_id", p2.pair_id}, {"verdict", "equal"}}.dump())->status, 200);
  EXPECT_EQ(cli.Get("/api/pairs/next")->status, 204);
  server.stop();

  const auto ids = prefs::trajectory_ids(f.trajs);
  const auto labels = prefs::ingest_labels(f.opts.preference_file.string(), &ids);
  ASSERT_EQ(labels.size(), 2u);  // the tie is dropped
  EXPECT_EQ(labels[0].winner, p0.a);
  EXPECT_EQ(labels[0].loser, p0.b);
  EXPECT_EQ(labels[0].source, prefs::PairSource::Human);
  EXPECT_FALSE(labels[0].timestamp.empty());
  EXPECT_EQ(labels[1].winner, p1.b);
}

TEST(LabelServer, ConcurrentPostsKeepFileIntact) {
  LabelFixture f(40);
  LabelServer server(f.queue, f.opts);
  const int port = server.start("127.0.0.1", 0);
  std::vector<std::thread> threads;
  std::atomic<int> ok{0};
  for (int w = 0; w < 4; ++w) {
    threads.emplace_back([&, w] {
      httplib::Client cli("127.0.0.1", port);
      // Each worker posts every pair; exactly one post per pair may succeed.
      for (int i = 0; i < 40; ++i) {
        const auto& q = f.queue[static_cast<std::size_t>((i + 10 * w) % 40)];
        auto res = cli.Post("/api/labels", json{{"pair_id", q.pair_id}, {"verdict", w % 2 ? "A" : "B"}}.dump(), "application/json");
        if (res && res->status == 200) ++ok;
      }
    });
  }
  for (auto& t : threads) t.join();
  server.stop();
  EXPECT_EQ(ok.load(), 40);
  std::ifstream in(f.opts.preference_file);
  std::string line;
  std::set<std::uint64_t> ids;
  int lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    ids.insert(json::parse(line).at("pair_id").get<std::uint64_t>());
  }
  EXPECT_EQ(lines, 40);
  EXPECT_EQ(ids.size(), 40u);
}

TEST(LabelServer, ServesStaticFiles) {
  LabelFixture f(1);
  fs::create_directories(f.dir / "web");
  std::ofstream(f.dir / "web" / "index.html") << "<html>labeler</html>";
  f.opts.web_dir = f.dir / "web";
  LabelServer server(f.queue, f.opts);
  httplib::Client cli("127.0.0.1", server.start("127.0.0.1", 0));
  auto res = cli.Get("/index.html");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->body, "<html>labeler</html>");
}

// ---- command line --------------------------------------------------------------------

TEST(Cli, UsageErrors) {
  testing::internal::CaptureStderr();
  EXPECT_EQ(run_cli({}), 2);
  EXPECT_EQ(run_cli({"launch"}), 2);
  EXPECT_EQ(run_cli({"eval"}), 2);  // --config missing
  EXPECT_EQ(run_cli({"eval", "--config", "x.ini", "--bogus"}), 2);
  const auto err = testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("usage: deskalign <command>"), std::string::npos);
  EXPECT_NE(err.find("serve-labels"), std::string::npos);
}

TEST(Cli, ConfigAndInputFailuresExitNonzero) {
  const auto dir = fresh_dir("cli-errors");
  std::ofstream(dir / "bad.ini") << "[arena]\nbogus = 1\n";
  std::ofstream(dir / "ok.ini") << "[io]\nout_dir = " << (dir / "runs").string() << "\n";
  testing::internal::CaptureStderr();
  EXPECT_EQ(run_cli({"eval", "--config", (dir / "bad.ini").string()}), 1);
  EXPECT_EQ(run_cli({"eval", "--config", (dir / "missing.ini").string()}), 1);
  EXPECT_EQ(run_cli({"pretrain", "--config", (dir / "ok.ini").string()}), 1);
  const auto err = testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("bad.ini:2:"), std::string::npos);
  EXPECT_NE(err.find("missing input artifact 'gen-pretrain'"), std::string::npos);
}

namespace {

const char* kTinyRun = R"(seed = 11
[demogen]
episodes = 24
curated_per_pad = 4
[policy]
layers = 1
dim = 16
heads = 2
mlp_hidden = 32
head_hidden = 16
context = 8
pretrain_updates = 6
pretrain_batch = 8
pretrain_warmup = 2
finetune_updates = 4
finetune_batch = 8
finetune_warmup = 0
eval_episodes = 10
[prefs]
rollouts_train = 12
rollouts_eval = 12
[reward]
epochs = 3
minibatch = 16
sweep_budgets = 5, 10
sweep_seeds = 2
[align]
updates = 2
batch_episodes = 3
pref_ft = true
pref_ft_updates = 2
pref_ft_batch = 4
)";

}  // namespace

TEST(Cli, FullSequenceIsDeterministic) {
  const auto dir = fresh_dir("cli-run");
  std::ofstream(dir / "run.ini") << kTinyRun << "[io]\nout_dir = " << (dir / "runs").string() << "\n";
  const std::vector<std::string> stages{"gen-pretrain", "gen-curated", "pretrain", "finetune", "eval",  "rollouts", "prefs",
                                        "train-rm",     "rm-sweep",    "pref-ft",  "align",    "heatmap"};
  const auto cfg_path = (dir / "run.ini").string();
  // A briefly trained policy rarely reaches a pad, so preference stages
  // read scripted trajectories in place of its rollouts.
  const auto fake = dir / "scripted-rollouts";
  fs::create_directories(fake);
  auto scripted_set = scripted(24, 4);
  for (std::size_t i = 0; i < scripted_set.size(); ++i) scripted_set[i].id = i;
  write_trajectories((fake / "train.ndjson").string(), std::span(scripted_set).first(12));
  write_trajectories((fake / "eval.ndjson").string(), std::span(scripted_set).subspan(12));
  const auto args = [&](const std::string& s) {
    std::vector<std::string> a{s, "--config", cfg_path};
    if (s != "rollouts") a.push_back("--input=rollouts=" + fake.string());
    return a;
  };
  std::map<std::string, std::string> first;
  for (const auto& s : stages) {
    ASSERT_EQ(run_cli(args(s)), 0) << s;
    first[s] = json::parse(slurp(dir / "runs" / "index.json"))[s];
  }
  // Rerun every stage: same inputs and config give the same content hash.
  for (const auto& s : stages) {
    ASSERT_EQ(run_cli(args(s)), 0) << s;
    EXPECT_EQ(json::parse(slurp(dir / "runs" / "index.json"))[s], first[s]) << s;
  }

  const auto runs = dir / "runs";
  const auto meta = json::parse(slurp(runs / first["align"] / "meta.json"));
  EXPECT_EQ(meta["stage"], "align");
  EXPECT_EQ(meta["seed"], 11);
  EXPECT_EQ(meta["inputs"]["finetune"], first["finetune"]);
  EXPECT_EQ(meta["inputs"]["train-rm"], first["train-rm"]);
  EXPECT_EQ(meta["inputs"]["rollouts"], "scripted-rollouts");
  EXPECT_EQ(meta["config"]["align"]["updates"], 2);
  EXPECT_TRUE(meta.contains("timestamp"));
  EXPECT_EQ(first["align"].rfind("align-11-", 0), 0u);
  for (const auto& f : meta["outputs"]) EXPECT_TRUE(fs::exists(runs / first["align"] / f.get<std::string>()));
  EXPECT_TRUE(fs::exists(runs / first["align"] / "pref_ft.ckpt"));

  const auto summary = json::parse(slurp(runs / first["eval"] / "summary.json"));
  int total = 0;
  for (const auto& [k, v] : summary["counts"].items()) total += v.get<int>();
  EXPECT_EQ(total, 10);
  EXPECT_EQ(read_trajectories((runs / first["eval"] / "trajectories.ndjson").string()).size(), 10u);
  EXPECT_EQ(rm::read_sweep_csv((runs / first["rm-sweep"] / "sweep.csv").string()).size(), 8u);
  EXPECT_EQ(align::read_curve_csv((runs / first["align"] / "curve.csv").string()).size(), 2u);

  // A different seed gives a different artifact and leaves the first intact.
  ASSERT_EQ(run_cli({"gen-pretrain", "--config", cfg_path, "--seed", "12"}), 0);
  const std::string other = json::parse(slurp(runs / "index.json"))["gen-pretrain"];
  EXPECT_EQ(other.rfind("gen-pretrain-12-", 0), 0u);
  EXPECT_TRUE(fs::exists(runs / first["gen-pretrain"]));
}

TEST(Cli, InputOverride) {
  const auto dir = fresh_dir("cli-override");
  std::ofstream(dir / "run.ini") << kTinyRun;
  const auto cfg_path = (dir / "run.ini").string();
  ASSERT_EQ(run_cli({"gen-pretrain", "--config", cfg_path, "--out", (dir / "a").string()}), 0);
  const std::string name = json::parse(slurp(dir / "a" / "index.json"))["gen-pretrain"];
  EXPECT_EQ(run_cli({"pretrain", "--config", cfg_path, "--out", (dir / "b").string()}), 1);
  EXPECT_EQ(run_cli({"pretrain", "--config", cfg_path, "--out", (dir / "b").string(), "--input", "gen-pretrain=" + (dir / "a" / name).string()}), 0);
  EXPECT_EQ(run_cli({"pretrain", "--config", cfg_path, "--input", "gen-pretrain"}), 2);
  const auto meta = json::parse(slurp(dir / "b" / json::parse(slurp(dir / "b" / "index.json"))["pretrain"].get<std::string>() / "meta.json"));
  EXPECT_EQ(meta["inputs"]["gen-pretrain"], name);
}
