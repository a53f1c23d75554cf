#pragma once

// Stage orchestration: run configuration, artifact directories, figure-data
// emitters, the labeling HTTP service and the command-line front end.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "deskalign/align.hpp"
#include "deskalign/arena.hpp"
#include "deskalign/demogen.hpp"
#include "deskalign/policy.hpp"
#include "deskalign/prefs.hpp"
#include "deskalign/rewardmodel.hpp"

namespace httplib {
class Server;
}

namespace deskalign::pipeline {

namespace fs = std::filesystem;

// ---- run configuration ----------------------------------------------------------
//
//   # comment
//   seed = 3                 (top level, before any section)
//   [arena]
//   spawn_weights = 0.25, 0.25, 0.25, 0.25
//
// Values are integers, floats, strings (optionally double-quoted), booleans
// (true/false) or comma-separated float lists. Unknown sections and keys are
// errors reported as "source:line: message".

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::uint64_t seed = 0;

  arena::ArenaSpec arena = arena::default_spec();

  demogen::DemoConfig demo;
  int pretrain_episodes = 2000;
  demogen::CuratedConfig curated;

  policy::PolicyConfig policy;
  std::string policy_preset = "medium";
  policy::BCHyper pretrain = policy::BCHyper::pretrain();
  policy::BCHyper finetune = policy::BCHyper::finetune();
  bool finetune_from_scratch = false;
  std::string eval_from = "finetune";  // stage whose checkpoint `eval` scores
  int eval_episodes = 1000;
  double eval_temperature = 1.0;

  int rollouts_train = 1000;
  int rollouts_eval = 1400;
  double rollout_temperature = 1.0;
  arena::PadId target = arena::PadId::Left;
  std::optional<std::size_t> pair_cap;
  prefs::Subsample subsample = prefs::Subsample::Pairs;
  std::string labels;  // human preference file; replaces synthetic train pairs
  int label_pairs = 20;

  rm::EncoderKind encoder = rm::EncoderKind::AgentFrozen;
  int projection_dim = 32;
  rm::RMConfig rm;
  rm::RMHyper rm_hyper;
  std::vector<double> sweep_budgets{100, 1000, 10000};
  int sweep_seeds = 3;

  align::AlignConfig align;

  fs::path out_dir = "runs";
  fs::path web_dir = "web";
  std::string host = "127.0.0.1";
  int port = 8080;
  double heatmap_cell = 0.5;
  std::string heatmap_from = "eval";

  /// Effective configuration, echoed into every artifact's metadata.
  nlohmann::json to_json() const;
};

RunConfig parse_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_config(const fs::path& path);

// ---- artifacts --------------------------------------------------------------------
//
// Every stage writes a directory `<stage>-<seed>-<hash>` under the output
// directory, where the hash covers the stage's output files. `meta.json`
// beside them records the config echo, input artifacts, duration and a
// timestamp; `index.json` maps each stage to its latest artifact.

struct RunArtifacts {
  std::string stage;
  std::string name;
  fs::path dir;
  std::map<std::string, std::string> inputs;  // stage -> artifact name
  std::vector<fs::path> outputs;
  double duration_s = 0.0;
  std::uint64_t seed = 0;
};

class ArtifactStore {
 public:
  explicit ArtifactStore(fs::path root);

  const fs::path& root() const { return root_; }

  /// Directory of the latest artifact for `stage`, honouring overrides.
  fs::path input(const std::string& stage) const;
  std::optional<fs::path> find(const std::string& stage) const;
  void set_override(const std::string& stage, fs::path dir);

  /// Fresh scratch directory for a stage to write its files into.
  fs::path begin(const std::string& stage);
  /// Moves the scratch directory to its content-addressed name, writes
  /// meta.json and updates index.json.
  RunArtifacts commit(const std::string& stage, std::uint64_t seed, const nlohmann::json& config,
                      const std::map<std::string, std::string>& inputs, double duration_s);

 private:
  fs::path root_;
  std::map<std::string, fs::path> overrides_;
};

/// FNV-1a over the sorted file names and contents of a directory, as 12 hex digits.
std::string content_hash(const fs::path& dir);

// ---- emitters -----------------------------------------------------------------------

struct Heatmap {
  int rows = 0;
  int cols = 0;
  double cell = 0.0;
  std::vector<std::uint64_t> counts;  // row-major, row 0 at the far (high y) edge

  std::uint64_t at(int r, int c) const { return counts[static_cast<std::size_t>(r) * cols + c]; }
  std::uint64_t total() const;
};

/// Visitation counts of every step's pose. Throws on an empty set or cell <= 0.
Heatmap heatmap(const arena::ArenaSpec& spec, const TrajectorySet& trajs, double cell);
/// Writes `<stem>.csv` and `<stem>.pgm` (plain P2, 255 = busiest cell).
void emit_heatmap(const Heatmap& map, const fs::path& stem);

struct CurveRow {
  std::string kind;
  std::size_t comparisons = 0;
  int n = 0;
  double mean = 0.0;
  double se = 0.0;  // sample standard deviation / sqrt(n); 0 for one seed
};
std::vector<CurveRow> rm_curve(const std::vector<rm::SweepRow>& rows);
/// "kind,comparisons,n,mean,se".
void emit_rm_curve(const std::vector<rm::SweepRow>& rows, const fs::path& path);

// ---- labeling service ---------------------------------------------------------------

struct QueuedPair {
  std::uint64_t pair_id = 0;
  std::uint64_t a = 0;
  std::uint64_t b = 0;
};

/// Pairs of distinct trajectories drawn uniformly without replacement.
std::vector<QueuedPair> label_queue(const TrajectorySet& trajs, int n, std::uint64_t seed);
void write_label_queue(const fs::path& path, const std::vector<QueuedPair>& queue);
std::vector<QueuedPair> read_label_queue(const fs::path& path);

inline fs::path playback_path(const fs::path& dir, std::uint64_t id) { return dir / (std::to_string(id) + ".ndjson"); }

struct LabelServerOptions {
  fs::path playback_dir;
  fs::path preference_file;
  fs::path web_dir;  // optional static files
  arena::ArenaSpec arena = arena::default_spec();
  arena::PadId target = arena::PadId::Left;
};

class LabelServer {
 public:
  /// Throws when a queued trajectory has no playback file.
  LabelServer(std::vector<QueuedPair> queue, LabelServerOptions opts);
  ~LabelServer();
  LabelServer(const LabelServer&) = delete;
  LabelServer& operator=(const LabelServer&) = delete;

  /// Binds and serves on a background thread; port 0 picks a free port.
  /// Returns the bound port.
  int start(const std::string& host, int port);
  /// Serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  void stop();

  std::size_t remaining() const;
  std::size_t labeled() const;

 private:
  struct Track {
    nlohmann::json steps;
    int duration = 0;
    std::string outcome;
  };
  void install_routes();
  nlohmann::json pair_payload(const QueuedPair& p) const;

  LabelServerOptions opts_;
  std::vector<QueuedPair> queue_;  // pending, in serving order
  std::size_t total_ = 0;
  std::size_t labeled_ = 0;
  std::map<std::uint64_t, Track> tracks_;
  nlohmann::json arena_json_;
  mutable std::mutex mu_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

// ---- command line --------------------------------------------------------------------

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> names{"gen-pretrain", "gen-curated", "pretrain", "finetune", "eval",   "rollouts",    "prefs",
                                              "train-rm",     "rm-sweep",    "pref-ft",  "align",    "heatmap", "serve-labels"};
  return names;
}

std::string usage();

/// Runs one command with an already-loaded config. Returns the artifact
/// (serve-labels returns an empty one after the service stops).
RunArtifacts run_stage(const std::string& command, const RunConfig& cfg, ArtifactStore& store);

/// argv-style entry point: 0 on success, 2 on usage errors, 1 on failures.
int run(int argc, const char* const* argv);

}  // namespace deskalign::pipeline
