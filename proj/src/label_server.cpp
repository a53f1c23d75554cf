#include <ctime>
#include <fstream>

#include <httplib.h>

#include "deskalign/pipeline.hpp"

namespace deskalign::pipeline {

using nlohmann::json;

namespace {

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

}  // namespace

LabelServer::LabelServer(std::vector<QueuedPair> queue, LabelServerOptions opts)
    : opts_(std::move(opts)), queue_(std::move(queue)), total_(queue_.size()), arena_json_(arena_to_json(opts_.arena)) {
  for (const auto& q : queue_) {
    for (auto id : {q.a, q.b}) {
      if (tracks_.contains(id)) continue;
      const auto path = playback_path(opts_.playback_dir, id);
      std::ifstream in(path);
      if (!in) throw std::runtime_error("missing playback file " + path.string() + " for queued pair " + std::to_string(q.pair_id));
      Track t;
      t.steps = json::array();
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json rec = json::parse(line);
        t.steps.push_back({{"step", rec.at("step")}, {"x", rec.at("x")}, {"y", rec.at("y")}, {"heading", rec.at("heading")}});
      }
      if (t.steps.empty()) throw std::runtime_error("empty playback file " + path.string());
      t.duration = static_cast<int>(t.steps.size()) - 1;
      tracks_.emplace(id, std::move(t));
    }
  }
  server_ = std::make_unique<httplib::Server>();
  install_routes();
}

LabelServer::~LabelServer() { stop(); }

json LabelServer::pair_payload(const QueuedPair& p) const {
  auto side = [&](std::uint64_t id) {
    const auto& t = tracks_.at(id);
    return json{{"id", id}, {"duration", t.duration}, {"track", t.steps}};
  };
  return json{{"pair_id", p.pair_id}, {"target", arena::pad_name(opts_.target)}, {"arena", arena_json_}, {"a", side(p.a)}, {"b", side(p.b)}};
}

void LabelServer::install_routes() {
  server_->Get("/api/pairs/next", [this](const httplib::Request&, httplib::Response& res) {
    std::lock_guard lock(mu_);
    if (queue_.empty()) {
      res.status = 204;
      return;
    }
    reply(res, 200, pair_payload(queue_.front()));
  });

  server_->Get("/api/progress", [this](const httplib::Request&, httplib::Response& res) {
    std::lock_guard lock(mu_);
    reply(res, 200, json{{"labeled", labeled_}, {"remaining", queue_.size()}, {"total", total_}});
  });

  server_->Post("/api/labels", [this](const httplib::Request& req, httplib::Response& res) {
    const json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object()) return reply(res, 400, json{{"error", "body is not a JSON object"}});
    if (!body.contains("pair_id") || !body["pair_id"].is_number_unsigned()) return reply(res, 400, json{{"error", "pair_id must be a non-negative integer"}});
    if (!body.contains("verdict") || !body["verdict"].is_string()) return reply(res, 400, json{{"error", "verdict must be A, B or equal"}});
    const auto pair_id = body["pair_id"].get<std::uint64_t>();
    const auto verdict = body["verdict"].get<std::string>();
    if (verdict != "A" && verdict != "B" && verdict != "equal") return reply(res, 400, json{{"error", "verdict must be A, B or equal"}});

    std::lock_guard lock(mu_);
    auto it = std::find_if(queue_.begin(), queue_.end(), [&](const QueuedPair& q) { return q.pair_id == pair_id; });
    if (it == queue_.end()) return reply(res, 404, json{{"error", "unknown or already labeled pair " + std::to_string(pair_id)}});

    prefs::PreferencePair rec;
    rec.pair_id = pair_id;
    rec.winner = verdict == "B" ? it->b : it->a;
    rec.loser = verdict == "B" ? it->a : it->b;
    rec.source = prefs::PairSource::Human;
    rec.target = opts_.target;
    rec.timestamp = utc_now();
    json line = prefs::pair_to_json(rec);
    line["verdict"] = verdict;
    {
      std::ofstream out(opts_.preference_file, std::ios::app);
      out << line.dump() << '\n';
      out.flush();
      if (!out) return reply(res, 500, json{{"error", "cannot append to preference file"}});
    }
    queue_.erase(it);
    ++labeled_;
    reply(res, 200, json{{"ok", true}, {"remaining", queue_.size()}});
  });

  if (!opts_.web_dir.empty() && fs::is_directory(opts_.web_dir)) server_->set_mount_point("/", opts_.web_dir.string());
}

int LabelServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) bound = server_->bind_to_any_port(host);
  else if (!server_->bind_to_port(host, port)) bound = -1;
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

void LabelServer::listen(const std::string& host, int port) {
  if (!server_->listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
}

void LabelServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

std::size_t LabelServer::remaining() const {
  std::lock_guard lock(mu_);
  return queue_.size();
}

std::size_t LabelServer::labeled() const {
  std::lock_guard lock(mu_);
  return labeled_;
}

}  // namespace deskalign::pipeline
