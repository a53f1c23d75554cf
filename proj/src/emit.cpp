#include <cmath>
#include <fstream>
#include <set>

#include "deskalign/pipeline.hpp"
#include "deskalign/random.hpp"

namespace deskalign::pipeline {

using nlohmann::json;

std::uint64_t Heatmap::total() const {
  std::uint64_t s = 0;
  for (auto c : counts) s += c;
  return s;
}

Heatmap heatmap(const arena::ArenaSpec& spec, const TrajectorySet& trajs, double cell) {
  if (!(cell > 0.0)) throw std::invalid_argument("heatmap: cell must be positive");
  if (trajs.empty()) throw std::invalid_argument("heatmap: empty trajectory set");
  Heatmap m;
  m.cell = cell;
  m.cols = static_cast<int>(std::ceil(spec.width / cell));
  m.rows = static_cast<int>(std::ceil(spec.height / cell));
  m.counts.assign(static_cast<std::size_t>(m.rows) * m.cols, 0);
  for (const auto& t : trajs) {
    for (int s = 0; s < t.duration(); ++s) {
      const auto& p = t.poses[s];
      const int c = std::clamp(static_cast<int>(std::floor(p.x / cell)), 0, m.cols - 1);
      const int r = m.rows - 1 - std::clamp(static_cast<int>(std::floor(p.y / cell)), 0, m.rows - 1);
      ++m.counts[static_cast<std::size_t>(r) * m.cols + c];
    }
  }
  return m;
}

void emit_heatmap(const Heatmap& m, const fs::path& stem) {
  fs::path csv = stem, pgm = stem;
  csv += ".csv";
  pgm += ".pgm";
  std::ofstream out(csv);
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < m.cols; ++c) out << (c ? "," : "") << m.at(r, c);
    out << "\n";
  }
  if (!out) throw std::runtime_error("cannot write " + csv.string());

  const std::uint64_t peak = *std::max_element(m.counts.begin(), m.counts.end());
  std::ofstream img(pgm);
  img << "P2\n" << m.cols << " " << m.rows << "\n255\n";
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < m.cols; ++c) {
      const auto v = peak ? static_cast<int>(std::lround(255.0 * static_cast<double>(m.at(r, c)) / static_cast<double>(peak))) : 0;
      img << (c ? " " : "") << v;
    }
    img << "\n";
  }
  if (!img) throw std::runtime_error("cannot write " + pgm.string());
}

std::vector<CurveRow> rm_curve(const std::vector<rm::SweepRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("rm curve: no sweep rows");
  std::map<std::pair<std::string, std::size_t>, std::vector<double>> groups;
  for (const auto& r : rows) groups[{r.kind, r.comparisons}].push_back(r.accuracy);
  std::vector<CurveRow> out;
  for (const auto& [key, accs] : groups) {
    CurveRow c{key.first, key.second, static_cast<int>(accs.size())};
    for (double a : accs) c.mean += a;
    c.mean /= c.n;
    if (c.n > 1) {
      double ss = 0.0;
      for (double a : accs) ss += (a - c.mean) * (a - c.mean);
      c.se = std::sqrt(ss / (c.n - 1)) / std::sqrt(static_cast<double>(c.n));
    }
    out.push_back(c);
  }
  return out;
}

void emit_rm_curve(const std::vector<rm::SweepRow>& rows, const fs::path& path) {
  const auto curve = rm_curve(rows);
  std::ofstream out(path);
  out << "kind,comparisons,n,mean,se\n";
  out.precision(17);
  for (const auto& c : curve) out << c.kind << "," << c.comparisons << "," << c.n << "," << c.mean << "," << c.se << "\n";
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::vector<QueuedPair> label_queue(const TrajectorySet& trajs, int n, std::uint64_t seed) {
  const std::uint64_t m = trajs.size();
  const std::uint64_t total = m * (m - 1) / 2;
  if (m < 2 || n < 0 || static_cast<std::uint64_t>(n) > total) throw std::invalid_argument("label queue: not enough distinct pairs");
  Rng rng(derive_seed(seed, 0x1abe1));
  std::set<std::pair<std::size_t, std::size_t>> taken;
  std::vector<QueuedPair> out;
  while (out.size() < static_cast<std::size_t>(n)) {
    auto i = static_cast<std::size_t>(rng.below(m));
    auto j = static_cast<std::size_t>(rng.below(m));
    if (i == j || !taken.insert({std::min(i, j), std::max(i, j)}).second) continue;
    out.push_back({out.size(), trajs[i].id, trajs[j].id});
  }
  return out;
}

void write_label_queue(const fs::path& path, const std::vector<QueuedPair>& queue) {
  json j = json::array();
  for (const auto& q : queue) j.push_back({{"pair_id", q.pair_id}, {"a", q.a}, {"b", q.b}});
  std::ofstream out(path);
  out << j.dump(1) << "\n";
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::vector<QueuedPair> read_label_queue(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const json j = json::parse(in);
  std::vector<QueuedPair> out;
  for (const auto& e : j) out.push_back({e.at("pair_id").get<std::uint64_t>(), e.at("a").get<std::uint64_t>(), e.at("b").get<std::uint64_t>()});
  return out;
}

}  // namespace deskalign::pipeline
