#include "deskalign/params.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace deskalign::tn {

ParameterSet::ParameterSet(const ParameterSet& other) { *this = other; }

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this == &other) return *this;
  entries_.clear();
  index_.clear();
  for (const auto& e : other.entries_) add(e.name, e.var->value, e.trainable);
  return *this;
}

Var& ParameterSet::add(const std::string& name, Tensor value, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("parameter set: duplicate name '" + name + "'");
  index_[name] = entries_.size();
  entries_.push_back({name, leaf(std::move(value), trainable), trainable});
  return entries_.back().var;
}

const Var& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("parameter set: no parameter '" + name + "'");
  return entries_[it->second].var;
}

Var& ParameterSet::get(const std::string& name) {
  return const_cast<Var&>(static_cast<const ParameterSet&>(*this).get(name));
}

std::size_t ParameterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.var->value.size();
  return n;
}

void ParameterSet::set_trainable(const std::function<bool(const std::string&)>& pred) {
  for (auto& e : entries_) {
    e.trainable = pred(e.name);
    e.var->requires_grad = e.trainable;
    if (!e.trainable) e.var->grad = Tensor();
  }
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) {
    if (e.trainable) {
      e.var->grad = Tensor(e.var->value.shape);
    } else {
      e.var->grad = Tensor();
    }
  }
}

bool ParameterSet::same_values(const ParameterSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.var->value.shape != b.var->value.shape) return false;
    if (std::memcmp(a.var->value.data.data(), b.var->value.data.data(), a.var->value.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

double grad_norm(const ParameterSet& params) {
  double sq = 0.0;
  for (const auto& e : params.entries()) {
    if (!e.trainable) continue;
    for (double g : e.var->grad.data) sq += g * g;
  }
  return std::sqrt(sq);
}

double adamw_step(ParameterSet& params, OptimizerState& state, double lr_scale) {
  const AdamWConfig& cfg = state.config;
  for (const auto& e : params.entries()) {
    if (e.trainable && e.var->grad.size() != e.var->value.size()) {
      throw std::logic_error("adamw: trainable parameter '" + e.name + "' has no gradient");
    }
  }
  const double norm = grad_norm(params);
  const double clip = (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double lr = cfg.lr * lr_scale;

  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    auto& value = e.var->value.data;
    const auto& grad = e.var->grad.data;
    auto& m = state.first_moment[e.name];
    auto& v = state.second_moment[e.name];
    if (m.size() != value.size()) m.assign(value.size(), 0.0);
    if (v.size() != value.size()) v.assign(value.size(), 0.0);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i] * clip;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      value[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * value[i]);
    }
  }
  return norm;
}

double grad_check(const std::function<Var(ParameterSet&)>& loss, ParameterSet& point, double eps, Rng& rng,
                  std::size_t max_coords) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw std::invalid_argument("grad_check: eps must lie in (0, 1e-2]");
  point.zero_grad();
  Var out = loss(point);
  backward(out);

  struct Coord {
    std::size_t entry;
    std::size_t index;
  };
  std::vector<Coord> coords;
  for (std::size_t e = 0; e < point.entries().size(); ++e) {
    if (!point.entries()[e].trainable) continue;
    for (std::size_t i = 0; i < point.entries()[e].var->value.size(); ++i) coords.push_back({e, i});
  }
  const std::size_t want = std::max<std::size_t>(max_coords, 100);
  if (coords.size() > want) {
    rng.shuffle(std::span(coords));
    coords.resize(want);
  }

  double worst = 0.0;
  NoGradGuard no_grad;
  for (const auto& c : coords) {
    auto& node = *point.entries()[c.entry].var;
    const double analytic = node.grad.size() ? node.grad[c.index] : 0.0;
    const double saved = node.value[c.index];
    node.value[c.index] = saved + eps;
    const double up = loss(point)->value.item();
    node.value[c.index] = saved - eps;
    const double down = loss(point)->value.item();
    node.value[c.index] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  }
  return worst;
}

// ---- checkpoint container ---------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'A', 'C', 'K', 'P', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  void take(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint: truncated file");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    take(&v, sizeof v);
    return v;
  }
  std::string str(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint: truncated file");
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof kMagic);
  put_u64(out, ckpt.header.size());
  out += ckpt.header;
  put_u64(out, ckpt.params.size());
  for (const auto& e : ckpt.params.entries()) {
    put_u64(out, e.name.size());
    out += e.name;
    out.push_back(e.trainable ? '\1' : '\0');
    const auto& t = e.var->value;
    put_u64(out, t.shape.size());
    for (std::size_t d : t.shape) put_u64(out, d);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.size() * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  char magic[8];
  in.take(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw std::runtime_error("checkpoint: bad magic");
  Checkpoint ckpt;
  ckpt.header = in.str(in.u64());
  const std::uint64_t count = in.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = in.str(in.u64());
    char trainable = 0;
    in.take(&trainable, 1);
    Shape shape(in.u64());
    for (auto& d : shape) d = in.u64();
    Tensor t(shape);
    in.take(t.data.data(), t.size() * sizeof(double));
    ckpt.params.add(name, std::move(t), trainable != 0);
  }
  if (!in.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  const std::string bytes = encode_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

}  // namespace deskalign::tn
