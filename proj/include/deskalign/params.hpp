#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "deskalign/autodiff.hpp"
#include "deskalign/random.hpp"

namespace deskalign::tn {

// Named, ordered collection of parameter leaves. Copies are deep: a copied
// set owns fresh leaves with equal values, so checkpoints behave as values.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Var var;
    bool trainable = true;
  };

  ParameterSet() = default;
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  /// Adds a parameter; throws on duplicate names.
  Var& add(const std::string& name, Tensor value, bool trainable = true);

  const Var& get(const std::string& name) const;
  Var& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  /// Marks parameters trainable iff the predicate holds; frozen leaves stop
  /// requiring gradients so graphs built over them skip their backward.
  void set_trainable(const std::function<bool(const std::string&)>& pred);
  void freeze_all() { set_trainable([](const std::string&) { return false; }); }

  /// Allocates zeroed gradients for every trainable parameter.
  void zero_grad();

  /// Exact value equality (names, shapes, bits).
  bool same_values(const ParameterSet& other) const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

/// One AdamW update of every trainable parameter, after clipping all
/// trainable gradients jointly to `clip_norm`. `lr_scale` multiplies the
/// configured learning rate (used for warmup). Returns the pre-clip norm.
/// Throws std::logic_error when a trainable parameter has no gradient.
double adamw_step(ParameterSet& params, OptimizerState& state, double lr_scale = 1.0);

/// Global L2 norm of the trainable gradients.
double grad_norm(const ParameterSet& params);

/// Central-difference check of autodiff gradients. `loss` builds a scalar
/// graph from the parameters. At most `max_coords` coordinates (at least
/// 100, or all of them when fewer exist) are sampled with `rng`. Returns the
/// largest |autodiff - numeric| / max(|autodiff|, |numeric|, 1e-8).
double grad_check(const std::function<Var(ParameterSet&)>& loss, ParameterSet& point, double eps, Rng& rng,
                  std::size_t max_coords = 200);

// ---- checkpoint container -------------------------------------------------
//
// Binary layout, little-endian:
//   "DACKPT01"                      magic
//   u64 header_len, header bytes    free-form text (JSON in practice)
//   u64 count
//   per parameter: u64 name_len, name, u8 trainable, u64 ndim, u64 dims[ndim],
//                  f64 values[prod(dims)]
// Values are written as raw IEEE-754 bits, so a round trip is bit-exact.

struct Checkpoint {
  std::string header;
  ParameterSet params;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace deskalign::tn
