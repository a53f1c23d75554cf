#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// Every op returns a Var (a shared graph node). Nodes remember their parents
// and a closure that pushes the node's gradient into the parents' gradients.
// backward() runs those closures in reverse topological order. Under a
// NoGradGuard ops skip recording entirely, which is the rollout fast path.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "deskalign/random.hpp"
#include "deskalign/tensor.hpp"

namespace deskalign::tn {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor(value.shape);
  }
};

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Tensor value);
Var leaf(Tensor value, bool requires_grad = true);

/// Accumulates d(root)/d(node) into every reachable node with requires_grad.
/// `root` must be a single-element tensor.
void backward(const Var& root);

// ---- elementwise / structural --------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var gelu(const Var& a);
/// log(1 + exp(a)), computed stably.
Var softplus(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Shape shape);
/// Gathers whole rows (last dimension = columns) into a new 2D tensor.
Var gather_rows(const Var& a, std::span<const std::size_t> rows);

// ---- layers ----------------------------------------------------------------

Var matmul(const Var& a, const Var& b);
/// x[n×k] · w[k×m] + bias[m]; bias may be null.
Var linear(const Var& x, const Var& w, const Var& bias);
/// Row-wise layer norm with learned gain and shift.
Var layer_norm(const Var& x, const Var& gain, const Var& shift, double eps = 1e-5);
/// Multi-head causal scaled dot-product attention.
/// qkv has `batch*seq` rows laid out [q | k | v], each block `dim` wide.
/// Position t of a sequence attends to positions 0..t of the same sequence.
Var causal_attention(const Var& qkv, std::size_t batch, std::size_t seq, std::size_t heads);
/// Row r of the result is the sum of table rows indices[r*per_row + j] for
/// j < per_row; negative indices are skipped.
Var embedding_sum(const Var& table, std::span<const std::int64_t> indices, std::size_t per_row);

// ---- losses ------------------------------------------------------------------

/// logits has rows of `components` consecutive blocks of `buckets` logits.
/// Returns sum_r weight[r] * sum_c -log softmax(block_{r,c})[target[r*components+c]].
/// Targets below zero are skipped.
Var categorical_nll(const Var& logits, std::span<const std::int64_t> targets,
                    std::span<const double> row_weights, std::size_t components,
                    std::size_t buckets);

/// sum_r weight[r] * sum_c KL(softmax(block_{r,c}) || softmax(ref block_{r,c})).
/// The reference logits are constants.
Var categorical_kl(const Var& logits, const Tensor& ref_logits, std::span<const double> row_weights,
                   std::size_t components, std::size_t buckets);

/// Single-vector cross entropy: -log softmax(logits)[target].
Var cross_entropy(const Var& logits, std::size_t target);

// ---- non-differentiable helpers ------------------------------------------------

/// Stable softmax of logits / temperature.
std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);

/// Index i with probability probs[i]; probs must sum to 1 within 1e-9.
std::size_t sample_categorical(std::span<const double> probs, Rng& rng);

}  // namespace deskalign::tn
