#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "oscar/rng.hpp"

namespace oscar {

struct TensorImpl;
struct GradSink;

/// Dense row-major float32 tensor with reverse-mode autodiff.
///
/// A Tensor is a cheap handle onto a shared node. Ops on tensors record the
/// backward closure on the result node while grads are enabled, forming a
/// per-example DAG that backward() walks in reverse topological order.
/// Parameter leaves route their gradients into an external GradSink slot
/// instead of their own buffer, so independent graphs over shared parameters
/// can run backward concurrently without touching the parameters.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const;
  int dim(int i) const;
  int64_t numel() const;
  int rows() const { return dim(0); }
  int cols() const { return dim(1); }

  // handle semantics: a const Tensor still refers to mutable storage,
  // like a shared_ptr
  std::vector<float>& data() const;
  float* ptr() const;
  float scalar() const;  // requires numel()==1

  bool requires_grad() const;
  void set_requires_grad(bool v) const;

  /// Gradient buffer (intermediates and non-parameter leaves). Empty until
  /// backward reaches the node.
  const std::vector<float>& grad() const;
  bool has_grad() const;
  void zero_grad();

  /// Parameter slot in the active trainable set; -1 when not a parameter.
  int64_t param_slot() const;
  void set_param_slot(int64_t slot);

  Tensor clone_detached() const;

  TensorImpl* node() const { return impl_.get(); }

  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
  friend struct TensorImpl;
};

struct TensorImpl {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;  // lazily allocated
  bool requires_grad = false;
  int64_t param_slot = -1;
  std::vector<Tensor> parents;
  std::function<void(TensorImpl&, GradSink*)> backward_fn;

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
};

/// Flat gradient accumulator for one backward pass over parameter leaves.
/// Buffers from several passes are summed in a caller-chosen (deterministic)
/// order, which also gives batch gradient accumulation for free.
struct GradSink {
  std::vector<float> buf;
  explicit GradSink(size_t total = 0) : buf(total, 0.0f) {}
  void reset() { std::fill(buf.begin(), buf.end(), 0.0f); }
  void add_from(const GradSink& other) {
    for (size_t i = 0; i < buf.size(); i++) buf[i] += other.buf[i];
  }
};

/// RAII guard disabling graph recording (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

/// Reverse-mode pass from a scalar loss. Parameter-leaf gradients go to
/// `sink` (must be sized for the active trainable set); pass nullptr when the
/// graph has no parameter leaves.
void backward(const Tensor& loss, GradSink* sink);

// ---- ops ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// a [m x k] times b^T where b is [n x k]; used for tied unembedding.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sum(const Tensor& a);                       // -> [1]
Tensor mean_all(const Tensor& a);                  // -> [1]
Tensor sub_const(const Tensor& a, const std::vector<float>& c);
Tensor row_gather(const Tensor& table, const std::vector<int>& ids);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int begin, int end);
Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps = 1e-5f);
Tensor rope(const Tensor& x, const std::vector<int>& positions, int n_heads,
            float theta = 10000.0f);
/// Multi-head scaled-dot-product attention over one sequence with a causal
/// mask. q is [L x (n_heads*d_head)], k/v are [S x (n_kv_heads*d_head)] with
/// n_heads divisible by n_kv_heads (grouped queries share kv heads).
/// Query position i attends to kv positions <= i + (S - L).
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int n_heads, int n_kv_heads);
/// Mean negative log-likelihood of `targets` under rows of `logits`
/// (row i scores targets[i]). Stable log-softmax; grad is softmax - onehot.
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets);
/// Inverted-dropout; identity when p == 0. Mask drawn from `rng`.
Tensor dropout(const Tensor& a, float p, Rng& rng);

/// Forward-only row softmax (no graph), used by decoding and tests.
std::vector<float> softmax_row(const float* logits, int n);

int argmax_row(const float* logits, int n);

}  // namespace oscar
