#pragma once

#include <string>
#include <vector>

#include "oscar/params.hpp"
#include "oscar/tensor.hpp"

namespace oscar {

/// AdamW hyperparameters plus the schedule/clipping settings that belong to
/// the optimizer state.
struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double warmup_ratio = 0.05;
  double max_grad_norm = 1.0;
  int total_steps = 1;  // for the linear schedule
};

/// One learning-rate group (e.g. generator LoRA vs compressor full weights).
struct ParamGroup {
  std::string name;
  ParamRegistry params;
  double lr = 1e-4;
};

/// Decoupled-weight-decay Adam over several parameter groups with global-norm
/// clipping and a linear warmup/decay schedule. Gradients arrive as one flat
/// GradSink laid out group after group.
class AdamW {
 public:
  AdamW(std::vector<ParamGroup> groups, OptimizerConfig cfg);

  /// Clips, updates parameters, advances the step counter. Returns the
  /// pre-clip global gradient norm.
  double step(GradSink& grads);

  int64_t total_params() const { return total_; }
  int step_count() const { return step_; }
  /// Schedule multiplier in [0,1] for a given 1-based step.
  double schedule(int step) const;
  double group_lr(size_t g, int step) const;
  const std::vector<ParamGroup>& groups() const { return groups_; }

  /// Marks all group registries as the active trainable set.
  void activate() const;

  /// Moment buffers and step counter for checkpoint/resume.
  void export_state(std::vector<float>& m, std::vector<float>& v, int& step) const;
  void import_state(const std::vector<float>& m, const std::vector<float>& v, int step);

 private:
  std::vector<ParamGroup> groups_;
  std::vector<int64_t> group_offsets_;
  OptimizerConfig cfg_;
  std::vector<float> m_, v_;
  int64_t total_ = 0;
  int step_ = 0;
};

}  // namespace oscar
