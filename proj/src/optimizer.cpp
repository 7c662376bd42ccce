#include "oscar/optimizer.hpp"

#include <cmath>

#include "oscar/errors.hpp"

namespace oscar {

AdamW::AdamW(std::vector<ParamGroup> groups, OptimizerConfig cfg)
    : groups_(std::move(groups)), cfg_(cfg) {
  if (cfg_.total_steps < 1) throw ConfigError("AdamW: total_steps must be >= 1");
  for (const auto& g : groups_) {
    if (g.lr < 0.0) throw ConfigError("AdamW: negative learning rate in group " + g.name);
    group_offsets_.push_back(total_);
    total_ += g.params.total_size();
  }
  m_.assign(total_, 0.0f);
  v_.assign(total_, 0.0f);
}

void AdamW::activate() const {
  for (size_t g = 0; g < groups_.size(); g++) groups_[g].params.assign_slots(group_offsets_[g]);
}

double AdamW::schedule(int step) const {
  int warmup = static_cast<int>(std::ceil(cfg_.warmup_ratio * cfg_.total_steps));
  if (warmup > 0 && step <= warmup) return static_cast<double>(step) / warmup;
  if (cfg_.total_steps == warmup) return 1.0;
  return std::max(0.0, static_cast<double>(cfg_.total_steps - step) /
                           (cfg_.total_steps - warmup));
}

double AdamW::group_lr(size_t g, int step) const { return groups_[g].lr * schedule(step); }

double AdamW::step(GradSink& grads) {
  if (static_cast<int64_t>(grads.buf.size()) != total_)
    throw NumericError("AdamW: gradient sink size " + std::to_string(grads.buf.size()) +
                       " does not match parameter count " + std::to_string(total_));
  step_++;

  double sq = 0.0;
  for (float g : grads.buf) sq += static_cast<double>(g) * g;
  double norm = std::sqrt(sq);
  if (!std::isfinite(norm))
    throw NumericError("AdamW: non-finite gradient norm at step " + std::to_string(step_));
  if (cfg_.max_grad_norm > 0.0 && norm > cfg_.max_grad_norm) {
    float s = static_cast<float>(cfg_.max_grad_norm / norm);
    for (float& g : grads.buf) g *= s;
  }

  double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
  double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
  for (size_t gi = 0; gi < groups_.size(); gi++) {
    double lr = group_lr(gi, step_);
    int64_t base = group_offsets_[gi];
    for (const auto& e : groups_[gi].params.entries()) {
      float* p = e.tensor.ptr();
      const float* g = grads.buf.data() + base + e.offset;
      float* m = m_.data() + base + e.offset;
      float* v = v_.data() + base + e.offset;
      int64_t n = e.tensor.numel();
      for (int64_t i = 0; i < n; i++) {
        m[i] = static_cast<float>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i]);
        v[i] = static_cast<float>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i]);
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        double update = mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i];
        p[i] = static_cast<float>(p[i] - lr * update);
      }
    }
  }
  return norm;
}

void AdamW::export_state(std::vector<float>& m, std::vector<float>& v, int& step) const {
  m = m_;
  v = v_;
  step = step_;
}

void AdamW::import_state(const std::vector<float>& m, const std::vector<float>& v, int step) {
  if (static_cast<int64_t>(m.size()) != total_ || static_cast<int64_t>(v.size()) != total_)
    throw DimensionError("AdamW: optimizer state size mismatch");
  m_ = m;
  v_ = v;
  step_ = step;
}

}  // namespace oscar
