#pragma once

#include <string>
#include <vector>

#include "oscar/tensor.hpp"

namespace oscar {

/// Ordered, named collection of parameter tensors. The order defines the
/// layout of the flat gradient/optimizer-state vectors, and the names define
/// the checkpoint records.
class ParamRegistry {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    int64_t offset;
  };

  Tensor add(const std::string& name, Tensor t);
  void append(const ParamRegistry& other, const std::string& prefix = "");

  const std::vector<Entry>& entries() const { return entries_; }
  int64_t total_size() const { return total_; }
  bool has(const std::string& name) const;
  Tensor find(const std::string& name) const;

  /// Marks every tensor with its flat offset (plus `base` for registries that
  /// occupy a later slice of a combined sink) so backward() can route grads
  /// into a GradSink. Only one trainable set should be active at a time.
  void assign_slots(int64_t base = 0) const;
  void clear_slots() const;

  /// Copies the flat view in/out (optimizer and clipping work on flat data).
  void gather_flat(std::vector<float>& out) const;
  void scatter_flat(const std::vector<float>& in) const;

 private:
  std::vector<Entry> entries_;
  int64_t total_ = 0;
};

}  // namespace oscar
