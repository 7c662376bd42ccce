#include "oscar/params.hpp"

#include <algorithm>

#include "oscar/errors.hpp"

namespace oscar {

Tensor ParamRegistry::add(const std::string& name, Tensor t) {
  if (!t.defined()) throw ConfigError("ParamRegistry: undefined tensor for " + name);
  if (has(name)) throw ConfigError("ParamRegistry: duplicate parameter name " + name);
  t.set_requires_grad(true);
  entries_.push_back({name, t, total_});
  total_ += t.numel();
  return t;
}

void ParamRegistry::append(const ParamRegistry& other, const std::string& prefix) {
  for (const auto& e : other.entries()) add(prefix + e.name, e.tensor);
}

bool ParamRegistry::has(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.name == name; });
}

Tensor ParamRegistry::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.tensor;
  throw ConfigError("ParamRegistry: no parameter named " + name);
}

void ParamRegistry::assign_slots(int64_t base) const {
  for (const auto& e : entries_) e.tensor.node()->param_slot = base + e.offset;
}

void ParamRegistry::clear_slots() const {
  for (const auto& e : entries_) e.tensor.node()->param_slot = -1;
}

void ParamRegistry::gather_flat(std::vector<float>& out) const {
  out.resize(total_);
  for (const auto& e : entries_)
    std::copy(e.tensor.data().begin(), e.tensor.data().end(), out.begin() + e.offset);
}

void ParamRegistry::scatter_flat(const std::vector<float>& in) const {
  if (static_cast<int64_t>(in.size()) != total_)
    throw DimensionError("scatter_flat: size mismatch");
  for (const auto& e : entries_)
    std::copy(in.begin() + e.offset, in.begin() + e.offset + e.tensor.numel(),
              e.tensor.data().begin());
}

}  // namespace oscar
