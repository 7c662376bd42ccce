#include "oscar/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "oscar/errors.hpp"

namespace oscar {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EMat>;
using CMapMat = Eigen::Map<const EMat>;

namespace {

thread_local bool g_grad_enabled = true;

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); i++) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::shared_ptr<TensorImpl> new_impl(std::vector<int> shape, std::vector<float> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

// Routes a gradient slab into the right place for `t`: the sink slot for
// registered parameters (when a sink is given), otherwise the node's own
// buffer. Nodes that do not require grad are skipped by callers.
void accumulate_grad(TensorImpl* t, GradSink* sink, const float* g, int64_t n) {
  if (t->param_slot >= 0 && sink != nullptr) {
    float* dst = sink->buf.data() + t->param_slot;
    for (int64_t i = 0; i < n; i++) dst[i] += g[i];
    return;
  }
  if (t->grad.empty()) t->grad.assign(t->numel(), 0.0f);
  for (int64_t i = 0; i < n; i++) t->grad[i] += g[i];
}

bool wants_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

Tensor make_node(std::vector<int> shape, std::vector<float> data,
                 std::vector<Tensor> parents,
                 std::function<void(TensorImpl&, GradSink*)> bw) {
  auto impl = new_impl(std::move(shape), std::move(data));
  bool rec = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) rec = rec || wants_grad(p);
  }
  if (rec) {
    impl->requires_grad = true;
    impl->parents = std::move(parents);
    impl->backward_fn = std::move(bw);
  }
  return Tensor(impl);
}

MapMat as_mat(TensorImpl& t) {
  return MapMat(t.data.data(), t.shape[0], t.shape.size() > 1 ? t.shape[1] : 1);
}
CMapMat as_cmat(const Tensor& t) {
  const auto& sh = t.shape();
  return CMapMat(t.ptr(), sh[0], sh.size() > 1 ? sh[1] : 1);
}

void check_2d(const Tensor& t, const char* who) {
  if (t.shape().size() != 2)
    throw DimensionError(std::string(who) + ": expected 2-d tensor, got " +
                         shape_str(t.shape()));
}

}  // namespace

// ---- Tensor basics --------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto impl = new_impl(shape, std::vector<float>(numel_of(shape), 0.0f));
  impl->requires_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  auto impl = new_impl(shape, std::vector<float>(numel_of(shape), value));
  impl->requires_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data,
                         bool requires_grad) {
  if (static_cast<int64_t>(data.size()) != numel_of(shape))
    throw DimensionError("from_data: " + std::to_string(data.size()) +
                         " values for shape " + shape_str(shape));
  auto impl = new_impl(std::move(shape), std::move(data));
  impl->requires_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad) {
  std::vector<float> d(numel_of(shape));
  for (auto& v : d) v = rng.normal(0.0f, stddev);
  return from_data(std::move(shape), std::move(d), requires_grad);
}

const std::vector<int>& Tensor::shape() const { return impl_->shape; }
int Tensor::dim(int i) const { return impl_->shape.at(i); }
int64_t Tensor::numel() const { return impl_->numel(); }
std::vector<float>& Tensor::data() const { return impl_->data; }
float* Tensor::ptr() const { return impl_->data.data(); }

float Tensor::scalar() const {
  if (numel() != 1) throw DimensionError("scalar(): tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool v) const { impl_->requires_grad = v; }
const std::vector<float>& Tensor::grad() const { return impl_->grad; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
void Tensor::zero_grad() { impl_->grad.clear(); }
int64_t Tensor::param_slot() const { return impl_->param_slot; }
void Tensor::set_param_slot(int64_t slot) { impl_->param_slot = slot; }

Tensor Tensor::clone_detached() const {
  auto impl = new_impl(impl_->shape, impl_->data);
  return Tensor(impl);
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- backward engine -------------------------------------------------------

void backward(const Tensor& loss, GradSink* sink) {
  if (loss.numel() != 1) throw DimensionError("backward: loss must be scalar");
  TensorImpl* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS; reverse gives a valid execution order.
  std::vector<TensorImpl*> topo;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  stack.push_back({root, 0});
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorImpl* p = node->parents[idx++].node();
      if (p->requires_grad && !visited.count(p) && p->backward_fn) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->grad.assign(1, 1.0f);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node, sink);
  }
}

// ---- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(static_cast<size_t>(m) * n);
  MapMat(out.data(), m, n).noalias() = as_cmat(a) * as_cmat(b);
  return make_node({m, n}, std::move(out), {a, b},
                   [m, k, n](TensorImpl& self, GradSink* sink) {
                     CMapMat dc(self.grad.data(), m, n);
                     Tensor pa = self.parents[0], pb = self.parents[1];
                     if (pa.requires_grad()) {
                       EMat da = dc * as_cmat(pb).transpose();
                       accumulate_grad(pa.node(), sink, da.data(), (int64_t)m * k);
                     }
                     if (pb.requires_grad()) {
                       EMat db = as_cmat(pa).transpose() * dc;
                       accumulate_grad(pb.node(), sink, db.data(), (int64_t)k * n);
                     }
                   });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  if (a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<float> out(static_cast<size_t>(m) * n);
  MapMat(out.data(), m, n).noalias() = as_cmat(a) * as_cmat(b).transpose();
  return make_node({m, n}, std::move(out), {a, b},
                   [m, k, n](TensorImpl& self, GradSink* sink) {
                     CMapMat dc(self.grad.data(), m, n);
                     Tensor pa = self.parents[0], pb = self.parents[1];
                     if (pa.requires_grad()) {
                       EMat da = dc * as_cmat(pb);
                       accumulate_grad(pa.node(), sink, da.data(), (int64_t)m * k);
                     }
                     if (pb.requires_grad()) {
                       EMat db = dc.transpose() * as_cmat(pa);
                       accumulate_grad(pb.node(), sink, db.data(), (int64_t)n * k);
                     }
                   });
}

namespace {

Tensor binary_same_shape(const Tensor& a, const Tensor& b, const char* who,
                         const std::function<float(float, float)>& f,
                         // dg(a,b,dout) -> (da, db)
                         const std::function<void(const TensorImpl&, GradSink*)>& bw) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  std::vector<float> out(a.numel());
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  for (int64_t i = 0; i < a.numel(); i++) out[i] = f(pa[i], pb[i]);
  return make_node(a.shape(), std::move(out), {a, b},
                   [bw](TensorImpl& self, GradSink* sink) { bw(self, sink); });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape(a, b, "add", [](float x, float y) { return x + y; },
                           [](const TensorImpl& self, GradSink* sink) {
                             for (int side = 0; side < 2; side++) {
                               Tensor p = self.parents[side];
                               if (p.requires_grad())
                                 accumulate_grad(p.node(), sink, self.grad.data(), self.numel());
                             }
                           });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape(a, b, "sub", [](float x, float y) { return x - y; },
                           [](const TensorImpl& self, GradSink* sink) {
                             Tensor pa = self.parents[0], pb = self.parents[1];
                             if (pa.requires_grad())
                               accumulate_grad(pa.node(), sink, self.grad.data(), self.numel());
                             if (pb.requires_grad()) {
                               std::vector<float> neg(self.grad.size());
                               for (size_t i = 0; i < neg.size(); i++) neg[i] = -self.grad[i];
                               accumulate_grad(pb.node(), sink, neg.data(), self.numel());
                             }
                           });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(a, b, "mul", [](float x, float y) { return x * y; },
                           [](const TensorImpl& self, GradSink* sink) {
                             Tensor pa = self.parents[0], pb = self.parents[1];
                             int64_t n = self.numel();
                             std::vector<float> tmp(n);
                             if (pa.requires_grad()) {
                               const float* pbd = pb.ptr();
                               for (int64_t i = 0; i < n; i++) tmp[i] = self.grad[i] * pbd[i];
                               accumulate_grad(pa.node(), sink, tmp.data(), n);
                             }
                             if (pb.requires_grad()) {
                               const float* pad = pa.ptr();
                               for (int64_t i = 0; i < n; i++) tmp[i] = self.grad[i] * pad[i];
                               accumulate_grad(pb.node(), sink, tmp.data(), n);
                             }
                           });
}

namespace {

Tensor unary(const Tensor& a, const std::function<float(float)>& f,
             const std::function<float(float /*x*/, float /*y*/)>& dfdx) {
  std::vector<float> out(a.numel());
  const float* pa = a.ptr();
  for (int64_t i = 0; i < a.numel(); i++) out[i] = f(pa[i]);
  return make_node(a.shape(), std::move(out), {a},
                   [dfdx](TensorImpl& self, GradSink* sink) {
                     Tensor p = self.parents[0];
                     if (!p.requires_grad()) return;
                     int64_t n = self.numel();
                     std::vector<float> g(n);
                     const float* x = p.ptr();
                     const float* y = self.data.data();
                     for (int64_t i = 0; i < n; i++) g[i] = self.grad[i] * dfdx(x[i], y[i]);
                     accumulate_grad(p.node(), sink, g.data(), n);
                   });
}

}  // namespace

Tensor scale(const Tensor& a, float s) {
  return unary(a, [s](float x) { return x * s; }, [s](float, float) { return s; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](float x) { return x > 0.0f ? x : 0.0f; },
               [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor silu(const Tensor& a) {
  return unary(a,
               [](float x) {
                 float s = 1.0f / (1.0f + std::exp(-x));
                 return x * s;
               },
               [](float x, float) {
                 float s = 1.0f / (1.0f + std::exp(-x));
                 return s * (1.0f + x * (1.0f - s));
               });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
               [](float, float y) { return y * (1.0f - y); });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  const float* pa = a.ptr();
  for (int64_t i = 0; i < a.numel(); i++) acc += pa[i];
  return make_node({1}, {static_cast<float>(acc)}, {a},
                   [](TensorImpl& self, GradSink* sink) {
                     Tensor p = self.parents[0];
                     if (!p.requires_grad()) return;
                     std::vector<float> g(p.numel(), self.grad[0]);
                     accumulate_grad(p.node(), sink, g.data(), p.numel());
                   });
}

Tensor mean_all(const Tensor& a) {
  if (a.numel() == 0) throw DataError("mean_all: empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor sub_const(const Tensor& a, const std::vector<float>& c) {
  if (static_cast<int64_t>(c.size()) != a.numel())
    throw DimensionError("sub_const: constant size mismatch");
  std::vector<float> out(a.numel());
  const float* pa = a.ptr();
  for (int64_t i = 0; i < a.numel(); i++) out[i] = pa[i] - c[i];
  return make_node(a.shape(), std::move(out), {a},
                   [](TensorImpl& self, GradSink* sink) {
                     Tensor p = self.parents[0];
                     if (p.requires_grad())
                       accumulate_grad(p.node(), sink, self.grad.data(), self.numel());
                   });
}

Tensor row_gather(const Tensor& table, const std::vector<int>& ids) {
  check_2d(table, "row_gather");
  int rows = table.dim(0), cols = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= rows)
      throw DataError("row_gather: id " + std::to_string(id) + " out of range [0," +
                      std::to_string(rows) + ")");
  int L = static_cast<int>(ids.size());
  std::vector<float> out(static_cast<size_t>(L) * cols);
  const float* src = table.ptr();
  for (int i = 0; i < L; i++)
    std::copy_n(src + static_cast<size_t>(ids[i]) * cols, cols, out.data() + static_cast<size_t>(i) * cols);
  return make_node({L, cols}, std::move(out), {table},
                   [ids, rows, cols](TensorImpl& self, GradSink* sink) {
                     Tensor p = self.parents[0];
                     if (!p.requires_grad()) return;
                     // scatter-add rows into a dense table gradient
                     std::vector<float> g(static_cast<size_t>(rows) * cols, 0.0f);
                     for (size_t i = 0; i < ids.size(); i++) {
                       const float* gi = self.grad.data() + i * cols;
                       float* dst = g.data() + static_cast<size_t>(ids[i]) * cols;
                       for (int c = 0; c < cols; c++) dst[c] += gi[c];
                     }
                     accumulate_grad(p.node(), sink, g.data(), (int64_t)rows * cols);
                   });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DataError("concat_rows: no parts");
  int cols = parts[0].dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat_rows");
    if (p.dim(1) != cols) throw DimensionError("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  std::vector<float> out;
  out.reserve(static_cast<size_t>(rows) * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_node({rows, cols}, std::move(out), parts,
                   [cols](TensorImpl& self, GradSink* sink) {
                     size_t off = 0;
                     for (auto& p : self.parents) {
                       size_t n = static_cast<size_t>(p.numel());
                       if (p.requires_grad())
                         accumulate_grad(p.node(), sink, self.grad.data() + off, n);
                       off += n;
                     }
                   });
}

Tensor slice_rows(const Tensor& a, int begin, int end) {
  check_2d(a, "slice_rows");
  if (begin < 0 || end > a.dim(0) || begin >= end)
    throw DimensionError("slice_rows: bad range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") for " + shape_str(a.shape()));
  int cols = a.dim(1), L = end - begin;
  std::vector<float> out(a.data().begin() + static_cast<size_t>(begin) * cols,
                         a.data().begin() + static_cast<size_t>(end) * cols);
  return make_node({L, cols}, std::move(out), {a},
                   [begin, cols](TensorImpl& self, GradSink* sink) {
                     Tensor p = self.parents[0];
                     if (!p.requires_grad()) return;
                     std::vector<float> g(p.numel(), 0.0f);
                     std::copy(self.grad.begin(), self.grad.end(),
                               g.begin() + static_cast<size_t>(begin) * cols);
                     accumulate_grad(p.node(), sink, g.data(), p.numel());
                   });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps) {
  check_2d(x, "rms_norm");
  int L = x.dim(0), d = x.dim(1);
  if (gain.numel() != d) throw DimensionError("rms_norm: gain size mismatch");
  std::vector<float> out(static_cast<size_t>(L) * d);
  std::vector<float> inv_rms(L);
  const float* px = x.ptr();
  const float* pg = gain.ptr();
  for (int r = 0; r < L; r++) {
    const float* row = px + static_cast<size_t>(r) * d;
    double ms = 0.0;
    for (int c = 0; c < d; c++) ms += static_cast<double>(row[c]) * row[c];
    float s = 1.0f / std::sqrt(static_cast<float>(ms / d) + eps);
    inv_rms[r] = s;
    float* orow = out.data() + static_cast<size_t>(r) * d;
    for (int c = 0; c < d; c++) orow[c] = row[c] * pg[c] * s;
  }
  return make_node(
      {L, d}, std::move(out), {x, gain},
      [L, d, inv_rms](TensorImpl& self, GradSink* sink) {
        Tensor px = self.parents[0], pg = self.parents[1];
        const float* x_ = px.ptr();
        const float* g_ = pg.ptr();
        std::vector<float> dx(static_cast<size_t>(L) * d, 0.0f);
        std::vector<float> dg(d, 0.0f);
        for (int r = 0; r < L; r++) {
          const float* xr = x_ + static_cast<size_t>(r) * d;
          const float* dyr = self.grad.data() + static_cast<size_t>(r) * d;
          float s = inv_rms[r];
          double dot = 0.0;  // sum_j dy_j * g_j * x_j
          for (int c = 0; c < d; c++) dot += static_cast<double>(dyr[c]) * g_[c] * xr[c];
          float k = static_cast<float>(dot) * s * s * s / d;
          float* dxr = dx.data() + static_cast<size_t>(r) * d;
          for (int c = 0; c < d; c++) {
            dxr[c] = s * g_[c] * dyr[c] - k * xr[c];
            dg[c] += s * xr[c] * dyr[c];
          }
        }
        if (px.requires_grad()) accumulate_grad(px.node(), sink, dx.data(), (int64_t)L * d);
        if (pg.requires_grad()) accumulate_grad(pg.node(), sink, dg.data(), d);
      });
}

Tensor rope(const Tensor& x, const std::vector<int>& positions, int n_heads, float theta) {
  check_2d(x, "rope");
  int L = x.dim(0), width = x.dim(1);
  if (static_cast<int>(positions.size()) != L)
    throw DimensionError("rope: positions length mismatch");
  if (width % n_heads != 0) throw DimensionError("rope: width not divisible by heads");
  int dh = width / n_heads;
  if (dh % 2 != 0) throw DimensionError("rope: head dim must be even");
  int half = dh / 2;

  auto rotate = [&](const float* in, float* out, float sign) {
    for (int r = 0; r < L; r++) {
      float pos = static_cast<float>(positions[r]);
      for (int h = 0; h < n_heads; h++) {
        const float* hin = in + static_cast<size_t>(r) * width + static_cast<size_t>(h) * dh;
        float* hout = out + static_cast<size_t>(r) * width + static_cast<size_t>(h) * dh;
        for (int i = 0; i < half; i++) {
          float freq = std::pow(theta, -2.0f * static_cast<float>(i) / dh);
          float ang = sign * pos * freq;
          float c = std::cos(ang), s = std::sin(ang);
          float a = hin[i], b = hin[i + half];
          hout[i] = a * c - b * s;
          hout[i + half] = a * s + b * c;
        }
      }
    }
  };

  std::vector<float> out(static_cast<size_t>(L) * width);
  rotate(x.ptr(), out.data(), 1.0f);
  return make_node({L, width}, std::move(out), {x},
                   [rotate, L, width](TensorImpl& self, GradSink* sink) {
                     Tensor p = self.parents[0];
                     if (!p.requires_grad()) return;
                     // rotation is orthogonal: backward rotates by -angle
                     std::vector<float> g(static_cast<size_t>(L) * width);
                     rotate(self.grad.data(), g.data(), -1.0f);
                     accumulate_grad(p.node(), sink, g.data(), (int64_t)L * width);
                   });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int n_heads, int n_kv_heads) {
  check_2d(q, "attention");
  check_2d(k, "attention");
  check_2d(v, "attention");
  int L = q.dim(0), S = k.dim(0);
  if (v.dim(0) != S) throw DimensionError("attention: k/v row mismatch");
  if (q.dim(1) % n_heads != 0 || k.dim(1) % n_kv_heads != 0 || n_heads % n_kv_heads != 0)
    throw DimensionError("attention: head layout mismatch");
  int dh = q.dim(1) / n_heads;
  if (k.dim(1) / n_kv_heads != dh || v.dim(1) != k.dim(1))
    throw DimensionError("attention: head dim mismatch");
  int offset = S - L;
  if (offset < 0) throw DimensionError("attention: more queries than keys");
  float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  int group = n_heads / n_kv_heads;

  bool record = g_grad_enabled && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  // softmax rows kept per head only when backward will need them
  auto probs = std::make_shared<std::vector<EMat>>();
  if (record) probs->resize(n_heads);

  std::vector<float> out(static_cast<size_t>(L) * n_heads * dh);
  CMapMat qm(q.ptr(), L, n_heads * dh);
  CMapMat km(k.ptr(), S, n_kv_heads * dh);
  CMapMat vm(v.ptr(), S, n_kv_heads * dh);
  MapMat om(out.data(), L, n_heads * dh);

  for (int h = 0; h < n_heads; h++) {
    int kvh = h / group;
    EMat scores = qm.middleCols(h * dh, dh) * km.middleCols(kvh * dh, dh).transpose() * inv_sqrt;
    for (int i = 0; i < L; i++) {
      int limit = i + offset;  // inclusive
      float mx = -std::numeric_limits<float>::infinity();
      for (int j = 0; j <= limit; j++) mx = std::max(mx, scores(i, j));
      double denom = 0.0;
      for (int j = 0; j <= limit; j++) {
        float e = std::exp(scores(i, j) - mx);
        scores(i, j) = e;
        denom += e;
      }
      float inv = static_cast<float>(1.0 / denom);
      for (int j = 0; j <= limit; j++) scores(i, j) *= inv;
      for (int j = limit + 1; j < S; j++) scores(i, j) = 0.0f;
    }
    om.middleCols(h * dh, dh).noalias() = scores * vm.middleCols(kvh * dh, dh);
    if (record) (*probs)[h] = std::move(scores);
  }

  return make_node(
      {L, n_heads * dh}, std::move(out), {q, k, v},
      [probs, n_heads, n_kv_heads, dh, L, S, inv_sqrt, group](TensorImpl& self, GradSink* sink) {
        Tensor pq = self.parents[0], pk = self.parents[1], pv = self.parents[2];
        CMapMat qm(pq.ptr(), L, n_heads * dh);
        CMapMat km(pk.ptr(), S, n_kv_heads * dh);
        CMapMat vm(pv.ptr(), S, n_kv_heads * dh);
        CMapMat dout(self.grad.data(), L, n_heads * dh);
        EMat dq = EMat::Zero(L, n_heads * dh);
        EMat dk = EMat::Zero(S, n_kv_heads * dh);
        EMat dv = EMat::Zero(S, n_kv_heads * dh);
        for (int h = 0; h < n_heads; h++) {
          int kvh = h / group;
          const EMat& P = (*probs)[h];
          EMat dO = dout.middleCols(h * dh, dh);
          dv.middleCols(kvh * dh, dh).noalias() += P.transpose() * dO;
          EMat dP = dO * vm.middleCols(kvh * dh, dh).transpose();
          // softmax backward: dS = P .* (dP - rowsum(dP .* P))
          EMat dS(L, S);
          for (int i = 0; i < L; i++) {
            double rowdot = 0.0;
            for (int j = 0; j < S; j++) rowdot += static_cast<double>(dP(i, j)) * P(i, j);
            for (int j = 0; j < S; j++)
              dS(i, j) = P(i, j) * (dP(i, j) - static_cast<float>(rowdot));
          }
          dq.middleCols(h * dh, dh).noalias() += dS * km.middleCols(kvh * dh, dh) * inv_sqrt;
          dk.middleCols(kvh * dh, dh).noalias() += dS.transpose() * qm.middleCols(h * dh, dh) * inv_sqrt;
        }
        if (pq.requires_grad()) accumulate_grad(pq.node(), sink, dq.data(), dq.size());
        if (pk.requires_grad()) accumulate_grad(pk.node(), sink, dk.data(), dk.size());
        if (pv.requires_grad()) accumulate_grad(pv.node(), sink, dv.data(), dv.size());
      });
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets) {
  check_2d(logits, "cross_entropy");
  if (targets.empty()) throw DataError("cross_entropy: empty target list");
  int n = logits.dim(0), V = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw DimensionError("cross_entropy: rows " + std::to_string(n) + " vs targets " +
                         std::to_string(targets.size()));
  for (int t : targets)
    if (t < 0 || t >= V) throw DataError("cross_entropy: target id out of vocab range");

  // keep softmax for the backward pass
  auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(n) * V);
  const float* pl = logits.ptr();
  double loss = 0.0;
  for (int r = 0; r < n; r++) {
    const float* row = pl + static_cast<size_t>(r) * V;
    float* prow = probs->data() + static_cast<size_t>(r) * V;
    float mx = *std::max_element(row, row + V);
    double denom = 0.0;
    for (int c = 0; c < V; c++) {
      float e = std::exp(row[c] - mx);
      prow[c] = e;
      denom += e;
    }
    float inv = static_cast<float>(1.0 / denom);
    for (int c = 0; c < V; c++) prow[c] *= inv;
    loss -= std::log(std::max(static_cast<double>(prow[targets[r]]), 1e-30));
  }
  loss /= n;

  return make_node({1}, {static_cast<float>(loss)}, {logits},
                   [probs, targets, n, V](TensorImpl& self, GradSink* sink) {
                     Tensor p = self.parents[0];
                     if (!p.requires_grad()) return;
                     float g = self.grad[0] / static_cast<float>(n);
                     std::vector<float> dl(static_cast<size_t>(n) * V);
                     for (int r = 0; r < n; r++) {
                       const float* prow = probs->data() + static_cast<size_t>(r) * V;
                       float* drow = dl.data() + static_cast<size_t>(r) * V;
                       for (int c = 0; c < V; c++) drow[c] = prow[c] * g;
                       drow[targets[r]] -= g;
                     }
                     accumulate_grad(p.node(), sink, dl.data(), (int64_t)n * V);
                   });
}

Tensor dropout(const Tensor& a, float p, Rng& rng) {
  if (p < 0.0f || p >= 1.0f) throw ConfigError("dropout: p must be in [0,1)");
  if (p == 0.0f) return a;
  int64_t n = a.numel();
  auto mask = std::make_shared<std::vector<uint8_t>>(n);
  float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> out(n);
  const float* pa = a.ptr();
  for (int64_t i = 0; i < n; i++) {
    bool keep = !rng.bernoulli(p);
    (*mask)[i] = keep;
    out[i] = keep ? pa[i] * keep_scale : 0.0f;
  }
  return make_node(a.shape(), std::move(out), {a},
                   [mask, keep_scale](TensorImpl& self, GradSink* sink) {
                     Tensor p0 = self.parents[0];
                     if (!p0.requires_grad()) return;
                     int64_t n = self.numel();
                     std::vector<float> g(n);
                     for (int64_t i = 0; i < n; i++)
                       g[i] = (*mask)[i] ? self.grad[i] * keep_scale : 0.0f;
                     accumulate_grad(p0.node(), sink, g.data(), n);
                   });
}

std::vector<float> softmax_row(const float* logits, int n) {
  std::vector<float> out(n);
  float mx = *std::max_element(logits, logits + n);
  double denom = 0.0;
  for (int i = 0; i < n; i++) {
    out[i] = std::exp(logits[i] - mx);
    denom += out[i];
  }
  for (int i = 0; i < n; i++) out[i] = static_cast<float>(out[i] / denom);
  return out;
}

int argmax_row(const float* logits, int n) {
  return static_cast<int>(std::max_element(logits, logits + n) - logits);
}

}  // namespace oscar
