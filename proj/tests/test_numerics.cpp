#include <doctest.h>

#include <cmath>
#include <functional>

#include "oscar/errors.hpp"
#include "oscar/gradcheck.hpp"
#include "oscar/optimizer.hpp"
#include "oscar/tensor.hpp"
#include "support/oracle.hpp"

using namespace oscar;

namespace {

Tensor randn(std::vector<int> shape, uint64_t seed, bool rg = true) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, 1.0f, rg);
}

// scalar wrapper: weighted sum of an op's output, so gradients are generic
std::vector<float> rand_weights(int64_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> w(n);
  for (auto& x : w) x = rng.normal();
  return w;
}

double weighted_sum(const Tensor& t, const std::vector<float>& w) {
  double s = 0.0;
  for (int64_t i = 0; i < t.numel(); i++) s += static_cast<double>(t.ptr()[i]) * w[i];
  return s;
}

Tensor weighted_sum_node(const Tensor& t, const std::vector<float>& w) {
  return sum(mul(t, Tensor::from_data(t.shape(), w)));
}

}  // namespace

TEST_CASE("matmul basics") {
  auto I = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto B = Tensor::from_data({2, 2}, {3, 4, 5, 6});
  auto C = matmul(I, B);
  CHECK(C.data() == std::vector<float>({3, 4, 5, 6}));

  auto a = Tensor::from_data({1, 2}, {1, 2});
  auto b = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(a, b).scalar() == doctest::Approx(11.0));

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("matmul backward matches finite differences") {
  auto a = randn({5, 7}, 11);
  auto b = randn({7, 3}, 12);
  auto w = rand_weights(15, 13);
  Tensor loss = weighted_sum_node(matmul(a, b), w);
  backward(loss, nullptr);

  auto f = [&] {
    auto c = oracle::matmul(oracle::to_d(a.data()), 5, 7, oracle::to_d(b.data()), 3);
    double s = 0.0;
    for (size_t i = 0; i < c.size(); i++) s += c[i] * w[i];
    return s;
  };
  CHECK(grad_check(f, a.ptr(), a.grad().data(), a.numel()) < 1e-4);
  CHECK(grad_check(f, b.ptr(), b.grad().data(), b.numel()) < 1e-4);
}

TEST_CASE("cross entropy examples") {
  SUBCASE("uniform logits give ln(V)") {
    int V = 32;
    auto logits = Tensor::zeros({3, V});
    auto loss = cross_entropy_mean(logits, {0, 5, 31});
    CHECK(loss.scalar() == doctest::Approx(std::log(static_cast<double>(V))).epsilon(1e-6));
  }
  SUBCASE("near-certain prediction") {
    auto logits = Tensor::from_data({1, 2}, {10.0f, -10.0f});
    CHECK(cross_entropy_mean(logits, {0}).scalar() == doctest::Approx(0.0).epsilon(1e-6));
  }
  SUBCASE("empty target list") {
    CHECK_THROWS_AS(cross_entropy_mean(Tensor::zeros({0, 4}), {}), DataError);
  }
  SUBCASE("target out of vocab") {
    CHECK_THROWS_AS(cross_entropy_mean(Tensor::zeros({1, 4}), {7}), DataError);
  }
  SUBCASE("gradient is softmax minus one-hot") {
    auto logits = randn({2, 5}, 21);
    std::vector<int> targets{3, 1};
    Tensor loss = cross_entropy_mean(logits, targets);
    backward(loss, nullptr);
    for (int r = 0; r < 2; r++) {
      auto p = softmax_row(logits.ptr() + r * 5, 5);
      for (int c = 0; c < 5; c++) {
        float expect = (p[c] - (targets[r] == c ? 1.0f : 0.0f)) / 2.0f;
        CHECK(logits.grad()[r * 5 + c] == doctest::Approx(expect).epsilon(1e-4));
      }
    }
  }
  SUBCASE("random case matches finite differences") {
    auto logits = randn({4, 16}, 22);
    std::vector<int> targets{0, 3, 7, 15};
    Tensor loss = cross_entropy_mean(logits, targets);
    backward(loss, nullptr);
    auto f = [&] {
      return oracle::cross_entropy_mean(oracle::to_d(logits.data()), 4, 16, targets);
    };
    CHECK(grad_check(f, logits.ptr(), logits.grad().data(), logits.numel()) < 1e-4);
  }
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(31);
  for (int trial = 0; trial < 20; trial++) {
    int n = 2 + rng.index(30);
    std::vector<float> row(n);
    for (auto& v : row) v = rng.normal(0.0f, 5.0f);
    auto p = softmax_row(row.data(), n);
    double s = 0.0;
    for (float v : p) {
      CHECK(std::isfinite(v));
      s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("elementwise and structural op gradients") {
  auto check_unary = [&](const char* name, const std::function<Tensor(const Tensor&)>& op,
                         float shift = 0.0f) {
    INFO(name);
    auto x = randn({3, 4}, 41);
    if (shift != 0.0f)
      for (auto& v : x.data()) v += (v >= 0 ? shift : -shift);  // keep away from kinks
    Tensor out;
    {
      NoGradGuard ng;
      out = op(x);
    }
    auto w = rand_weights(out.numel(), 42);
    Tensor loss = weighted_sum_node(op(x), w);
    backward(loss, nullptr);
    auto f = [&] {
      NoGradGuard ng;
      return weighted_sum(op(x), w);
    };
    CHECK(grad_check(f, x.ptr(), x.grad().data(), x.numel()) < 1e-3);
  };

  check_unary("relu", [](const Tensor& t) { return relu(t); }, 0.05f);
  check_unary("silu", [](const Tensor& t) { return silu(t); });
  check_unary("sigmoid", [](const Tensor& t) { return sigmoid(t); });
  check_unary("square", [](const Tensor& t) { return square(t); });
  check_unary("scale", [](const Tensor& t) { return scale(t, -1.7f); });
  check_unary("mean_all", [](const Tensor& t) { return mean_all(t); });
  check_unary("slice", [](const Tensor& t) { return slice_rows(t, 1, 3); });
  check_unary("sub_const",
              [](const Tensor& t) { return sub_const(t, std::vector<float>(12, 0.3f)); });
  check_unary("matmul_nt", [](const Tensor& t) { return matmul_nt(t, t); });

  SUBCASE("binary ops") {
    auto a = randn({2, 3}, 43);
    auto b = randn({2, 3}, 44);
    auto w = rand_weights(6, 45);
    Tensor loss = weighted_sum_node(mul(add(a, b), sub(a, b)), w);
    backward(loss, nullptr);
    auto f = [&] {
      NoGradGuard ng;
      return weighted_sum(mul(add(a, b), sub(a, b)), w);
    };
    CHECK(grad_check(f, a.ptr(), a.grad().data(), a.numel()) < 1e-3);
    CHECK(grad_check(f, b.ptr(), b.grad().data(), b.numel()) < 1e-3);
  }

  SUBCASE("row gather and concat") {
    auto table = randn({6, 4}, 46);
    std::vector<int> ids{0, 3, 3, 5};
    auto run = [&] {
      Tensor g = row_gather(table, ids);
      Tensor s = slice_rows(table, 1, 3);
      return concat_rows({g, s});
    };
    auto w = rand_weights(24, 47);
    Tensor loss = weighted_sum_node(run(), w);
    backward(loss, nullptr);
    auto f = [&] {
      NoGradGuard ng;
      return weighted_sum(run(), w);
    };
    CHECK(grad_check(f, table.ptr(), table.grad().data(), table.numel()) < 1e-3);
    CHECK_THROWS_AS(row_gather(table, {6}), DataError);
  }

  SUBCASE("rms_norm") {
    auto x = randn({3, 8}, 48);
    auto g = randn({8}, 49);
    auto w = rand_weights(24, 50);
    Tensor loss = weighted_sum_node(rms_norm(x, g), w);
    backward(loss, nullptr);
    auto f = [&] {
      auto y = oracle::rms_norm(oracle::to_d(x.data()), 3, 8, oracle::to_d(g.data()));
      double s = 0.0;
      for (size_t i = 0; i < y.size(); i++) s += y[i] * w[i];
      return s;
    };
    CHECK(grad_check(f, x.ptr(), x.grad().data(), x.numel()) < 1e-3);
    CHECK(grad_check(f, g.ptr(), g.grad().data(), g.numel()) < 1e-3);
  }

  SUBCASE("rope") {
    auto x = randn({4, 8}, 51);  // 2 heads x dh 4
    std::vector<int> pos{0, 1, 2, 3};
    auto w = rand_weights(32, 52);
    Tensor loss = weighted_sum_node(rope(x, pos, 2), w);
    backward(loss, nullptr);
    auto f = [&] {
      auto y = oracle::rope(oracle::to_d(x.data()), 4, 8, pos, 2);
      double s = 0.0;
      for (size_t i = 0; i < y.size(); i++) s += y[i] * w[i];
      return s;
    };
    CHECK(grad_check(f, x.ptr(), x.grad().data(), x.numel()) < 1e-3);
  }

  SUBCASE("causal attention incl grouped kv") {
    int L = 5, H = 4, KV = 2, dh = 4;
    auto q = randn({L, H * dh}, 53);
    auto k = randn({L, KV * dh}, 54);
    auto v = randn({L, KV * dh}, 55);
    auto w = rand_weights(static_cast<int64_t>(L) * H * dh, 56);
    Tensor loss = weighted_sum_node(causal_attention(q, k, v, H, KV), w);
    backward(loss, nullptr);
    auto f = [&] {
      auto y = oracle::causal_attention(oracle::to_d(q.data()), oracle::to_d(k.data()),
                                        oracle::to_d(v.data()), L, L, H, KV, dh);
      double s = 0.0;
      for (size_t i = 0; i < y.size(); i++) s += y[i] * w[i];
      return s;
    };
    CHECK(grad_check(f, q.ptr(), q.grad().data(), q.numel()) < 1e-3);
    CHECK(grad_check(f, k.ptr(), k.grad().data(), k.numel()) < 1e-3);
    CHECK(grad_check(f, v.ptr(), v.grad().data(), v.numel()) < 1e-3);
  }

  SUBCASE("dropout with a fixed mask") {
    auto x = randn({4, 4}, 57);
    auto w = rand_weights(16, 58);
    auto run = [&] {
      Rng rng(99);  // same mask on every evaluation
      return dropout(x, 0.25f, rng);
    };
    Tensor loss = weighted_sum_node(run(), w);
    backward(loss, nullptr);
    auto f = [&] {
      NoGradGuard ng;
      return weighted_sum(run(), w);
    };
    CHECK(grad_check(f, x.ptr(), x.grad().data(), x.numel()) < 1e-3);
    CHECK_THROWS_AS(
        [&] {
          Rng r(1);
          return dropout(x, 1.0f, r);
        }(),
        ConfigError);
  }
}

TEST_CASE("two-layer mlp with relu against finite differences") {
  Rng rng(61);
  auto x = Tensor::randn({2, 6}, rng, 1.0f, false);
  auto w1 = Tensor::randn({6, 8}, rng, 0.5f, true);
  auto w2 = Tensor::randn({8, 3}, rng, 0.5f, true);
  auto w = rand_weights(6, 62);
  auto run = [&] { return matmul(relu(matmul(x, w1)), w2); };
  Tensor loss = weighted_sum_node(run(), w);
  backward(loss, nullptr);
  auto f = [&] {
    NoGradGuard ng;
    return weighted_sum(run(), w);
  };
  CHECK(grad_check(f, w1.ptr(), w1.grad().data(), w1.numel()) < 1e-3);
  CHECK(grad_check(f, w2.ptr(), w2.grad().data(), w2.numel()) < 1e-3);
}

TEST_CASE("grad_check on a closed-form function") {
  std::vector<float> x{3.0f};
  std::vector<float> analytic{6.0f};
  auto f = [&] { return static_cast<double>(x[0]) * x[0]; };
  CHECK(grad_check(f, x.data(), analytic.data(), 1) < 1e-6);
}

TEST_CASE("forward ops stay finite on finite inputs") {
  Rng rng(71);
  for (int trial = 0; trial < 10; trial++) {
    auto x = Tensor::randn({6, 8}, rng, 20.0f);  // large magnitudes
    auto g = Tensor::full({8}, 1.0f);
    auto y = rms_norm(x, g);
    auto q = rope(x, {0, 1, 2, 3, 4, 5}, 2);
    auto att = causal_attention(q, q, x, 2, 2);
    auto sm = cross_entropy_mean(att, {0, 1, 2, 3, 4, 5});
    for (float v : att.data()) CHECK(std::isfinite(v));
    for (float v : y.data()) CHECK(std::isfinite(v));
    CHECK(std::isfinite(sm.scalar()));
  }
}

TEST_CASE("adamw") {
  auto make_opt = [&](Tensor p, double lr, double wd, double clip, int total = 10) {
    ParamRegistry reg;
    reg.add("p", p);
    OptimizerConfig oc;
    oc.weight_decay = wd;
    oc.max_grad_norm = clip;
    oc.warmup_ratio = 0.0;
    oc.total_steps = total;
    std::vector<ParamGroup> groups{{"g", reg, lr}};
    auto opt = std::make_unique<AdamW>(std::move(groups), oc);
    opt->activate();
    return opt;
  };

  SUBCASE("zero gradient, zero weight decay: identity") {
    auto p = Tensor::from_data({3}, {1.0f, -2.0f, 0.5f}, true);
    auto opt = make_opt(p, 0.1, 0.0, 0.0);
    GradSink g(3);
    opt->step(g);
    CHECK(p.data() == std::vector<float>({1.0f, -2.0f, 0.5f}));
  }

  SUBCASE("first step moves by lr for a unit gradient") {
    auto p = Tensor::from_data({1}, {0.7f}, true);
    auto opt = make_opt(p, 0.1, 0.0, 0.0, 1);
    GradSink g(1);
    g.buf[0] = 1.0f;
    opt->step(g);
    CHECK(p.data()[0] == doctest::Approx(0.6).epsilon(1e-4));
  }

  SUBCASE("global norm clipping rescales the gradient") {
    auto p = Tensor::from_data({2}, {0.0f, 0.0f}, true);
    auto opt = make_opt(p, 0.0, 0.0, 1.0);
    GradSink g(2);
    g.buf = {6.0f, 8.0f};  // norm 10
    double norm = opt->step(g);
    CHECK(norm == doctest::Approx(10.0));
    CHECK(g.buf[0] == doctest::Approx(0.6));
    CHECK(g.buf[1] == doctest::Approx(0.8));
  }

  SUBCASE("lr 0 is the identity even with weight decay") {
    auto p = Tensor::from_data({2}, {1.5f, -0.25f}, true);
    auto opt = make_opt(p, 0.0, 0.1, 1.0);
    GradSink g(2);
    g.buf = {0.3f, -0.9f};
    opt->step(g);
    CHECK(p.data() == std::vector<float>({1.5f, -0.25f}));
  }

  SUBCASE("sink size mismatch is an error") {
    auto p = Tensor::from_data({2}, {0.0f, 0.0f}, true);
    auto opt = make_opt(p, 0.1, 0.0, 1.0);
    GradSink g(5);
    CHECK_THROWS_AS(opt->step(g), NumericError);
  }

  SUBCASE("linear schedule warms up then decays") {
    auto p = Tensor::from_data({1}, {0.0f}, true);
    ParamRegistry reg;
    reg.add("p", p);
    OptimizerConfig oc;
    oc.warmup_ratio = 0.2;
    oc.total_steps = 10;
    std::vector<ParamGroup> groups{{"g", reg, 1.0}};
    AdamW opt(std::move(groups), oc);
    CHECK(opt.schedule(1) == doctest::Approx(0.5));
    CHECK(opt.schedule(2) == doctest::Approx(1.0));
    CHECK(opt.schedule(6) == doctest::Approx(0.5));
    CHECK(opt.schedule(10) == doctest::Approx(0.0));
  }
}

TEST_CASE("gradient accumulation over half-batches equals the full batch") {
  Rng rng(81);
  auto w1 = Tensor::randn({4, 4}, rng, 0.7f, true);
  ParamRegistry reg;
  reg.add("w", w1);
  reg.assign_slots();

  auto loss_for = [&](int i) {
    Rng r(100 + i);
    auto x = Tensor::randn({2, 4}, r, 1.0f, false);
    return cross_entropy_mean(matmul(x, w1), {i % 4, (i + 1) % 4});
  };

  GradSink full(16), half(16);
  for (int i = 0; i < 4; i++) backward(scale(loss_for(i), 0.25f), &full);
  GradSink h1(16), h2(16);
  for (int i = 0; i < 2; i++) backward(scale(loss_for(i), 0.25f), &h1);
  for (int i = 2; i < 4; i++) backward(scale(loss_for(i), 0.25f), &h2);
  half.add_from(h1);
  half.add_from(h2);
  for (int i = 0; i < 16; i++) CHECK(half.buf[i] == doctest::Approx(full.buf[i]).epsilon(1e-5));
  reg.clear_slots();
}

TEST_CASE("full tiny transformer gradients match the double-precision oracle") {
  ArchConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_head = 8;
  cfg.d_ff = 24;
  cfg.vocab_size = 24;
  cfg.max_seq = 16;
  auto model = TransformerModel::init(cfg, 7);

  std::vector<int> tokens{1, 5, 9, 13, 2, 21, 8};
  std::vector<int> rows{2, 4, 5, 6};
  std::vector<int> targets{9, 17, 3, 22};

  ParamRegistry params = model.base_params();
  params.assign_slots();
  GradSink sink(static_cast<size_t>(params.total_size()));
  {
    RagSequence seq = RagSequence::of_tokens(tokens);
    Tensor hidden = model.forward_hidden(seq);
    Tensor picked = concat_rows({slice_rows(hidden, 2, 3), slice_rows(hidden, 4, 7)});
    Tensor loss = cross_entropy_mean(model.unembed_rows(picked), targets);
    backward(loss, &sink);
  }

  auto f = [&] { return oracle::transformer_loss(model, tokens, rows, targets); };
  double worst = 0.0;
  for (const auto& e : params.entries()) {
    INFO(e.name);
    double err = grad_check(f, e.tensor.ptr(), sink.buf.data() + e.offset, e.tensor.numel(),
                            1e-3, 40, 0xbeef + static_cast<uint64_t>(e.offset));
    worst = std::max(worst, err);
    CHECK(err < 1e-3);
  }
  MESSAGE("worst group error: ", worst);
  params.clear_slots();
}
