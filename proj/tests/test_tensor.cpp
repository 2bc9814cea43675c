#include <doctest.h>

#include "hmr/tensor.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace hmr;
using hmr::test::max_grad_rel_err;
using hmr::test::random_simplex;
using hmr::test::random_tensor;
using hmr::test::rel_err;

namespace {

// Triple-loop reference product, independent of the Eigen-backed path.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int t = 0; t < k; ++t) s += a.at(i, t) * b.at(t, j);
      c.mut(static_cast<std::int64_t>(i) * n + j) = s;
    }
  return c;
}

// Naive 6-loop cross-correlation with zero padding 1.
Tensor conv_oracle(const Tensor& x, const Tensor& k) {
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2), co = k.dim(0);
  Tensor y({co, h, w});
  for (int oc = 0; oc < co; ++oc)
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < w; ++xx) {
        double s = 0;
        for (int c = 0; c < ci; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int sy = yy + ky - 1, sx = xx + kx - 1;
              if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
              s += x.at(c, sy, sx) * k.data()[((static_cast<std::int64_t>(oc) * ci + c) * 3 + ky) * 3 + kx];
            }
        y.mut((static_cast<std::int64_t>(oc) * h + yy) * w + xx) = s;
      }
  return y;
}

}  // namespace

TEST_CASE("matmul identity and annihilator") {
  Tape tape;
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor zero = Tensor::zeros({2, 2});
  Tensor r1 = matmul(tape, eye, a);
  for (int i = 0; i < 4; ++i) CHECK(r1.at(i) == a.at(i));
  Tensor r2 = matmul(tape, a, zero);
  for (int i = 0; i < 4; ++i) CHECK(r2.at(i) == 0.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(11);
  Tape tape;
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor c = matmul(tape, a, b);
  Tensor ref = matmul_oracle(a, b);
  for (std::int64_t i = 0; i < c.size(); ++i) CHECK(std::abs(c.at(i) - ref.at(i)) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 2});
  CHECK_THROWS_WITH_AS(matmul(tape, a, b), doctest::Contains("[2x3]"), std::invalid_argument);
  try {
    matmul(tape, a, b);
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("conv2d delta kernel is the identity") {
  Rng rng(7);
  for (auto [h, w] : {std::pair{4, 4}, {5, 7}, {1, 3}}) {
    Tape tape;
    Tensor x = random_tensor({1, h, w}, rng);
    Tensor k = Tensor::zeros({1, 1, 3, 3});
    k.mut(4) = 1.0;  // center tap
    Tensor y = conv2d(tape, x, k);
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(y.at(i) == x.at(i));
  }
}

TEST_CASE("conv2d ones kernel counts zero-padded neighbourhood") {
  Tape tape;
  Tensor x = Tensor::full({1, 5, 5}, 1.0);
  Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(tape, x, k);
  CHECK(y.at(0, 2, 2) == doctest::Approx(9.0));
  CHECK(y.at(0, 0, 0) == doctest::Approx(4.0));
  CHECK(y.at(0, 0, 2) == doctest::Approx(6.0));
}

TEST_CASE("conv2d matches naive oracle") {
  Rng rng(13);
  Tape tape;
  Tensor x = random_tensor({2, 5, 5}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  Tensor y = conv2d(tape, x, k);
  Tensor ref = conv_oracle(x, k);
  for (std::int64_t i = 0; i < y.size(); ++i) CHECK(std::abs(y.at(i) - ref.at(i)) < 1e-12);
}

TEST_CASE("conv2d channel mismatch is a dimension error") {
  Tape tape;
  CHECK_THROWS_AS(conv2d(tape, Tensor::zeros({2, 4, 4}), Tensor::zeros({3, 1, 3, 3})),
                  std::invalid_argument);
}

TEST_CASE("softmax_t symmetry, analytic case, direct evaluation") {
  Tape tape;
  Tensor s1 = softmax_t(tape, Tensor::from({3}, {0.7, 0.7, 0.7}), 3.0);
  for (int i = 0; i < 3; ++i) CHECK(s1.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor s2 = softmax_t(tape, Tensor::from({2}, {0.0, std::log(3.0)}), 1.0);
  CHECK(s2.at(0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(s2.at(1) == doctest::Approx(0.75).epsilon(1e-12));

  Tensor s3 = softmax_t(tape, Tensor::from({3}, {2, 1, 0}), 2.0);
  const double e0 = std::exp(1.0), e1 = std::exp(0.5), e2 = 1.0;
  const double z = e0 + e1 + e2;
  CHECK(s3.at(0) == doctest::Approx(e0 / z).epsilon(1e-12));
  CHECK(s3.at(1) == doctest::Approx(e1 / z).epsilon(1e-12));
  CHECK(s3.at(2) == doctest::Approx(e2 / z).epsilon(1e-12));

  CHECK_THROWS_AS(softmax_t(tape, s1, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(softmax_t(tape, s1, -1.0), std::invalid_argument);
}

TEST_CASE("softmax_t slices sum to one for |logit| <= 50") {
  Rng rng(17);
  Tape tape;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor logits = random_tensor({4, 6}, rng, -50.0, 50.0);
    Tensor p = softmax_t(tape, logits, rng.uniform(0.25, 4.0));
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int i = 0; i < 6; ++i) s += p.at(r, i);
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("elementwise basics") {
  Tape tape;
  Tensor r = relu(tape, Tensor::from({3}, {-1, 0, 2}));
  CHECK(r.at(0) == 0.0);
  CHECK(r.at(1) == 0.0);
  CHECK(r.at(2) == 2.0);

  CHECK(sigmoid(tape, Tensor::scalar(0.0)).value() == doctest::Approx(0.5));

  Tensor c = concat(tape, Tensor::from({2}, {1, 2}), Tensor::from({1}, {3}), 0);
  CHECK(c.size() == 3);
  CHECK(c.at(0) == 1.0);
  CHECK(c.at(2) == 3.0);

  CHECK_THROWS_AS(concat(tape, Tensor::zeros({2}), Tensor::zeros({2}), 1), std::invalid_argument);
}

TEST_CASE("layer_norm constant input collapses to zero") {
  Tape tape;
  Tensor y = layer_norm(tape, Tensor::full({5}, 3.25));
  for (int i = 0; i < 5; ++i) CHECK(std::abs(y.at(i)) < 1e-9);
}

TEST_CASE("layer_norm two-point standardization") {
  Tape tape;
  Tensor y = layer_norm(tape, Tensor::from({2}, {1, 3}));
  CHECK(y.at(0) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y.at(1) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("batch_norm training statistics oracle") {
  Rng rng(23);
  Tape tape;
  Tensor x = random_tensor({3, 6, 6}, rng, -2.0, 5.0);
  Tensor gamma = Tensor::full({3}, 1.0);
  Tensor beta = Tensor::zeros({3});
  BatchNormStats stats;
  Tensor y = batch_norm(tape, x, gamma, beta, stats, true);
  for (int c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (int i = 0; i < 36; ++i) m += y.at(c * 36 + i);
    m /= 36;
    for (int i = 0; i < 36; ++i) v += (y.at(c * 36 + i) - m) * (y.at(c * 36 + i) - m);
    v /= 36;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(v - 1.0) < 1e-5);
  }
}

TEST_CASE("batch_norm eval before any recorded statistics is a state error") {
  Tape tape;
  Tensor x = Tensor::zeros({2, 4, 4});
  Tensor gamma = Tensor::full({2}, 1.0);
  Tensor beta = Tensor::zeros({2});
  BatchNormStats stats;
  CHECK_THROWS_AS(batch_norm(tape, x, gamma, beta, stats, false), std::logic_error);
  batch_norm(tape, x, gamma, beta, stats, true);
  CHECK_NOTHROW(batch_norm(tape, x, gamma, beta, stats, false));
}

TEST_CASE("spatial_mean trivial and oracle cases") {
  Rng rng(29);
  Tape tape;
  Tensor c = spatial_mean(tape, Tensor::full({4, 3, 3}, 2.5));
  for (int i = 0; i < 4; ++i) CHECK(c.at(i) == doctest::Approx(2.5));

  Tensor d = random_tensor({3, 1, 1}, rng);
  Tensor dm = spatial_mean(tape, d);
  for (int i = 0; i < 3; ++i) CHECK(dm.at(i) == d.at(i));

  Tensor x = random_tensor({3, 4, 4}, rng);
  Tensor m = spatial_mean(tape, x);
  for (int ci = 0; ci < 3; ++ci) {
    double s = 0;
    for (int i = 0; i < 16; ++i) s += x.at(ci * 16 + i);
    CHECK(m.at(ci) == doctest::Approx(s / 16).epsilon(1e-12));
  }
}

TEST_CASE("kl_divergence analytic values and validation") {
  Tape tape;
  Tensor half = Tensor::from({2}, {0.5, 0.5});
  CHECK(kl_divergence(tape, half, half).value() == doctest::Approx(0.0));

  Tensor p = Tensor::from({2}, {1, 0});
  CHECK(kl_divergence(tape, p, half).value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Rng rng(31);
  Tensor a = random_simplex(5, rng), b = random_simplex(5, rng);
  double ref = 0;
  for (int i = 0; i < 5; ++i)
    if (a.at(i) > 0) ref += a.at(i) * (std::log(a.at(i)) - std::log(std::max(b.at(i), 1e-12)));
  CHECK(kl_divergence(tape, a, b).value() == doctest::Approx(ref).epsilon(1e-12));

  CHECK_THROWS_AS(kl_divergence(tape, Tensor::from({2}, {0.7, 0.7}), half), std::invalid_argument);
}

TEST_CASE("kl_divergence of a distribution with itself stays under 1e-10") {
  Rng rng(37);
  Tape tape;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor p = random_simplex(8, rng);
    CHECK(kl_divergence(tape, p, p).value() <= 1e-10);
    CHECK(kl_divergence(tape, p, p).value() >= 0.0);
  }
}

TEST_CASE("backward: sum yields ones, product rule, non-scalar rejected") {
  {
    Tape tape;
    Tensor x = random_tensor({2, 3}, *std::make_unique<Rng>(41), -1, 1, true);
    Tensor loss = sum(tape, x);
    tape.backward(loss);
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == 1.0);
  }
  {
    Tape tape;
    Tensor x = Tensor::scalar(2.0, true);
    Tensor y = Tensor::scalar(3.0, true);
    Tensor loss = mul(tape, x, y);
    tape.backward(loss);
    CHECK(x.grad()[0] == 3.0);
    CHECK(y.grad()[0] == 2.0);
  }
  {
    Tape tape;
    Tensor x = Tensor::zeros({2, 2}, true);
    Tensor y = relu(tape, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  }
}

TEST_CASE("backward leaves disconnected tensors at zero grad") {
  Tape tape;
  Tensor x = Tensor::scalar(1.5, true);
  Tensor bystander = Tensor::scalar(4.0, true);
  Tensor loss = mul(tape, x, x);
  tape.backward(loss);
  CHECK_FALSE(bystander.has_grad());
  CHECK(bystander.grad()[0] == 0.0);
}

TEST_CASE("backward is additive across losses") {
  Rng rng(43);
  Tensor base = random_tensor({6}, rng, 0.1, 1.0);

  auto run = [&](int which) {
    Tensor x(base.shape(), base.data(), true);
    Tape tape;
    Tensor l1 = sum(tape, mul(tape, x, x));
    Tensor l2 = mean(tape, sigmoid(tape, x));
    if (which == 0)
      tape.backward(add(tape, l1, l2));
    else if (which == 1)
      tape.backward(l1);
    else
      tape.backward(l2);
    return Array(x.grad());
  };
  Array combined = run(0), ga = run(1), gb = run(2);
  for (int i = 0; i < 6; ++i) CHECK(std::abs(combined[i] - (ga[i] + gb[i])) < 1e-12);
}

TEST_CASE("composed graph gradient matches finite differences") {
  Rng rng(47);
  Tensor x = random_tensor({3, 4}, rng, 0.2, 1.2);
  double err = max_grad_rel_err(
      [](Tape& t, const Tensor& v) {
        Tensor w = Tensor::from({4, 2}, {0.3, -0.2, 0.5, 0.9, -0.4, 0.1, 0.8, -0.7});
        Tensor h = relu(t, matmul(t, v, w));
        Tensor s = softmax_t(t, h, 1.5);
        return mean(t, mul(t, s, s));
      },
      x);
  CHECK(err < 1e-4);
}

TEST_CASE("finite_difference_oracle on analytic cases") {
  Tensor x = Tensor::from({2}, {1, 2});
  Tensor g = finite_difference_oracle(
      [](const Tensor& v) { return v.data().square().sum(); }, x);
  CHECK(g.at(0) == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(g.at(1) == doctest::Approx(4.0).epsilon(1e-6));

  // softmax row 0 Jacobian: d s0 / d x_j = s0 (delta_0j - s_j)
  Tensor lg = Tensor::from({3}, {0.2, -0.1, 0.4});
  Tape probe(false);
  Tensor s = softmax_t(probe, lg, 1.0);
  Tensor j = finite_difference_oracle(
      [](const Tensor& v) {
        Tape t(false);
        return softmax_t(t, v, 1.0).at(0);
      },
      lg);
  for (int k = 0; k < 3; ++k) {
    const double expect = s.at(0) * ((k == 0 ? 1.0 : 0.0) - s.at(k));
    CHECK(rel_err(j.at(k), expect) < 1e-6);
  }

  Tensor zero = finite_difference_oracle([](const Tensor&) { return 7.5; }, x);
  CHECK(zero.at(0) == 0.0);
  CHECK(zero.at(1) == 0.0);
}

TEST_CASE("per-op gradients agree with central differences") {
  Rng rng(53);
  auto check = [&](const char* name, const std::function<Tensor(Tape&, const Tensor&)>& f, Shape shape,
                   double lo, double hi) {
    Tensor x = random_tensor(shape, rng, lo, hi);
    double err = max_grad_rel_err(f, x);
    INFO(name);
    CHECK(err < 1e-4);
  };

  check("matmul", [](Tape& t, const Tensor& v) {
    Tensor w = Tensor::from({3, 2}, {0.2, -0.5, 0.7, 0.3, -0.1, 0.6});
    return sum(t, matmul(t, v, w));
  }, {2, 3}, -1, 1);
  check("conv2d", [](Tape& t, const Tensor& v) {
    Tensor k(Shape{2, 2, 3, 3});
    for (std::int64_t i = 0; i < k.size(); ++i) k.mut(i) = 0.05 * static_cast<double>(i % 7) - 0.1;
    return mean(t, conv2d(t, v, k));
  }, {2, 4, 4}, -1, 1);
  check("softmax", [](Tape& t, const Tensor& v) {
    Tensor s = softmax_t(t, v, 2.0);
    return sum(t, mul(t, s, s));
  }, {5}, -2, 2);
  check("relu", [](Tape& t, const Tensor& v) { return sum(t, relu(t, v)); }, {6}, 0.1, 2.0);
  check("sigmoid", [](Tape& t, const Tensor& v) { return mean(t, sigmoid(t, v)); }, {6}, -2, 2);
  check("layer_norm", [](Tape& t, const Tensor& v) {
    Tensor y = layer_norm(t, v);
    return sum(t, mul(t, y, y));
  }, {7}, -1, 1);
  check("spatial_mean", [](Tape& t, const Tensor& v) {
    Tensor m = spatial_mean(t, v);
    return sum(t, mul(t, m, m));
  }, {2, 3, 3}, -1, 1);
  check("avg_pool", [](Tape& t, const Tensor& v) {
    Tensor y = avg_pool2(t, v);
    return sum(t, mul(t, y, y));
  }, {2, 4, 4}, -1, 1);
  check("coherence", [](Tape& t, const Tensor& v) {
    return coherence_penalty(t, softmax_t(t, v, 1.0));
  }, {3, 3, 4}, -1, 1);
  check("l2_normalize", [](Tape& t, const Tensor& v) {
    Tensor y = l2_normalize(t, v);
    Tensor w = Tensor::from({4}, {0.4, -0.3, 0.8, 0.1});
    return sum(t, mul(t, y, w));
  }, {4}, 0.3, 1.0);
}

TEST_CASE("kl gradient flows to q only") {
  Rng rng(59);
  Tensor p = random_simplex(4, rng);
  Tensor q_logits = random_tensor({4}, rng, -1, 1, true);
  Tape tape;
  Tensor q = softmax_t(tape, q_logits, 1.0);
  Tensor d = kl_divergence(tape, p, q);
  tape.backward(d);
  CHECK(q_logits.grad().abs().sum() > 0.0);

  Tensor fd = finite_difference_oracle(
      [&](const Tensor& v) {
        Tape t(false);
        return kl_divergence(t, p, softmax_t(t, v, 1.0)).value();
      },
      q_logits);
  for (int i = 0; i < 4; ++i) CHECK(rel_err(q_logits.grad()[i], fd.at(i)) < 1e-4);
}
