#include <doctest.h>

#include "hmr/detect.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace hmr;
using hmr::test::random_tensor;

TEST_CASE("iou: identical, disjoint, half-overlap, symmetry") {
  BoundingBox a{0, 0, 10, 10};
  CHECK(iou(a, a) == doctest::Approx(1.0));

  BoundingBox b{20, 20, 30, 30};
  CHECK(iou(a, b) == doctest::Approx(0.0));

  BoundingBox u1{0, 0, 1, 1}, u2{0.5, 0, 1.5, 1};
  CHECK(iou(u1, u2) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Rng rng(501);
  for (int trial = 0; trial < 50; ++trial) {
    BoundingBox p{rng.uniform(0, 30), rng.uniform(0, 30), 0, 0};
    p.x_max = p.x_min + rng.uniform(1, 20);
    p.y_max = p.y_min + rng.uniform(1, 20);
    BoundingBox q{rng.uniform(0, 30), rng.uniform(0, 30), 0, 0};
    q.x_max = q.x_min + rng.uniform(1, 20);
    q.y_max = q.y_min + rng.uniform(1, 20);
    const double ab = iou(p, q), ba = iou(q, p);
    CHECK(ab == ba);
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
  }
}

TEST_CASE("head_forward shape contract and zero-input uniformity") {
  Rng rng(502);
  HeadParams head(32, 6, rng);
  Tape tape(false);
  Tensor fused = random_tensor({32, 16, 16}, rng);
  Tensor out = head_forward(tape, head, fused);
  CHECK(out.shape() == Shape{11, 16, 16});

  // zero input -> zero logits -> uniform class posterior per cell
  Tensor zeros_out = head_forward(tape, head, Tensor::zeros({32, 16, 16}));
  CHECK(zeros_out.data().abs().maxCoeff() == 0.0);
}

TEST_CASE("detection_loss analytic floors") {
  HeadGeometry geo{64, 4};
  const int k = 6;

  SUBCASE("no objects, uniform logits -> ce = ln(K+1)") {
    Tape tape;
    Tensor head_out = Tensor::zeros({k + 5, 16, 16});
    Tensor loss = detection_loss(tape, head_out, {}, geo, k);
    CHECK(loss.value() == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  }

  SUBCASE("saturated logits and exact offsets approach zero") {
    Tape tape;
    Tensor head_out = Tensor::zeros({k + 5, 16, 16});
    // one object: box centered at (10, 10), 8x8 -> cell (2,2)
    Annotation gt{{6, 6, 14, 14}, 3};
    const std::int64_t hw = 16 * 16;
    for (std::int64_t cell = 0; cell < hw; ++cell) {
      const bool is_match = cell == 2 * 16 + 2;
      for (int c = 0; c <= k; ++c)
        head_out.mut(c * hw + cell) = (c == (is_match ? 3 : k)) ? 20.0 : -20.0;
    }
    const double base = geo.base();
    const std::int64_t cell = 2 * 16 + 2;
    head_out.mut((k + 1) * hw + cell) = (10.0 - geo.cell_cx(2)) / base;
    head_out.mut((k + 2) * hw + cell) = (10.0 - geo.cell_cy(2)) / base;
    head_out.mut((k + 3) * hw + cell) = 8.0 / base;
    head_out.mut((k + 4) * hw + cell) = 8.0 / base;
    Tensor loss = detection_loss(tape, head_out, {gt}, geo, k);
    CHECK(loss.value() < 1e-6);
    CHECK(loss.value() >= 0.0);
  }

  SUBCASE("box outside the image is a validation error") {
    Tape tape;
    Tensor head_out = Tensor::zeros({k + 5, 16, 16});
    CHECK_THROWS_AS(detection_loss(tape, head_out, {{{-2, 0, 10, 10}, 0}}, geo, k),
                    std::invalid_argument);
    CHECK_THROWS_AS(detection_loss(tape, head_out, {{{0, 0, 10, 70}, 0}}, geo, k),
                    std::invalid_argument);
  }
}

TEST_CASE("detection_loss smooth-L1 term matches the piecewise formula") {
  HeadGeometry geo{64, 4};
  const int k = 6;
  Tape tape;
  Tensor head_out = Tensor::zeros({k + 5, 16, 16});
  Annotation gt{{6, 6, 14, 14}, 2};  // cell (2,2), targets (0,0,1,1)
  const std::int64_t hw = 16 * 16;
  const std::int64_t cell = 2 * 16 + 2;
  const double preds[4] = {0.4, -0.3, 1.8, 0.95};
  for (int i = 0; i < 4; ++i) head_out.mut((k + 1 + i) * hw + cell) = preds[i];

  Tensor loss = detection_loss(tape, head_out, {gt}, geo, k);
  const double targets[4] = {0.0, 0.0, 1.0, 1.0};
  double sl1 = 0;
  for (int i = 0; i < 4; ++i) {
    const double d = std::abs(preds[i] - targets[i]);
    sl1 += d < 1.0 ? 0.5 * d * d : d - 0.5;
  }
  const double ce = std::log(7.0) * (1.0 / 256.0) * 0 + [&] {
    // 255 background cells with uniform logits + 1 matched cell also uniform
    return std::log(7.0);
  }();
  CHECK(loss.value() == doctest::Approx(ce + sl1).epsilon(1e-9));
}

TEST_CASE("detection_loss gradient agrees with finite differences") {
  Rng rng(503);
  HeadGeometry geo{16, 4};
  const int k = 3;
  Tensor base = random_tensor({k + 5, 4, 4}, rng, -0.5, 0.5);
  std::vector<Annotation> truth{{{2, 2, 9, 9}, 1}, {{10, 10, 15, 15}, 2}};

  Tensor x(base.shape(), base.data(), true);
  Tape tape;
  Tensor loss = detection_loss(tape, x, truth, geo, k);
  tape.backward(loss);
  Tensor fd = finite_difference_oracle(
      [&](const Tensor& v) {
        Tape off(false);
        return detection_loss(off, v, truth, geo, k).value();
      },
      base);
  for (std::int64_t i = 0; i < base.size(); ++i)
    CHECK(hmr::test::rel_err(x.grad()[i], fd.at(i)) < 1e-4);
}

TEST_CASE("decode_and_nms basics") {
  HeadGeometry geo{64, 4};
  const int k = 2;
  const std::int64_t hw = 16 * 16;
  Tensor head_out = Tensor::full({k + 5, 16, 16}, -10.0);
  // background everywhere by default
  for (std::int64_t cell = 0; cell < hw; ++cell) head_out.mut(k * hw + cell) = 10.0;

  auto put = [&](int row, int col, int cls, double logit, double cx, double cy, double w, double h) {
    const std::int64_t cell = static_cast<std::int64_t>(row) * 16 + col;
    head_out.mut(cls * hw + cell) = logit;
    head_out.mut(k * hw + cell) = 0.0;
    head_out.mut((k + 1) * hw + cell) = (cx - geo.cell_cx(col)) / geo.base();
    head_out.mut((k + 2) * hw + cell) = (cy - geo.cell_cy(row)) / geo.base();
    head_out.mut((k + 3) * hw + cell) = w / geo.base();
    head_out.mut((k + 4) * hw + cell) = h / geo.base();
  };
  // two identical boxes of the same class from adjacent cells
  put(4, 4, 0, 6.0, 20, 20, 10, 10);
  put(4, 5, 0, 4.0, 20, 20, 10, 10);
  // one disjoint box of the other class
  put(12, 12, 1, 6.0, 50, 50, 8, 8);

  auto dets = decode_and_nms(head_out, 0.3, 0.5, geo, k);
  REQUIRE(dets.size() == 2);
  CHECK(dets[0].class_id == 0);
  CHECK(dets[0].box.x_min == doctest::Approx(15.0));
  CHECK(dets[1].class_id == 1);

  auto none = decode_and_nms(head_out, 1.0, 0.5, geo, k);
  CHECK(none.empty());
  CHECK_THROWS_AS(decode_and_nms(head_out, -0.1, 0.5, geo, k), std::invalid_argument);
}

TEST_CASE("decode_and_nms matches a quadratic brute-force oracle") {
  Rng rng(504);
  HeadGeometry geo{64, 4};
  const int k = 3;
  const std::int64_t hw = 16 * 16;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor head_out = random_tensor({k + 5, 16, 16}, rng, -2.0, 2.0);

    auto dets = decode_and_nms(head_out, 0.3, 0.5, geo, k, 1000);

    // oracle: rebuild candidates, then keep a candidate iff no higher-ranked
    // kept candidate of the same class overlaps it by more than the threshold
    struct Cand {
      BoundingBox box;
      int cls;
      double score;
      std::int64_t cell;
    };
    std::vector<Cand> cands;
    for (int row = 0; row < 16; ++row)
      for (int col = 0; col < 16; ++col) {
        const std::int64_t cell = static_cast<std::int64_t>(row) * 16 + col;
        double mx = -1e18, denom = 0;
        for (int c = 0; c <= k; ++c) mx = std::max(mx, head_out.at(c * hw + cell));
        std::vector<double> e(static_cast<std::size_t>(k) + 1);
        for (int c = 0; c <= k; ++c) {
          e[static_cast<std::size_t>(c)] = std::exp(head_out.at(c * hw + cell) - mx);
          denom += e[static_cast<std::size_t>(c)];
        }
        const double cx = geo.cell_cx(col) + head_out.at((k + 1) * hw + cell) * geo.base();
        const double cy = geo.cell_cy(row) + head_out.at((k + 2) * hw + cell) * geo.base();
        const double w = head_out.at((k + 3) * hw + cell) * geo.base();
        const double h = head_out.at((k + 4) * hw + cell) * geo.base();
        BoundingBox box{std::clamp(cx - w / 2, 0.0, 64.0), std::clamp(cy - h / 2, 0.0, 64.0),
                        std::clamp(cx + w / 2, 0.0, 64.0), std::clamp(cy + h / 2, 0.0, 64.0)};
        if (!box.valid()) continue;
        for (int c = 0; c < k; ++c) {
          const double score = e[static_cast<std::size_t>(c)] / denom;
          if (score >= 0.3) cands.push_back({box, c, score, cell});
        }
      }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.cell < b.cell;
    });
    std::vector<Cand> kept;
    for (const Cand& c : cands) {
      bool ok = true;
      for (const Cand& kc : kept)
        if (kc.cls == c.cls && iou(kc.box, c.box) > 0.5) {
          ok = false;
          break;
        }
      if (ok) kept.push_back(c);
    }
    REQUIRE(dets.size() == kept.size());
    for (std::size_t i = 0; i < kept.size(); ++i) {
      CHECK(dets[i].class_id == kept[i].cls);
      CHECK(dets[i].score == doctest::Approx(kept[i].score));
    }

    // antichain: no two kept detections of one class overlap above threshold
    for (std::size_t i = 0; i < dets.size(); ++i)
      for (std::size_t j = i + 1; j < dets.size(); ++j)
        if (dets[i].class_id == dets[j].class_id)
          CHECK(iou(dets[i].box, dets[j].box) <= 0.5);
  }
}
