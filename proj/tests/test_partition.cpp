#include <doctest.h>

#include "hmr/partition.hpp"
#include "test_util.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

using namespace hmr;
using hmr::test::random_tensor;

TEST_CASE("feature_entropy trivial and hand cases") {
  Tensor one_channel = Tensor::zeros({4, 2, 2});
  for (int i = 0; i < 4; ++i) one_channel.mut(2 * 4 + i) = 1.5;  // all mass in channel 2
  CHECK(feature_entropy(one_channel).entropy == doctest::Approx(0.0));

  Tensor uniform = Tensor::full({32, 3, 3}, 0.7);
  CHECK(feature_entropy(uniform).entropy == doctest::Approx(std::log(32.0)).epsilon(1e-12));

  // shares 0.5 / 0.25 / 0.25
  Tensor shares = Tensor::zeros({3, 1, 2});
  shares.mut(0) = 1.0;
  shares.mut(1) = 1.0;
  shares.mut(2) = 1.0;
  shares.mut(4) = 1.0;
  const double expect = -(0.5 * std::log(0.5) + 0.5 * std::log(0.25));
  CHECK(feature_entropy(shares).entropy == doctest::Approx(expect).epsilon(1e-10));
  CHECK(feature_entropy(shares).entropy == doctest::Approx(1.0397).epsilon(1e-3));

  Tensor negative = Tensor::full({2, 2, 2}, -0.1);
  CHECK_THROWS_AS(feature_entropy(negative), std::invalid_argument);

  ComplexityEstimate zero = feature_entropy(Tensor::zeros({8, 2, 2}));
  CHECK(zero.entropy == doctest::Approx(std::log(8.0)));
  CHECK(zero.channel_distribution.sum() == doctest::Approx(1.0));
}

TEST_CASE("region_count anchors, clamping, monotonicity") {
  CHECK(region_count(0.0, 1.0, 8) == 5);  // 2 + 0.5*6
  CHECK(region_count(1e9, 1.0, 8) == 8);
  CHECK(region_count(1.0, 1.0, 8) == 6);  // round(2 + 0.7311*6) = round(6.386)
  CHECK(region_count(0.0, -5.0, 8) == 5);
  CHECK_THROWS_AS(region_count(1.0, 1.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(region_count(-0.5, 1.0, 8), std::invalid_argument);

  int prev = 2;
  for (double h = 0.0; h <= 12.0; h += 0.05) {
    const int r = region_count(h, 1.0, 8);
    CHECK(r >= prev);
    CHECK(r >= 2);
    CHECK(r <= 8);
    prev = r;
  }
}

TEST_CASE("partition_map: uniform scores collapse the label map, tiny pools force the full set") {
  Rng rng(301);
  PartitionParams params(8, 8, rng);
  Tape tape(false);
  // Zero map: scores are uniform everywhere, so every pixel ties and the
  // lowest active channel owns the whole grid while the rest stay empty.
  Tensor flat = Tensor::zeros({8, 6, 6});
  PartitionState st = partition_map(tape, flat, params, 8);
  build_masks(st);
  CHECK(st.regions >= 2);
  int full_masks = 0, empty_masks = 0;
  for (const Tensor& m : st.masks) {
    const double s = m.data().sum();
    if (s == 36.0) full_masks++;
    if (s == 0.0) empty_masks++;
  }
  CHECK(full_masks == 1);
  CHECK(st.masks[0].data().sum() == 36.0);
  CHECK(empty_masks == static_cast<int>(st.masks.size()) - 1);

  PartitionParams tiny(4, 2, rng);
  Tensor f2 = random_tensor({4, 5, 5}, rng, 0.0, 1.0);
  PartitionState st2 = partition_map(tape, f2, tiny, 2);
  CHECK(st2.active == std::vector<int>{0, 1});
}

TEST_CASE("partition_map active set matches a brute-force sort of channel sums") {
  Rng rng(302);
  PartitionParams params(16, 8, rng);
  Tape tape(false);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor f = random_tensor({16, 6, 6}, rng, 0.0, 1.0);
    PartitionState st = partition_map(tape, f, params, 8);

    std::vector<double> sums(8, 0.0);
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x)
        for (int r = 0; r < 8; ++r) sums[static_cast<std::size_t>(r)] += st.scores.at(y, x, r);
    std::vector<int> idx(8);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      if (sums[static_cast<std::size_t>(a)] != sums[static_cast<std::size_t>(b)])
        return sums[static_cast<std::size_t>(a)] > sums[static_cast<std::size_t>(b)];
      return a < b;
    });
    std::vector<int> expect(idx.begin(), idx.begin() + st.regions);
    std::sort(expect.begin(), expect.end());
    CHECK(st.active == expect);

    // per-pixel channel softmax sums to one
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) {
        double s = 0;
        for (int r = 0; r < 8; ++r) s += st.scores.at(y, x, r);
        CHECK(std::abs(s - 1.0) < 1e-9);
      }
  }
}

TEST_CASE("build_masks matches a per-pixel argmax oracle and partitions the grid") {
  Rng rng(303);
  PartitionParams params(16, 8, rng);
  Tape tape(false);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor f = random_tensor({16, 5, 7}, rng, 0.0, 1.0);
    PartitionState st = partition_map(tape, f, params, 8);
    build_masks(st);

    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 7; ++x) {
        int best = st.active[0];
        for (int r : st.active)
          if (st.scores.at(y, x, r) > st.scores.at(y, x, best)) best = r;
        CHECK(st.labels[static_cast<std::size_t>(y) * 7 + x] == best);

        double coverage = 0;
        for (const Tensor& m : st.masks) {
          const double v = m.at(static_cast<std::int64_t>(y) * 7 + x);
          CHECK((v == 0.0 || v == 1.0));
          coverage += v;
        }
        CHECK(coverage == 1.0);
      }
  }
}

TEST_CASE("build_masks hand cases: dominant channel and half-plane split") {
  PartitionState st;
  st.regions = 2;
  st.active = {1, 3};
  st.scores = Tensor::zeros({2, 4, 4});
  // channel 3 dominant everywhere
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 4; ++x) {
      st.scores.mut((static_cast<std::int64_t>(y) * 4 + x) * 4 + 3) = 0.9;
      st.scores.mut((static_cast<std::int64_t>(y) * 4 + x) * 4 + 1) = 0.1;
    }
  build_masks(st);
  CHECK(st.masks[1].data().sum() == 8.0);
  CHECK(st.masks[0].data().sum() == 0.0);

  // left/right split
  PartitionState split;
  split.regions = 2;
  split.active = {0, 1};
  split.scores = Tensor::zeros({2, 4, 2});
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 4; ++x) {
      const std::int64_t base = (static_cast<std::int64_t>(y) * 4 + x) * 2;
      split.scores.mut(base + (x < 2 ? 0 : 1)) = 1.0;
    }
  build_masks(split);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 4; ++x) {
      CHECK(split.masks[0].at(static_cast<std::int64_t>(y) * 4 + x) == (x < 2 ? 1.0 : 0.0));
      CHECK(split.masks[1].at(static_cast<std::int64_t>(y) * 4 + x) == (x < 2 ? 0.0 : 1.0));
    }
}

TEST_CASE("masked_dispatch with one full mask reproduces the plain expert bit-for-bit") {
  Rng rng(304);
  ExpertPool pool("local", 4, 8, 8, rng);
  Tensor f = random_tensor({8, 4, 4}, rng, 0.0, 1.0);

  PartitionState st;
  st.regions = 2;
  st.active = {1, 2};
  st.scores = Tensor::zeros({4, 4, 4});
  st.masks.push_back(Tensor::full({4, 4}, 1.0));
  st.masks.push_back(Tensor::zeros({4, 4}));
  st.labels.assign(16, 1);

  Tape tape;
  auto outs = masked_dispatch(tape, f, st, pool, true);
  Tensor fused = fuse(tape, outs, st.masks);

  Rng rng2(304);
  ExpertPool pool2("local", 4, 8, 8, rng2);
  Tape t2;
  Tensor plain = expert_forward(t2, pool2, 1, f, true);
  for (std::int64_t i = 0; i < plain.size(); ++i) CHECK(fused.at(i) == plain.at(i));

  // empty mask: zero output and zero grads on its expert
  CHECK(outs[1].data().abs().sum() == 0.0);
  tape.backward(mean(tape, fused));
  std::vector<ParamRef> params;
  pool.experts[2].collect("e2", params, nullptr);
  for (ParamRef& p : params) CHECK((!p.tensor.has_grad() || p.tensor.grad().abs().sum() == 0.0));
}

TEST_CASE("fuse composes piecewise outputs with per-pixel ownership") {
  Tape tape;
  Tensor left = Tensor::zeros({4, 4});
  Tensor right = Tensor::zeros({4, 4});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      (x < 2 ? left : right).mut(static_cast<std::int64_t>(y) * 4 + x) = 1.0;

  Tensor oa = Tensor::full({2, 4, 4}, 3.0);
  Tensor ob = Tensor::full({2, 4, 4}, -1.5);
  Tensor fused = fuse(tape, {oa, ob}, {left, right});
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        CHECK(fused.at(c, y, x) == (x < 2 ? 3.0 : -1.5));

  Rng rng(305);
  Tensor o1 = random_tensor({2, 4, 4}, rng), o2 = random_tensor({2, 4, 4}, rng);
  Tensor f2 = fuse(tape, {o1, o2}, {left, right});
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        CHECK(f2.at(c, y, x) == (x < 2 ? o1.at(c, y, x) : o2.at(c, y, x)));
}

TEST_CASE("coherence loss: constant zero, hand pair, checkerboard") {
  Tape tape;
  CHECK(coherence_loss(tape, Tensor::full({3, 3, 4}, 0.25)).value() == doctest::Approx(0.0));

  Tensor two = Tensor::zeros({2, 1, 2});
  two.mut(0) = 1.0;  // row 0: (1,0)
  two.mut(3) = 1.0;  // row 1: (0,1)
  CHECK(coherence_loss(tape, two).value() == doctest::Approx(2.0));

  Tensor board = Tensor::zeros({4, 4, 2});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      board.mut((static_cast<std::int64_t>(y) * 4 + x) * 2 + ((x + y) % 2)) = 1.0;
  CHECK(coherence_loss(tape, board).value() == doctest::Approx(48.0));
}

TEST_CASE("partition debug dump writes a PGM and a JSON summary") {
  Rng rng(306);
  PartitionParams params(8, 8, rng);
  Tape tape(false);
  Tensor f = random_tensor({8, 4, 4}, rng, 0.0, 1.0);
  PartitionState st = partition_map(tape, f, params, 8);
  build_masks(st);
  dump_partition_debug(st, "/tmp/hmr_partition_test");
  const std::string pgm = [&] {
    std::ifstream in("/tmp/hmr_partition_test.pgm");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }();
  CHECK(pgm.substr(0, 2) == "P2");
  std::ifstream js("/tmp/hmr_partition_test.json");
  CHECK(js.good());
}
