#include "hmr/partition.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace hmr {

ComplexityEstimate feature_entropy(const Tensor& features) {
  if (features.rank() != 3)
    throw std::invalid_argument("feature_entropy expects [C,h,w], got " + shape_str(features.shape()));
  if ((features.data() < 0.0).any())
    throw std::invalid_argument("feature_entropy: negative activations (expected post-ReLU input)");
  const int c = features.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(features.dim(1)) * features.dim(2);

  ComplexityEstimate est;
  est.channel_distribution = Array(c);
  double total = 0;
  for (int ci = 0; ci < c; ++ci) {
    est.channel_distribution[ci] = features.data().segment(ci * hw, hw).sum();
    total += est.channel_distribution[ci];
  }
  if (total < 1e-12) {
    est.channel_distribution.setConstant(1.0 / c);
    est.entropy = std::log(static_cast<double>(c));
    return est;
  }
  est.channel_distribution /= total;
  double h = 0;
  for (int ci = 0; ci < c; ++ci) {
    const double p = est.channel_distribution[ci];
    if (p > 0) h -= p * std::log(p);
  }
  est.entropy = std::max(0.0, h);
  return est;
}

namespace {

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Nearest integer, half to even.
int round_half_even(double x) {
  const double f = std::floor(x);
  const double frac = x - f;
  if (frac > 0.5) return static_cast<int>(f) + 1;
  if (frac < 0.5) return static_cast<int>(f);
  const int lo = static_cast<int>(f);
  return lo % 2 == 0 ? lo : lo + 1;
}

}  // namespace

int region_count(double entropy, double theta_r, int num_local) {
  if (num_local < 2)
    throw std::invalid_argument("region_count: need at least 2 local experts, got " +
                                std::to_string(num_local));
  if (entropy < 0) throw std::invalid_argument("region_count: entropy must be non-negative");
  const double soft = 2.0 + sigmoid_value(theta_r * entropy) * (num_local - 2);
  return std::clamp(round_half_even(soft), 2, num_local);
}

PartitionParams::PartitionParams(int channels, int num_local, Rng& rng)
    : omega(kaiming_conv(num_local, channels, rng)), theta_r(Tensor::full({1}, 1.0, true)) {}

void PartitionParams::collect(std::vector<ParamRef>& params) {
  params.push_back({"partition.omega", omega});
  params.push_back({"partition.theta_r", theta_r});
}

PartitionState partition_map(Tape& tape, const Tensor& features, const PartitionParams& params,
                             int num_local) {
  PartitionState state;
  ComplexityEstimate est = feature_entropy(features);
  state.entropy = est.entropy;
  state.regions = region_count(est.entropy, params.theta_r.value(), num_local);

  // Straight-through hook on the pre-rounding value; nothing downstream
  // consumes R continuously, so theta_r keeps a zero gradient in practice.
  Tensor gated = sigmoid(tape, scale(tape, params.theta_r, est.entropy));
  state.soft_regions = add(tape, scale(tape, gated, static_cast<double>(num_local - 2)),
                           Tensor::scalar(2.0));

  Tensor raw = conv2d(tape, features, params.omega);
  state.scores = softmax_t(tape, chw_to_hwc(tape, raw), 1.0);

  const int h = state.scores.dim(0), w = state.scores.dim(1);
  std::vector<double> channel_sum(static_cast<std::size_t>(num_local), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int r = 0; r < num_local; ++r) channel_sum[static_cast<std::size_t>(r)] += state.scores.at(y, x, r);

  std::vector<int> order(static_cast<std::size_t>(num_local));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (channel_sum[static_cast<std::size_t>(a)] != channel_sum[static_cast<std::size_t>(b)])
      return channel_sum[static_cast<std::size_t>(a)] > channel_sum[static_cast<std::size_t>(b)];
    return a < b;
  });
  state.active.assign(order.begin(), order.begin() + state.regions);
  std::sort(state.active.begin(), state.active.end());
  return state;
}

void build_masks(PartitionState& state) {
  const int h = state.scores.dim(0), w = state.scores.dim(1);
  state.labels.assign(static_cast<std::size_t>(h) * w, state.active.front());
  state.masks.clear();
  for (std::size_t i = 0; i < state.active.size(); ++i) state.masks.push_back(Tensor::zeros({h, w}));

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best_slot = 0;
      double best = state.scores.at(y, x, state.active[0]);
      for (std::size_t s = 1; s < state.active.size(); ++s) {
        const double v = state.scores.at(y, x, state.active[s]);
        if (v > best) {
          best = v;
          best_slot = static_cast<int>(s);
        }
      }
      state.labels[static_cast<std::size_t>(y) * w + x] = state.active[static_cast<std::size_t>(best_slot)];
      state.masks[static_cast<std::size_t>(best_slot)].mut(static_cast<std::int64_t>(y) * w + x) = 1.0;
    }
}

std::vector<Tensor> masked_dispatch(Tape& tape, const Tensor& features, const PartitionState& state,
                                    ExpertPool& pool, bool training) {
  std::vector<Tensor> outputs;
  outputs.reserve(state.active.size());
  for (std::size_t s = 0; s < state.active.size(); ++s) {
    const int expert = state.active[s];
    if (expert >= pool.count())
      throw std::runtime_error("masked_dispatch: active RU " + std::to_string(expert) +
                               " has no local expert");
    if (state.masks[s].data().sum() == 0.0) {
      outputs.push_back(Tensor::zeros(features.shape()));
      continue;
    }
    Tensor masked = mask_mul(tape, features, state.masks[s]);
    outputs.push_back(expert_forward(tape, pool, expert, masked, training));
  }
  return outputs;
}

Tensor fuse(Tape& tape, const std::vector<Tensor>& outputs, const std::vector<Tensor>& masks) {
  if (outputs.size() != masks.size() || outputs.empty())
    throw std::invalid_argument("fuse: outputs and masks must align");
  Tensor acc;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    if (masks[i].data().sum() == 0.0 && acc.defined()) continue;
    Tensor piece = mask_mul(tape, outputs[i], masks[i]);
    acc = acc.defined() ? add(tape, acc, piece) : piece;
  }
  return acc;
}

Tensor coherence_loss(Tape& tape, const Tensor& scores) { return coherence_penalty(tape, scores); }

void dump_partition_debug(const PartitionState& state, const std::string& prefix) {
  const int h = state.scores.dim(0), w = state.scores.dim(1);
  const int num_channels = state.scores.dim(2);
  std::ofstream pgm(prefix + ".pgm", std::ios::binary);
  pgm << "P2\n" << w << " " << h << "\n255\n";
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int label = state.labels[static_cast<std::size_t>(y) * w + x];
      pgm << (label * 255 / std::max(1, num_channels - 1)) << (x + 1 < w ? " " : "");
    }
    pgm << "\n";
  }
  nlohmann::json j;
  j["entropy"] = state.entropy;
  j["R"] = state.regions;
  j["active"] = state.active;
  std::ofstream js(prefix + ".json");
  js << j.dump(2) << "\n";
}

}  // namespace hmr
