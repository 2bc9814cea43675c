#include "hmr/experts.hpp"

#include <cmath>
#include <stdexcept>

namespace hmr {

Tensor kaiming_conv(int c_out, int c_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / (static_cast<double>(c_in) * 9.0));
  Tensor k({c_out, c_in, 3, 3}, true);
  for (std::int64_t i = 0; i < k.size(); ++i) k.mut(i) = rng.uniform(-bound, bound);
  return k;
}

ConvBlock::ConvBlock(int c_in, int c_out, Rng& rng)
    : kernel(kaiming_conv(c_out, c_in, rng)),
      gamma(Tensor::full({c_out}, 1.0, true)),
      beta(Tensor::zeros({c_out}, true)) {}

Tensor ConvBlock::forward(Tape& tape, const Tensor& x, bool training) {
  Tensor pre = conv2d(tape, x, kernel);
  if (!training && stats.updates == 0) {
    // Never-trained block asked to run in eval mode (a cold expert at
    // evaluation time): fall back to batch statistics without recording.
    return relu(tape, batch_norm(tape, pre, gamma, beta, stats, true, false));
  }
  return relu(tape, batch_norm(tape, pre, gamma, beta, stats, training));
}

void ConvBlock::collect(const std::string& prefix, std::vector<ParamRef>& params,
                        std::vector<StatsRef>* stats_out) {
  params.push_back({prefix + ".kernel", kernel});
  params.push_back({prefix + ".gamma", gamma});
  params.push_back({prefix + ".beta", beta});
  if (stats_out) stats_out->push_back({prefix + ".stats", &stats});
}

std::int64_t ConvBlock::param_count() const {
  return kernel.size() + gamma.size() + beta.size();
}

Backbone::Backbone(int channels, Rng& rng)
    : block1(3, 16, rng), block2(16, 32, rng), block3(32, channels, rng), out_channels(channels) {}

Tensor Backbone::forward(Tape& tape, const Tensor& image, bool training) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("backbone expects a [3,H,W] image, got " + shape_str(image.shape()));
  if (image.dim(1) % 4 != 0 || image.dim(2) % 4 != 0)
    throw std::invalid_argument("backbone spatial extents must be multiples of 4, got " +
                                shape_str(image.shape()));
  Tensor h = avg_pool2(tape, block1.forward(tape, image, training));
  h = avg_pool2(tape, block2.forward(tape, h, training));
  return block3.forward(tape, h, training);
}

void Backbone::collect(const std::string& prefix, std::vector<ParamRef>& params,
                       std::vector<StatsRef>* stats_out) {
  block1.collect(prefix + ".block1", params, stats_out);
  block2.collect(prefix + ".block2", params, stats_out);
  block3.collect(prefix + ".block3", params, stats_out);
}

std::int64_t Backbone::param_count() const {
  return block1.param_count() + block2.param_count() + block3.param_count();
}

Expert::Expert(int c_in, int c_out, Rng& rng)
    : block1(c_in, c_in, rng), block2(c_in, c_in, rng), block3(c_in, c_out, rng) {}

Tensor Expert::forward(Tape& tape, const Tensor& x, bool training) {
  return block3.forward(tape, block2.forward(tape, block1.forward(tape, x, training), training),
                        training);
}

void Expert::collect(const std::string& prefix, std::vector<ParamRef>& params,
                     std::vector<StatsRef>* stats_out) {
  block1.collect(prefix + ".block1", params, stats_out);
  block2.collect(prefix + ".block2", params, stats_out);
  block3.collect(prefix + ".block3", params, stats_out);
}

std::int64_t Expert::param_count() const {
  return block1.param_count() + block2.param_count() + block3.param_count();
}

ExpertPool::ExpertPool(std::string role_in, int count, int c_in, int c_out, Rng& rng)
    : role(std::move(role_in)) {
  experts.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) experts.emplace_back(c_in, c_out, rng);
}

void ExpertPool::collect(std::vector<ParamRef>& params, std::vector<StatsRef>* stats_out) {
  for (std::size_t i = 0; i < experts.size(); ++i)
    experts[i].collect(role + "." + std::to_string(i), params, stats_out);
}

std::int64_t ExpertPool::param_count() const {
  std::int64_t n = 0;
  for (const Expert& e : experts) n += e.param_count();
  return n;
}

Tensor backbone_forward(Tape& tape, Backbone& backbone, const Tensor& image, bool training) {
  return backbone.forward(tape, image, training);
}

Tensor expert_forward(Tape& tape, ExpertPool& pool, int index, const Tensor& features,
                      bool training) {
  if (index < 0 || index >= pool.count())
    throw std::invalid_argument("expert index " + std::to_string(index) + " out of range for pool '" +
                                pool.role + "' of " + std::to_string(pool.count()));
  return pool.experts[static_cast<std::size_t>(index)].forward(tape, features, training);
}

}  // namespace hmr
