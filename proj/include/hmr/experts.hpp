#pragma once

#include "hmr/rng.hpp"
#include "hmr/tensor.hpp"

#include <string>
#include <vector>

namespace hmr {

/// Named handle onto a trainable tensor; the registry drives the optimizer
/// and the checkpoint layout, so names must be stable across save/load.
struct ParamRef {
  std::string name;
  Tensor tensor;
};

struct StatsRef {
  std::string name;
  BatchNormStats* stats;
};

/// Kaiming-uniform fan-in init for a [Cout,Cin,3,3] kernel.
Tensor kaiming_conv(int c_out, int c_in, Rng& rng);

/// conv3x3 (bias-free) -> batch_norm -> relu.
struct ConvBlock {
  Tensor kernel;
  Tensor gamma, beta;
  BatchNormStats stats;

  ConvBlock() = default;
  ConvBlock(int c_in, int c_out, Rng& rng);

  Tensor forward(Tape& tape, const Tensor& x, bool training);
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<StatsRef>* stats_out);
  std::int64_t param_count() const;
};

/// Shared feature extractor: three conv blocks with channel plan
/// 3 -> 16 -> 32 -> C and stride-2 average downsampling after the first two,
/// so a [3,H,W] image maps to [C,H/4,W/4].
struct Backbone {
  ConvBlock block1, block2, block3;
  int out_channels = 0;

  Backbone() = default;
  Backbone(int channels, Rng& rng);

  Tensor forward(Tape& tape, const Tensor& image, bool training);
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<StatsRef>* stats_out);
  std::int64_t param_count() const;
};

/// One expert sub-network: three conv blocks, C -> C -> C -> C'.
struct Expert {
  ConvBlock block1, block2, block3;

  Expert() = default;
  Expert(int c_in, int c_out, Rng& rng);

  Tensor forward(Tape& tape, const Tensor& x, bool training);
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<StatsRef>* stats_out);
  std::int64_t param_count() const;
};

struct ExpertPool {
  std::string role;  // "global" or "local"
  std::vector<Expert> experts;

  ExpertPool() = default;
  ExpertPool(std::string role, int count, int c_in, int c_out, Rng& rng);

  int count() const { return static_cast<int>(experts.size()); }
  void collect(std::vector<ParamRef>& params, std::vector<StatsRef>* stats_out);
  std::int64_t param_count() const;
};

Tensor backbone_forward(Tape& tape, Backbone& backbone, const Tensor& image, bool training);

/// Runs one expert; only that expert's parameters enter the tape.
Tensor expert_forward(Tape& tape, ExpertPool& pool, int index, const Tensor& features,
                      bool training);

}  // namespace hmr
