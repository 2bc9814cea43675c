#pragma once

#include "hmr/experts.hpp"
#include "hmr/tensor.hpp"

#include <string>
#include <vector>

namespace hmr {

struct ComplexityEstimate {
  double entropy = 0;          // nats, in [0, ln C']
  Array channel_distribution;  // simplex over channels
};

/// Activation-share entropy of a non-negative [C',h,w] map. An all-zero map
/// (total activation < 1e-12) is defined as uniform, entropy ln C'.
ComplexityEstimate feature_entropy(const Tensor& features);

/// R = round_half_to_even(2 + sigmoid(theta_r * entropy) * (E_L - 2)),
/// clamped to [2, E_L].
int region_count(double entropy, double theta_r, int num_local);

struct PartitionParams {
  Tensor omega;    // [E_L, C', 3, 3] scoring conv
  Tensor theta_r;  // [1], init 1.0

  PartitionParams() = default;
  PartitionParams(int channels, int num_local, Rng& rng);
  void collect(std::vector<ParamRef>& params);
};

struct PartitionState {
  int regions = 0;             // R
  double entropy = 0;
  Tensor scores;               // [h,w,E_L] channel-softmaxed, on the tape
  Tensor soft_regions;         // pre-rounding region estimate, straight-through hook
  std::vector<int> active;     // R channel indices, ascending
  std::vector<int> labels;     // h*w owning channel ids (filled by build_masks)
  std::vector<Tensor> masks;   // [h,w] binary, aligned with `active`
};

/// Scores the map with the partition conv, channel-softmaxes per pixel, and
/// selects the top-R channels by summed score (ties to the lowest index).
PartitionState partition_map(Tape& tape, const Tensor& features, const PartitionParams& params,
                             int num_local);

/// Per-pixel argmax over active channels (lowest index wins ties) and the
/// resulting one-hot masks. Masks over the active set partition the grid;
/// empty masks are permitted.
void build_masks(PartitionState& state);

/// Masks the feature map per active RU and runs the owning local expert
/// (expert r owns channel r). Empty RUs come back as zero maps without
/// touching their expert.
std::vector<Tensor> masked_dispatch(Tape& tape, const Tensor& features, const PartitionState& state,
                                    ExpertPool& pool, bool training);

/// o = sum_r M_r * o_r. Each pixel is owned by exactly one expert's output.
Tensor fuse(Tape& tape, const std::vector<Tensor>& outputs, const std::vector<Tensor>& masks);

/// Neighbour-pair penalty over the score tensor (right/down, each pair once).
Tensor coherence_loss(Tape& tape, const Tensor& scores);

/// Writes <prefix>.pgm (label map) and <prefix>.json {entropy, R, active}.
void dump_partition_debug(const PartitionState& state, const std::string& prefix);

}  // namespace hmr
