#pragma once

#include "hmr/experts.hpp"
#include "hmr/tensor.hpp"

#include <vector>

namespace hmr {

/// One trainable embedding per known dataset id; lookups of unknown ids fail.
struct DatasetEmbeddingTable {
  std::vector<Tensor> embeddings;

  int count() const { return static_cast<int>(embeddings.size()); }
  int dim() const { return embeddings.empty() ? 0 : static_cast<int>(embeddings[0].size()); }
  const Tensor& lookup(int dataset_id) const;
  void collect(std::vector<ParamRef>& params);
};

/// Routing MLP with residual skip: g = softmax((x W_skip + relu(x W1 + b1) W2 + b2) / tau)
/// over layer-normed concat(u, z).
struct RouterParams {
  Tensor w_skip;  // [C+d, E_G]
  Tensor w1, b1;  // [C+d, hidden], [hidden]
  Tensor w2, b2;  // [hidden, E_G]
  double temperature = 1.0;

  RouterParams() = default;
  RouterParams(int input_dim, int hidden, int num_experts, Rng& rng, double tau = 1.0);
  void collect(std::vector<ParamRef>& params);
};

struct GlobalAssignment {
  Tensor probabilities;  // [E_G], on the tape
  int expert = 0;        // argmax, lowest-index tie-break
};

/// EMA of per-image routing distributions (decay 0.99). The pending batch
/// holds tape tensors so the balance loss can differentiate through the
/// current batch's probabilities.
class UsageTracker {
 public:
  UsageTracker() = default;
  explicit UsageTracker(int num_experts) : ema_(Array::Zero(num_experts)) {}

  void observe(const Tensor& probabilities);
  /// Folds the pending batch mean into the EMA and clears it.
  void commit();
  void discard_pending() { pending_.clear(); }

  bool warm() const { return steps_ > 0 || !pending_.empty(); }
  long steps() const { return steps_; }
  const Array& ema() const { return ema_; }
  const std::vector<Tensor>& pending() const { return pending_; }
  void restore(Array ema, long steps);

 private:
  Array ema_;
  long steps_ = 0;
  std::vector<Tensor> pending_;
};

/// Builds the dataset embedding table from per-dataset sample lists:
/// a fixed-seed linear projection (C -> d) of the mean pooled backbone
/// descriptor over each dataset's samples. Embeddings come back trainable.
DatasetEmbeddingTable init_dataset_embeddings(Backbone& backbone,
                                              const std::vector<std::vector<Tensor>>& samples_per_dataset,
                                              int embed_dim, std::uint64_t seed);

GlobalAssignment route_global(Tape& tape, const Tensor& descriptor, const Tensor& dataset_embedding,
                              const RouterParams& params);

/// Shared distillation head reducing an expert map to a logit vector.
struct DistillHead {
  Tensor w;  // [C', K_distill]
  Tensor b;  // [K_distill]

  DistillHead() = default;
  DistillHead(int c_in, int k_out, Rng& rng);
  void collect(std::vector<ParamRef>& params);
};

/// Cross-expert distillation: teacher = softened ensemble mean over all
/// expert maps (detached), student = the routed expert. When `gate` is given
/// the student logits are scaled by it so gradient reaches the router; the
/// plain form leaves them unscaled and is exactly zero when experts agree.
/// `teacher_override` substitutes a frozen teacher distribution (used by the
/// finite-difference harness, where the detached branch must hold still).
Tensor cekd_losses(Tape& tape, const std::vector<Tensor>& expert_maps, int selected,
                   double temperature, const DistillHead& head, const Tensor* gate = nullptr,
                   const Tensor* teacher_override = nullptr);

/// The teacher distribution cekd_losses would build: softened mean of the
/// per-expert distillation logits, detached.
Tensor cekd_teacher(const std::vector<Tensor>& expert_maps, double temperature,
                    const DistillHead& head);

/// Sum_e (p_e - 1/E)^2 on the blended usage estimate: EMA plus the pending
/// batch mean (equal weight) when a batch is pending, the EMA alone otherwise.
Tensor routing_regularization(Tape& tape, const UsageTracker& tracker);

}  // namespace hmr
