#include "hmr/router.hpp"

#include <cmath>
#include <stdexcept>

namespace hmr {

const Tensor& DatasetEmbeddingTable::lookup(int dataset_id) const {
  if (dataset_id < 0 || dataset_id >= count())
    throw std::invalid_argument("unknown dataset id " + std::to_string(dataset_id) + " (table has " +
                                std::to_string(count()) + ")");
  return embeddings[static_cast<std::size_t>(dataset_id)];
}

void DatasetEmbeddingTable::collect(std::vector<ParamRef>& params) {
  for (std::size_t i = 0; i < embeddings.size(); ++i)
    params.push_back({"dataset_embed." + std::to_string(i), embeddings[i]});
}

namespace {

Tensor dense_init(Shape shape, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(shape[0]));
  Tensor w(shape, true);
  for (std::int64_t i = 0; i < w.size(); ++i) w.mut(i) = rng.uniform(-bound, bound);
  return w;
}

}  // namespace

RouterParams::RouterParams(int input_dim, int hidden, int num_experts, Rng& rng, double tau)
    : w_skip(dense_init({input_dim, num_experts}, rng)),
      w1(dense_init({input_dim, hidden}, rng)),
      b1(Tensor::zeros({hidden}, true)),
      w2(dense_init({hidden, num_experts}, rng)),
      b2(Tensor::zeros({num_experts}, true)),
      temperature(tau) {}

void RouterParams::collect(std::vector<ParamRef>& params) {
  params.push_back({"router.w_skip", w_skip});
  params.push_back({"router.w1", w1});
  params.push_back({"router.b1", b1});
  params.push_back({"router.w2", w2});
  params.push_back({"router.b2", b2});
}

void UsageTracker::observe(const Tensor& probabilities) {
  if (ema_.size() == 0) ema_ = Array::Zero(probabilities.size());
  if (probabilities.size() != ema_.size())
    throw std::invalid_argument("usage tracker extent mismatch");
  pending_.push_back(probabilities);
}

void UsageTracker::commit() {
  if (pending_.empty()) return;
  Array batch = Array::Zero(ema_.size());
  for (const Tensor& g : pending_) batch += g.data();
  batch /= static_cast<double>(pending_.size());
  if (steps_ == 0)
    ema_ = batch;
  else
    ema_ = 0.99 * ema_ + 0.01 * batch;
  steps_++;
  pending_.clear();
}

void UsageTracker::restore(Array ema, long steps) {
  ema_ = std::move(ema);
  steps_ = steps;
  pending_.clear();
}

DatasetEmbeddingTable init_dataset_embeddings(Backbone& backbone,
                                              const std::vector<std::vector<Tensor>>& samples_per_dataset,
                                              int embed_dim, std::uint64_t seed) {
  const int c = backbone.out_channels;
  Rng rng(seed, "dataset-embed-projection");
  Tensor projection({c, embed_dim});
  for (std::int64_t i = 0; i < projection.size(); ++i)
    projection.mut(i) = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(c)));
  // Zero-sum columns: pooled post-BN descriptors share a large constant
  // offset across inputs, and centring the projection keeps the embeddings
  // about the content deviations instead of that offset.
  for (int j = 0; j < embed_dim; ++j) {
    double col_mean = 0;
    for (int i = 0; i < c; ++i) col_mean += projection.at(i, j);
    col_mean /= c;
    for (int i = 0; i < c; ++i)
      projection.mut(static_cast<std::int64_t>(i) * embed_dim + j) -= col_mean;
  }

  DatasetEmbeddingTable table;
  for (const auto& samples : samples_per_dataset) {
    if (samples.empty())
      throw std::invalid_argument("init_dataset_embeddings: every dataset needs at least one sample");
    Tape off(false);
    Array mean_desc = Array::Zero(c);
    for (const Tensor& image : samples)
      mean_desc += spatial_mean(off, backbone.forward(off, image, true)).data();
    mean_desc /= static_cast<double>(samples.size());
    Tensor z = linear(off, Tensor({c}, std::move(mean_desc)), projection, nullptr);
    table.embeddings.push_back(Tensor(z.shape(), z.data(), true));
  }
  return table;
}

GlobalAssignment route_global(Tape& tape, const Tensor& descriptor, const Tensor& dataset_embedding,
                              const RouterParams& params) {
  if (!(params.temperature > 0))
    throw std::invalid_argument("route_global: temperature must be positive");
  Tensor x = layer_norm(tape, concat(tape, descriptor, dataset_embedding, 0));
  Tensor hidden = relu(tape, linear(tape, x, params.w1, &params.b1));
  Tensor logits = add(tape, linear(tape, x, params.w_skip, nullptr),
                      linear(tape, hidden, params.w2, &params.b2));
  GlobalAssignment out;
  out.probabilities = softmax_t(tape, logits, params.temperature);
  out.expert = 0;
  for (int e = 1; e < out.probabilities.size(); ++e)
    if (out.probabilities.at(e) > out.probabilities.at(out.expert)) out.expert = e;
  return out;
}

DistillHead::DistillHead(int c_in, int k_out, Rng& rng)
    : w(dense_init({c_in, k_out}, rng)), b(Tensor::zeros({k_out}, true)) {}

void DistillHead::collect(std::vector<ParamRef>& params) {
  params.push_back({"distill.w", w});
  params.push_back({"distill.b", b});
}

Tensor cekd_teacher(const std::vector<Tensor>& expert_maps, double temperature,
                    const DistillHead& head) {
  Tape off(false);
  Array teacher_logits;
  for (const Tensor& map : expert_maps) {
    Tensor logits = linear(off, spatial_mean(off, map.detached()), head.w, &head.b);
    if (teacher_logits.size() == 0)
      teacher_logits = logits.data();
    else
      teacher_logits += logits.data();
  }
  teacher_logits /= static_cast<double>(expert_maps.size());
  return softmax_t(off, Tensor({static_cast<int>(teacher_logits.size())}, teacher_logits),
                   temperature);
}

Tensor cekd_losses(Tape& tape, const std::vector<Tensor>& expert_maps, int selected,
                   double temperature, const DistillHead& head, const Tensor* gate,
                   const Tensor* teacher_override) {
  if (!(temperature > 1))
    throw std::invalid_argument("cekd_losses: temperature must exceed 1, got " +
                                std::to_string(temperature));
  if (selected < 0 || selected >= static_cast<int>(expert_maps.size()))
    throw std::invalid_argument("cekd_losses: selected expert out of range");

  Tensor teacher = teacher_override ? *teacher_override
                                    : cekd_teacher(expert_maps, temperature, head);

  Tensor student_logits =
      linear(tape, spatial_mean(tape, expert_maps[static_cast<std::size_t>(selected)]), head.w, &head.b);
  if (gate) student_logits = scale_by(tape, student_logits, *gate);
  Tensor student = softmax_t(tape, student_logits, temperature);
  return kl_divergence(tape, teacher, student);
}

Tensor routing_regularization(Tape& tape, const UsageTracker& tracker) {
  if (!tracker.warm())
    throw std::logic_error("routing_regularization: usage tracker has never been updated");
  const int n = static_cast<int>(tracker.ema().size());
  Tensor estimate;
  if (!tracker.pending().empty()) {
    Tensor batch = tracker.pending()[0];
    for (std::size_t i = 1; i < tracker.pending().size(); ++i)
      batch = add(tape, batch, tracker.pending()[i]);
    batch = scale(tape, batch, 1.0 / static_cast<double>(tracker.pending().size()));
    if (tracker.steps() > 0) {
      Tensor history({n}, tracker.ema());
      estimate = add(tape, scale(tape, history, 0.5), scale(tape, batch, 0.5));
    } else {
      estimate = batch;
    }
  } else {
    estimate = Tensor({n}, tracker.ema());
  }
  Tensor deviation = sub(tape, estimate, Tensor::full({n}, 1.0 / n));
  return sum(tape, mul(tape, deviation, deviation));
}

}  // namespace hmr
