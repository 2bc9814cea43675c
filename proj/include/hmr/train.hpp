#pragma once

#include "hmr/model.hpp"
#include "hmr/scenes.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace hmr {

struct TrainConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 30;
  int batch_size = 8;
  double lambda_route = 1.0;
  double lambda_distill = 1.0;
  double lambda_align = 1.0;
  double lambda_coh = 1.0;
  // stage boundaries and lr decay points, as fractions of the schedule
  double stage1_end = 0.2;
  double stage2_end = 0.6;
  double decay1 = 0.6;
  double decay2 = 0.8;
  std::uint64_t seed = 1;
  bool horizontal_flip = true;
  int exclude_domain = -1;  // leave-one-domain-out training

  void validate() const;
  Stage stage_for_epoch(int epoch) const;
  double lr_for_epoch(int epoch) const;
};

/// SGD with momentum and decoupled-by-participation weight decay:
/// v = mu*v + (g + wd*w); w -= lr*v. Only parameters that accumulated a
/// gradient this step move; everything else stays bit-identical.
struct Sgd {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::map<std::string, Array> velocity;

  void step(std::vector<ParamRef>& params, double lr);
};

/// Training prompt pool: the seen class names plus a fixed set of
/// compositional phrases, sized so every feasible R fits.
std::vector<std::string> training_prompt_pool(const std::vector<int>& seen_classes);

struct BatchLoss {
  Tensor total;
  std::optional<Tensor> detection, route, distill, align, coherence;
  std::vector<ImageOutputs> outputs;
};

/// Weighted stage-masked sum; disabled terms contribute exactly zero with no
/// gradient. Throws naming the offending term on any NaN.
Tensor total_loss(Tape& tape, const BatchLoss& terms, const TrainConfig& cfg);

/// Forward + loss assembly for one batch at one stage. Routing probabilities
/// land in model.tracker's pending set (previous pendings are discarded);
/// the caller commits after the optimizer step. `frozen_teachers`, when
/// given, pins the distillation teacher per image (finite-difference runs).
BatchLoss build_batch_loss(Model& model, Tape& tape, const std::vector<SceneSample>& batch,
                           Stage stage, const TrainConfig& cfg,
                           const std::vector<std::string>& prompt_pool,
                           const std::vector<Tensor>* frozen_teachers = nullptr);

struct TrainResult {
  double initial_loss = 0;
  std::vector<double> epoch_mean_loss;
  long steps = 0;
};

/// Algorithm-1 staged training over the train manifest. The model is updated
/// in place; optimizer state persists in `opt` so a resumed run continues
/// exactly (epochs [start_epoch, stop_epoch) of the cfg.epochs schedule;
/// stop_epoch -1 means the full schedule). Aborts on divergence (loss above
/// 1e6) or NaN.
TrainResult staged_train(Model& model, Sgd& opt, const TrainConfig& cfg, const Splits& splits,
                         const std::vector<DomainSpec>& domains, int start_epoch = 0,
                         int stop_epoch = -1, const std::string& checkpoint_dir = "");

// ---- checkpointing ---------------------------------------------------------

struct CheckpointMeta {
  int schema = 1;
  long step = 0;
  int epoch = 0;
  int exclude_domain = -1;
  ModelConfig model_config;
  TrainConfig train_config;
};

void save_checkpoint(const std::string& dir, Model& model, const Sgd& opt,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  Model model;
  Sgd opt;
  CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::string& dir);

}  // namespace hmr
