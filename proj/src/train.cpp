#include "hmr/train.hpp"

#include "hmr/io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace hmr {

void TrainConfig::validate() const {
  if (!(stage1_end > 0 && stage1_end < stage2_end && stage2_end < 1.0))
    throw std::invalid_argument("stage fractions must be increasing and cover [0,1]");
  if (lambda_route < 0 || lambda_distill < 0 || lambda_align < 0 || lambda_coh < 0)
    throw std::invalid_argument("loss weights must be non-negative");
  if (epochs < 1 || batch_size < 1) throw std::invalid_argument("epochs and batch size must be positive");
}

Stage TrainConfig::stage_for_epoch(int epoch) const {
  const int s1 = static_cast<int>(std::lround(stage1_end * epochs));
  const int s2 = static_cast<int>(std::lround(stage2_end * epochs));
  if (epoch < s1) return Stage::Warmup;
  if (epoch < s2) return Stage::GlobalRouting;
  return Stage::FullPipeline;
}

double TrainConfig::lr_for_epoch(int epoch) const {
  const int d1 = static_cast<int>(std::lround(decay1 * epochs));
  const int d2 = static_cast<int>(std::lround(decay2 * epochs));
  if (epoch >= d2) return learning_rate * 0.01;
  if (epoch >= d1) return learning_rate * 0.1;
  return learning_rate;
}

void Sgd::step(std::vector<ParamRef>& params, double lr) {
  for (ParamRef& p : params) {
    if (!p.tensor.has_grad()) continue;
    Array& v = velocity[p.name];
    if (v.size() != p.tensor.size()) v = Array::Zero(p.tensor.size());
    v = momentum * v + (p.tensor.grad() + weight_decay * p.tensor.data());
    p.tensor.data() -= lr * v;
  }
}

std::vector<std::string> training_prompt_pool(const std::vector<int>& seen_classes) {
  std::vector<std::string> pool;
  for (int c : seen_classes) pool.push_back(class_name(c));
  // Fixed compositional phrases pad the pool past the largest feasible R.
  const char* phrases[] = {"scattered small objects", "dense cluster near boundary",
                           "isolated shape on plain ground", "textured background region",
                           "striped terrain patch",        "bright structure group",
                           "dark uniform area",            "mixed shapes near edge"};
  pool.insert(pool.end(), std::begin(phrases), std::end(phrases));
  return pool;
}

Tensor total_loss(Tape& tape, const BatchLoss& terms, const TrainConfig& cfg) {
  auto check = [](const std::optional<Tensor>& t, const char* name) {
    if (t && std::isnan(t->value()))
      throw std::runtime_error(std::string("total_loss: term '") + name + "' is NaN");
  };
  check(terms.detection, "detection");
  check(terms.route, "route");
  check(terms.distill, "distill");
  check(terms.align, "align");
  check(terms.coherence, "coherence");
  if (!terms.detection) throw std::invalid_argument("total_loss: detection term is mandatory");

  Tensor total = *terms.detection;
  if (terms.route && cfg.lambda_route > 0)
    total = add(tape, total, scale(tape, *terms.route, cfg.lambda_route));
  if (terms.distill && cfg.lambda_distill > 0)
    total = add(tape, total, scale(tape, *terms.distill, cfg.lambda_distill));
  if (terms.align && cfg.lambda_align > 0)
    total = add(tape, total, scale(tape, *terms.align, cfg.lambda_align));
  if (terms.coherence && cfg.lambda_coh > 0)
    total = add(tape, total, scale(tape, *terms.coherence, cfg.lambda_coh));
  return total;
}

BatchLoss build_batch_loss(Model& model, Tape& tape, const std::vector<SceneSample>& batch,
                           Stage stage, const TrainConfig& cfg,
                           const std::vector<std::string>& prompt_pool,
                           const std::vector<Tensor>* frozen_teachers) {
  if (batch.empty()) throw std::invalid_argument("build_batch_loss: empty batch");
  const bool has_global = model.cfg.mode != RoutingMode::LocalOnly;
  const bool global_active = has_global && stage != Stage::Warmup;
  const bool local_active = model.cfg.mode != RoutingMode::GlobalOnly && stage == Stage::FullPipeline;
  const bool cem_active = local_active;  // alignment needs RU embeddings

  model.tracker.discard_pending();
  const HeadGeometry geo = model.geometry();
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  // Text side of the alignment loss is shared across the batch.
  std::vector<Tensor> projected_text;
  if (cem_active) {
    for (const std::string& text : prompt_pool)
      projected_text.push_back(
          project(tape, embed_prompt(text, model.cfg.prompt_dim).vector, model.proj_text).vector);
  }

  BatchLoss out;
  Tensor det_sum, distill_sum, align_sum, coh_sum;
  auto accumulate = [&](Tensor& slot, const Tensor& v) {
    slot = slot.defined() ? add(tape, slot, v) : v;
  };

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const SceneSample& scene = batch[i];
    ImageOutputs img = forward_image(model, tape, scene.image, scene.domain, stage, true);
    accumulate(det_sum, detection_loss(tape, img.head_out, scene.boxes, geo, model.cfg.num_classes));

    if (global_active) {
      model.tracker.observe(img.assignment.probabilities);
      std::vector<Tensor> maps(static_cast<std::size_t>(model.cfg.num_global));
      Tape off(false);
      for (int e = 0; e < model.cfg.num_global; ++e) {
        maps[static_cast<std::size_t>(e)] =
            e == img.assignment.expert
                ? img.expert_map
                : expert_forward(off, model.global_pool, e, img.features.detached(), true);
      }
      Tensor gate = pick(tape, img.assignment.probabilities, img.assignment.expert);
      const Tensor* teacher = frozen_teachers ? &(*frozen_teachers)[i] : nullptr;
      accumulate(distill_sum, cekd_losses(tape, maps, img.assignment.expert, model.cfg.distill_temp,
                                          model.distill, &gate, teacher));
    }

    if (local_active && img.partitioned) {
      accumulate(coh_sum, coherence_loss(tape, img.part.scores));

      std::vector<Tensor> visual;
      for (std::size_t s = 0; s < img.part.active.size(); ++s) {
        if (img.part.masks[s].data().sum() == 0.0) continue;
        Projected p =
            project(tape, masked_mean(tape, img.expert_map, img.part.masks[s]), model.proj_visual);
        if (!p.degenerate) visual.push_back(p.vector);
      }
      if (!visual.empty() && visual.size() <= projected_text.size()) {
        Tensor scores = similarity(tape, visual, projected_text);
        Assignment matched = hungarian(scores);
        accumulate(align_sum, alignment_loss(tape, scores, matched));
      }
    }
    out.outputs.push_back(std::move(img));
  }

  out.detection = scale(tape, det_sum, inv_n);
  if (global_active) {
    out.route = routing_regularization(tape, model.tracker);
    if (distill_sum.defined()) out.distill = scale(tape, distill_sum, inv_n);
  }
  if (local_active) {
    if (align_sum.defined()) out.align = scale(tape, align_sum, inv_n);
    if (coh_sum.defined()) out.coherence = scale(tape, coh_sum, inv_n);
  }
  out.total = total_loss(tape, out, cfg);
  return out;
}

namespace {

SceneSample flipped(const SceneSample& scene) {
  SceneSample out = scene;
  out.image = Tensor(scene.image.shape(), scene.image.data());
  const int n = kSceneSize;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        out.image.mut((static_cast<std::int64_t>(c) * n + y) * n + x) =
            scene.image.at((static_cast<std::int64_t>(c) * n + y) * n + (n - 1 - x));
  for (Annotation& a : out.boxes) {
    const double x0 = a.box.x_min, x1 = a.box.x_max;
    a.box.x_min = n - x1;
    a.box.x_max = n - x0;
  }
  return out;
}

}  // namespace

TrainResult staged_train(Model& model, Sgd& opt, const TrainConfig& cfg, const Splits& splits,
                         const std::vector<DomainSpec>& domains, int start_epoch, int stop_epoch,
                         const std::string& checkpoint_dir) {
  cfg.validate();
  if (stop_epoch < 0) stop_epoch = cfg.epochs;

  std::vector<SceneSample> scenes;
  for (const ManifestEntry& e : splits.train) {
    if (e.domain == cfg.exclude_domain) continue;
    scenes.push_back(materialize(e, domains, splits.seen_classes, splits.unseen_classes));
  }
  if (scenes.empty()) throw std::invalid_argument("staged_train: empty training manifest");

  if (start_epoch == 0) {
    // Dataset embeddings start from pooled backbone features (Algorithm 1
    // line 1); held-out domains fall back to the mean embedding.
    std::vector<std::vector<Tensor>> samples(static_cast<std::size_t>(model.cfg.num_domains));
    for (const SceneSample& s : scenes)
      if (static_cast<int>(samples[static_cast<std::size_t>(s.domain)].size()) < 8)
        samples[static_cast<std::size_t>(s.domain)].push_back(s.image);
    model.seed_embeddings(model.backbone, samples, cfg.seed);
  }

  const std::vector<std::string> prompt_pool = training_prompt_pool(splits.seen_classes);
  auto all_params = model.parameters();

  TrainResult result;
  bool recorded_initial = false;
  for (int epoch = start_epoch; epoch < stop_epoch; ++epoch) {
    const Stage stage = cfg.stage_for_epoch(epoch);
    const double lr = cfg.lr_for_epoch(epoch);

    std::vector<std::size_t> order(scenes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng order_rng(cfg.seed, "epoch-order-" + std::to_string(epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[order_rng.uniform_int(i)]);
    Rng flip_rng(cfg.seed, "epoch-flip-" + std::to_string(epoch));

    double epoch_loss = 0;
    long epoch_batches = 0;
    auto stage_params = model.stage_parameters(stage);

    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<SceneSample> batch;
      for (std::size_t i = begin; i < std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size)); ++i) {
        const SceneSample& s = scenes[order[i]];
        const bool flip = cfg.horizontal_flip && flip_rng.coin();
        batch.push_back(flip ? flipped(s) : s);
      }

      Tape tape;
      BatchLoss losses = build_batch_loss(model, tape, batch, stage, cfg, prompt_pool);
      const double value = losses.total.value();
      if (!std::isfinite(value) || value > 1e6) {
        std::ostringstream os;
        os << "staged_train: divergence at epoch " << epoch << " (total " << value;
        auto part = [&](const char* n, const std::optional<Tensor>& t) {
          if (t) os << ", " << n << " " << t->value();
        };
        part("det", losses.detection);
        part("route", losses.route);
        part("distill", losses.distill);
        part("align", losses.align);
        part("coh", losses.coherence);
        os << ")";
        throw std::runtime_error(os.str());
      }
      if (!recorded_initial) {
        result.initial_loss = value;
        recorded_initial = true;
      }

      tape.backward(losses.total);
      opt.step(stage_params, lr);
      for (ParamRef& p : all_params) p.tensor.clear_grad();
      if (losses.route)
        model.tracker.commit();
      else
        model.tracker.discard_pending();

      epoch_loss += value;
      epoch_batches++;
      result.steps++;
    }
    result.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(std::max(1l, epoch_batches)));
  }

  if (!checkpoint_dir.empty()) {
    CheckpointMeta meta;
    meta.step = result.steps;
    meta.epoch = stop_epoch;
    meta.exclude_domain = cfg.exclude_domain;
    meta.model_config = model.cfg;
    meta.train_config = cfg;
    save_checkpoint(checkpoint_dir, model, opt, meta);
  }
  return result;
}

// ---- checkpoint format ------------------------------------------------------

namespace {

nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},   {"channels", c.channels},
          {"num_global", c.num_global},   {"num_local", c.num_local},
          {"embed_dim", c.embed_dim},     {"router_hidden", c.router_hidden},
          {"distill_dim", c.distill_dim}, {"shared_dim", c.shared_dim},
          {"prompt_dim", c.prompt_dim},   {"num_classes", c.num_classes},
          {"num_domains", c.num_domains}, {"router_tau", c.router_tau},
          {"distill_temp", c.distill_temp}, {"mode", routing_mode_name(c.mode)}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_size = j.at("image_size");
  c.channels = j.at("channels");
  c.num_global = j.at("num_global");
  c.num_local = j.at("num_local");
  c.embed_dim = j.at("embed_dim");
  c.router_hidden = j.at("router_hidden");
  c.distill_dim = j.at("distill_dim");
  c.shared_dim = j.at("shared_dim");
  c.prompt_dim = j.at("prompt_dim");
  c.num_classes = j.at("num_classes");
  c.num_domains = j.at("num_domains");
  c.router_tau = j.at("router_tau");
  c.distill_temp = j.at("distill_temp");
  c.mode = routing_mode_from_name(j.at("mode"));
  return c;
}

nlohmann::json train_config_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lambda_route", c.lambda_route},
          {"lambda_distill", c.lambda_distill},
          {"lambda_align", c.lambda_align},
          {"lambda_coh", c.lambda_coh},
          {"stage1_end", c.stage1_end},
          {"stage2_end", c.stage2_end},
          {"decay1", c.decay1},
          {"decay2", c.decay2},
          {"seed", c.seed},
          {"horizontal_flip", c.horizontal_flip},
          {"exclude_domain", c.exclude_domain}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate");
  c.momentum = j.at("momentum");
  c.weight_decay = j.at("weight_decay");
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.lambda_route = j.at("lambda_route");
  c.lambda_distill = j.at("lambda_distill");
  c.lambda_align = j.at("lambda_align");
  c.lambda_coh = j.at("lambda_coh");
  c.stage1_end = j.at("stage1_end");
  c.stage2_end = j.at("stage2_end");
  c.decay1 = j.at("decay1");
  c.decay2 = j.at("decay2");
  c.seed = j.at("seed");
  c.horizontal_flip = j.at("horizontal_flip");
  c.exclude_domain = j.at("exclude_domain");
  return c;
}

std::string blob_name(std::size_t index, const std::string& kind) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04zu.bin", kind.c_str(), index);
  return buf;
}

}  // namespace

void save_checkpoint(const std::string& dir, Model& model, const Sgd& opt,
                     const CheckpointMeta& meta) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json manifest;
  manifest["schema"] = meta.schema;
  manifest["step"] = meta.step;
  manifest["epoch"] = meta.epoch;
  manifest["exclude_domain"] = meta.exclude_domain;
  manifest["model"] = model_config_json(meta.model_config);
  manifest["train"] = train_config_json(meta.train_config);

  auto params = model.parameters();
  nlohmann::json tensor_list = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string file = blob_name(i, "param");
    write_tensor_blob(dir + "/" + file, params[i].name, params[i].tensor);
    tensor_list.push_back({{"name", params[i].name}, {"file", file}});
  }
  manifest["tensors"] = tensor_list;

  nlohmann::json momentum_list = nlohmann::json::array();
  std::size_t mi = 0;
  for (const auto& [name, v] : opt.velocity) {
    const std::string file = blob_name(mi++, "momentum");
    write_tensor_blob(dir + "/" + file, name, Tensor({static_cast<int>(v.size())}, v));
    momentum_list.push_back({{"name", name}, {"file", file}});
  }
  manifest["momentum"] = momentum_list;
  manifest["opt"] = {{"momentum", opt.momentum}, {"weight_decay", opt.weight_decay}};

  auto stats = model.stats();
  nlohmann::json stats_list = nlohmann::json::array();
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const std::string mean_file = blob_name(i, "stat_mean");
    const std::string var_file = blob_name(i, "stat_var");
    const int c = static_cast<int>(stats[i].stats->running_mean.size());
    write_tensor_blob(dir + "/" + mean_file, stats[i].name + ".mean",
                      Tensor({std::max(c, 1)}, c ? stats[i].stats->running_mean : Array::Zero(1)));
    write_tensor_blob(dir + "/" + var_file, stats[i].name + ".var",
                      Tensor({std::max(c, 1)}, c ? stats[i].stats->running_var : Array::Zero(1)));
    stats_list.push_back({{"name", stats[i].name},
                          {"mean_file", mean_file},
                          {"var_file", var_file},
                          {"updates", stats[i].stats->updates},
                          {"channels", c}});
  }
  manifest["stats"] = stats_list;

  std::vector<double> ema(model.tracker.ema().data(),
                          model.tracker.ema().data() + model.tracker.ema().size());
  manifest["tracker"] = {{"ema", ema}, {"steps", model.tracker.steps()}};

  write_text_file(dir + "/manifest.json", manifest.dump(2));
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
  const auto manifest = nlohmann::json::parse(read_text_file(dir + "/manifest.json"));
  CheckpointMeta meta;
  meta.schema = manifest.at("schema");
  if (meta.schema != 1)
    throw std::runtime_error("unsupported checkpoint schema " + std::to_string(meta.schema));
  meta.step = manifest.at("step");
  meta.epoch = manifest.at("epoch");
  meta.exclude_domain = manifest.at("exclude_domain");
  meta.model_config = model_config_from_json(manifest.at("model"));
  meta.train_config = train_config_from_json(manifest.at("train"));

  LoadedCheckpoint out{Model(meta.model_config, 0), Sgd{}, meta};
  out.opt.momentum = manifest.at("opt").at("momentum");
  out.opt.weight_decay = manifest.at("opt").at("weight_decay");

  auto params = out.model.parameters();
  const auto& tensor_list = manifest.at("tensors");
  if (tensor_list.size() != params.size())
    throw std::runtime_error("checkpoint parameter count does not match the architecture");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = tensor_list[i];
    if (entry.at("name") != params[i].name)
      throw std::runtime_error("checkpoint tensor order mismatch at " + params[i].name);
    auto [name, tensor] = read_tensor_blob(dir + "/" + entry.at("file").get<std::string>());
    if (tensor.shape() != params[i].tensor.shape())
      throw std::runtime_error("checkpoint tensor shape mismatch at " + params[i].name);
    params[i].tensor.data() = tensor.data();
  }

  for (const auto& entry : manifest.at("momentum")) {
    auto [name, tensor] = read_tensor_blob(dir + "/" + entry.at("file").get<std::string>());
    out.opt.velocity[entry.at("name").get<std::string>()] = tensor.data();
  }

  auto stats = out.model.stats();
  const auto& stats_list = manifest.at("stats");
  if (stats_list.size() != stats.size())
    throw std::runtime_error("checkpoint stats count does not match the architecture");
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const auto& entry = stats_list[i];
    if (entry.at("name") != stats[i].name)
      throw std::runtime_error("checkpoint stats order mismatch at " + stats[i].name);
    const int c = entry.at("channels");
    stats[i].stats->updates = entry.at("updates");
    if (c > 0) {
      stats[i].stats->running_mean =
          read_tensor_blob(dir + "/" + entry.at("mean_file").get<std::string>()).second.data();
      stats[i].stats->running_var =
          read_tensor_blob(dir + "/" + entry.at("var_file").get<std::string>()).second.data();
    }
  }

  const auto& tracker = manifest.at("tracker");
  std::vector<double> ema = tracker.at("ema").get<std::vector<double>>();
  out.model.tracker.restore(Eigen::Map<const Array>(ema.data(), static_cast<std::int64_t>(ema.size())),
                            tracker.at("steps"));
  return out;
}

}  // namespace hmr
