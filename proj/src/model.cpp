#include "hmr/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hmr {

const char* routing_mode_name(RoutingMode mode) {
  switch (mode) {
    case RoutingMode::Full:
      return "full";
    case RoutingMode::GlobalOnly:
      return "global-only";
    case RoutingMode::LocalOnly:
      return "local-only";
  }
  return "full";
}

RoutingMode routing_mode_from_name(const std::string& name) {
  if (name == "full") return RoutingMode::Full;
  if (name == "global-only") return RoutingMode::GlobalOnly;
  if (name == "local-only") return RoutingMode::LocalOnly;
  throw std::invalid_argument("unknown routing mode: " + name);
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : cfg(config) {
  Rng rng(seed, "model-init");
  backbone = Backbone(cfg.channels, rng);
  global_pool = ExpertPool("global", cfg.num_global, cfg.channels, cfg.channels, rng);
  local_pool = ExpertPool("local", cfg.num_local, cfg.channels, cfg.channels, rng);
  router = RouterParams(cfg.channels + cfg.embed_dim, cfg.router_hidden, cfg.num_global, rng,
                        cfg.router_tau);
  distill = DistillHead(cfg.channels, cfg.distill_dim, rng);
  partition = PartitionParams(cfg.channels, cfg.num_local, rng);
  proj_visual = ProjectionHead(cfg.channels, cfg.shared_dim, rng);
  proj_text = ProjectionHead(cfg.prompt_dim, cfg.shared_dim, rng);
  head = HeadParams(cfg.channels, cfg.num_classes, rng);
  tracker = UsageTracker(cfg.num_global);
  for (int i = 0; i < cfg.num_domains; ++i)
    embeddings.embeddings.push_back(Tensor::zeros({cfg.embed_dim}, true));
}

void Model::seed_embeddings(Backbone& bb, const std::vector<std::vector<Tensor>>& samples_per_domain,
                            std::uint64_t seed) {
  if (static_cast<int>(samples_per_domain.size()) != cfg.num_domains)
    throw std::invalid_argument("seed_embeddings: need one sample list per domain");
  std::vector<std::vector<Tensor>> populated;
  std::vector<int> populated_ids;
  for (int d = 0; d < cfg.num_domains; ++d)
    if (!samples_per_domain[static_cast<std::size_t>(d)].empty()) {
      populated.push_back(samples_per_domain[static_cast<std::size_t>(d)]);
      populated_ids.push_back(d);
    }
  if (populated.empty())
    throw std::invalid_argument("seed_embeddings: every domain is empty");
  DatasetEmbeddingTable table = init_dataset_embeddings(bb, populated, cfg.embed_dim, seed);

  Array mean = Array::Zero(cfg.embed_dim);
  for (const Tensor& z : table.embeddings) mean += z.data();
  mean /= static_cast<double>(table.embeddings.size());

  for (int d = 0; d < cfg.num_domains; ++d) {
    auto it = std::find(populated_ids.begin(), populated_ids.end(), d);
    Tensor& slot = embeddings.embeddings[static_cast<std::size_t>(d)];
    if (it != populated_ids.end())
      slot.data() = table.embeddings[static_cast<std::size_t>(it - populated_ids.begin())].data();
    else
      slot.data() = mean;
  }
}

std::vector<ParamRef> Model::parameters() {
  std::vector<ParamRef> params;
  backbone.collect("backbone", params, nullptr);
  global_pool.collect(params, nullptr);
  local_pool.collect(params, nullptr);
  router.collect(params);
  embeddings.collect(params);
  distill.collect(params);
  partition.collect(params);
  params.push_back({"cem.visual.w", proj_visual.w});
  params.push_back({"cem.text.w", proj_text.w});
  head.collect(params);
  return params;
}

std::vector<StatsRef> Model::stats() {
  std::vector<StatsRef> out;
  std::vector<ParamRef> scratch;
  backbone.collect("backbone", scratch, &out);
  scratch.clear();
  global_pool.collect(scratch, &out);
  scratch.clear();
  local_pool.collect(scratch, &out);
  return out;
}

std::int64_t Model::param_count() {
  std::int64_t n = 0;
  for (ParamRef& p : parameters()) n += p.tensor.size();
  return n;
}

std::vector<std::string> Model::active_prefixes(Stage stage) const {
  std::vector<std::string> prefixes{"backbone.", "head."};
  const bool has_global = cfg.mode != RoutingMode::LocalOnly;
  const bool has_local = cfg.mode != RoutingMode::GlobalOnly;
  if (has_global) {
    if (stage == Stage::Warmup) {
      prefixes.push_back("global.0.");
    } else {
      prefixes.push_back("global.");
      prefixes.push_back("router.");
      prefixes.push_back("dataset_embed.");
      prefixes.push_back("distill.");
    }
  }
  if (stage == Stage::FullPipeline) {
    if (has_local) prefixes.push_back("local.");
    if (has_local) prefixes.push_back("partition.");
    prefixes.push_back("cem.");
  }
  return prefixes;
}

std::vector<ParamRef> Model::stage_parameters(Stage stage) {
  const auto prefixes = active_prefixes(stage);
  std::vector<ParamRef> out;
  for (ParamRef& p : parameters()) {
    for (const std::string& prefix : prefixes) {
      if (p.name.rfind(prefix, 0) == 0) {
        out.push_back(p);
        break;
      }
    }
  }
  return out;
}

Tensor Model::mean_embedding() const {
  Array mean = Array::Zero(cfg.embed_dim);
  for (const Tensor& z : embeddings.embeddings) mean += z.data();
  mean /= static_cast<double>(embeddings.embeddings.size());
  return Tensor({cfg.embed_dim}, std::move(mean));
}

ImageOutputs forward_image(Model& model, Tape& tape, const Tensor& image, int domain, Stage stage,
                           bool training) {
  ImageOutputs out;
  out.features = model.backbone.forward(tape, image, training);

  const bool has_global = model.cfg.mode != RoutingMode::LocalOnly;
  const bool has_local = model.cfg.mode != RoutingMode::GlobalOnly;

  if (has_global) {
    int expert = 0;
    if (stage != Stage::Warmup) {
      Tensor u = spatial_mean(tape, out.features);
      Tensor z = domain >= 0 ? model.embeddings.lookup(domain) : model.mean_embedding();
      out.assignment = route_global(tape, u, z, model.router);
      out.routed = true;
      expert = out.assignment.expert;
    }
    out.expert_map = expert_forward(tape, model.global_pool, expert, out.features, training);
  } else {
    out.expert_map = out.features;
  }

  if (has_local && stage == Stage::FullPipeline) {
    out.part = partition_map(tape, out.expert_map, model.partition, model.cfg.num_local);
    build_masks(out.part);
    out.local_outputs = masked_dispatch(tape, out.expert_map, out.part, model.local_pool, training);
    out.fused = fuse(tape, out.local_outputs, out.part.masks);
    out.partitioned = true;
  } else {
    out.fused = out.expert_map;
  }

  out.head_out = head_forward(tape, model.head, out.fused);
  return out;
}

std::vector<OpenDetection> open_category_infer(Model& model, const Tensor& image, int domain,
                                               const std::vector<std::string>& prompts,
                                               double threshold, std::uint64_t sample_seed) {
  if (prompts.empty())
    throw std::invalid_argument("open_category_infer: prompt set must be non-empty");
  if (threshold < -1.0 || threshold > 1.0)
    throw std::invalid_argument("open_category_infer: threshold must lie in [-1, 1]");

  std::vector<std::string> pool = prompts;
  if (pool.size() > 16) {  // at most 16 alignments per image
    Rng rng(sample_seed, "prompt-sample");
    std::vector<std::string> sampled;
    std::vector<std::string> remaining = pool;
    for (int i = 0; i < 16; ++i) {
      const std::size_t pick = rng.uniform_int(remaining.size());
      sampled.push_back(remaining[pick]);
      remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    pool = std::move(sampled);
  }

  Tape tape(false);
  ImageOutputs out = forward_image(model, tape, image, domain, Stage::FullPipeline, false);
  if (!out.partitioned) return {};

  std::vector<int> slots;
  std::vector<Tensor> visual;
  for (std::size_t s = 0; s < out.part.active.size(); ++s) {
    if (out.part.masks[s].data().sum() == 0.0) continue;
    Projected p = project(tape, masked_mean(tape, out.expert_map, out.part.masks[s]),
                          model.proj_visual);
    if (p.degenerate) continue;
    slots.push_back(static_cast<int>(s));
    visual.push_back(p.vector);
  }
  if (visual.empty()) return {};

  std::vector<Tensor> textual;
  for (const std::string& text : pool)
    textual.push_back(project(tape, embed_prompt(text, model.cfg.prompt_dim).vector, model.proj_text).vector);

  Tensor scores = similarity(tape, visual, textual);

  // Class-agnostic box candidates ranked by objectness (1 - background).
  const HeadGeometry geo = model.geometry();
  const int gh = out.head_out.dim(1), gw = out.head_out.dim(2);
  const std::int64_t hw = static_cast<std::int64_t>(gh) * gw;
  const int k = model.cfg.num_classes;
  struct Box {
    BoundingBox box;
    double objectness;
    int cell;
  };
  std::vector<Box> boxes;
  for (int row = 0; row < gh; ++row)
    for (int col = 0; col < gw; ++col) {
      const std::int64_t cell = static_cast<std::int64_t>(row) * gw + col;
      double mx = out.head_out.at(cell);
      for (int c = 1; c <= k; ++c) mx = std::max(mx, out.head_out.at(c * hw + cell));
      double denom = 0, bg = 0;
      for (int c = 0; c <= k; ++c) {
        const double e = std::exp(out.head_out.at(c * hw + cell) - mx);
        denom += e;
        if (c == k) bg = e;
      }
      const double objectness = 1.0 - bg / denom;
      const double base = geo.base();
      const double cx = geo.cell_cx(col) + out.head_out.at((k + 1) * hw + cell) * base;
      const double cy = geo.cell_cy(row) + out.head_out.at((k + 2) * hw + cell) * base;
      const double w = out.head_out.at((k + 3) * hw + cell) * base;
      const double h = out.head_out.at((k + 4) * hw + cell) * base;
      BoundingBox box{std::clamp(cx - w / 2, 0.0, static_cast<double>(geo.image_size)),
                      std::clamp(cy - h / 2, 0.0, static_cast<double>(geo.image_size)),
                      std::clamp(cx + w / 2, 0.0, static_cast<double>(geo.image_size)),
                      std::clamp(cy + h / 2, 0.0, static_cast<double>(geo.image_size))};
      if (!box.valid()) continue;
      boxes.push_back({box, objectness, static_cast<int>(cell)});
    }
  std::stable_sort(boxes.begin(), boxes.end(), [](const Box& a, const Box& b) {
    if (a.objectness != b.objectness) return a.objectness > b.objectness;
    return a.cell < b.cell;
  });

  std::vector<OpenDetection> dets;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    int best_prompt = 0;
    for (int m = 1; m < static_cast<int>(pool.size()); ++m)
      if (scores.at(static_cast<int>(i), m) > scores.at(static_cast<int>(i), best_prompt))
        best_prompt = m;
    const double score = scores.at(static_cast<int>(i), best_prompt);
    if (score <= threshold) continue;

    OpenDetection det;
    det.ru_channel = out.part.active[static_cast<std::size_t>(slots[i])];
    det.prompt = best_prompt;
    det.score = score;
    const Tensor& mask = out.part.masks[static_cast<std::size_t>(slots[i])];
    for (const Box& b : boxes) {
      if (mask.at(b.cell) == 1.0) {
        det.box = b.box;
        det.has_box = true;
        break;
      }
    }
    dets.push_back(det);
  }
  return dets;
}

}  // namespace hmr
