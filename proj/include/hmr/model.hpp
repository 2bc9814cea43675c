#pragma once

#include "hmr/cem.hpp"
#include "hmr/detect.hpp"
#include "hmr/experts.hpp"
#include "hmr/partition.hpp"
#include "hmr/router.hpp"
#include "hmr/scenes.hpp"

#include <string>
#include <vector>

namespace hmr {

enum class RoutingMode { Full, GlobalOnly, LocalOnly };
enum class Stage { Warmup = 1, GlobalRouting = 2, FullPipeline = 3 };

const char* routing_mode_name(RoutingMode mode);
RoutingMode routing_mode_from_name(const std::string& name);

struct ModelConfig {
  int image_size = 64;
  int channels = 32;  // backbone C == expert C'
  int num_global = 6;
  int num_local = 8;
  int embed_dim = 16;
  int router_hidden = 32;
  int distill_dim = 8;
  int shared_dim = 32;
  int prompt_dim = 32;
  int num_classes = 6;
  int num_domains = 4;
  double router_tau = 1.0;
  double distill_temp = 2.0;
  RoutingMode mode = RoutingMode::Full;
};

struct Model {
  ModelConfig cfg;
  Backbone backbone;
  ExpertPool global_pool;
  ExpertPool local_pool;
  RouterParams router;
  DatasetEmbeddingTable embeddings;
  DistillHead distill;
  PartitionParams partition;
  ProjectionHead proj_visual;  // C' -> shared
  ProjectionHead proj_text;    // d_t -> shared
  HeadParams head;
  UsageTracker tracker;

  Model(const ModelConfig& config, std::uint64_t seed);

  HeadGeometry geometry() const { return {cfg.image_size, 4}; }

  /// Replaces embedding values in place (registry handles stay valid).
  /// Domains with no samples fall back to the mean of the initialized ones.
  void seed_embeddings(Backbone& bb, const std::vector<std::vector<Tensor>>& samples_per_domain,
                       std::uint64_t seed);

  std::vector<ParamRef> parameters();
  std::vector<StatsRef> stats();
  std::int64_t param_count();

  /// Name prefixes of the components a stage trains under this routing mode.
  std::vector<std::string> active_prefixes(Stage stage) const;
  std::vector<ParamRef> stage_parameters(Stage stage);

  /// Mean of all dataset embeddings; the z used for domains the router has
  /// never seen (leave-one-domain-out evaluation).
  Tensor mean_embedding() const;
};

struct ImageOutputs {
  Tensor features;    // v, backbone output
  Tensor expert_map;  // f (routed global expert output), or v when no global path
  Tensor fused;       // o, head input
  Tensor head_out;
  GlobalAssignment assignment;  // valid iff routed
  PartitionState part;          // valid iff partitioned
  std::vector<Tensor> local_outputs;
  bool routed = false;
  bool partitioned = false;
};

/// One pass of the staged pipeline. domain == -1 routes with the mean
/// dataset embedding (held-out domain rule).
ImageOutputs forward_image(Model& model, Tape& tape, const Tensor& image, int domain, Stage stage,
                           bool training);

struct OpenDetection {
  int ru_channel = 0;
  int prompt = 0;
  double score = 0;
  BoundingBox box;
  bool has_box = false;
};

/// Prompt-conditioned inference: per active non-empty RU, the best prompt
/// above threshold, attached to the strongest head box whose center falls in
/// the RU. Prompt pools above 16 entries are sampled down (uniform, without
/// replacement, seeded).
std::vector<OpenDetection> open_category_infer(Model& model, const Tensor& image, int domain,
                                               const std::vector<std::string>& prompts,
                                               double threshold, std::uint64_t sample_seed = 0);

}  // namespace hmr
