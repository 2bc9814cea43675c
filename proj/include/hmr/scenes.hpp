#pragma once

#include "hmr/detect.hpp"
#include "hmr/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace hmr {

constexpr int kNumClasses = 6;
constexpr int kSceneSize = 64;

/// square, disk, triangle, bar, ring, cross
const char* class_name(int class_id);
int class_id_from_name(const std::string& name);

struct DomainSpec {
  int id = 0;
  std::array<double, 3> base_color{0.5, 0.5, 0.5};
  double noise_amp = 0.02;
  int pattern = 0;  // 0 h-stripes, 1 blobs, 2 v-stripes, 3 gradient
  double min_scale = 6, max_scale = 12;
  std::vector<int> palette;
  int min_objects = 1, max_objects = 4;
};

/// The four stock domains: pairwise-distinct background laws and scale
/// ranges so dataset-level routing has signal.
std::vector<DomainSpec> default_domains();

struct SceneSample {
  Tensor image;  // [3,64,64] in [0,1]
  std::vector<Annotation> boxes;
  int domain = 0;
  std::uint64_t seed = 0;
};

/// Deterministic scene synthesis: background per the domain law, then up to
/// max_objects occlusion-free shapes by rejection (<= 100 tries each; a
/// crowded canvas simply holds fewer objects).
SceneSample generate_scene(const DomainSpec& spec, std::uint64_t seed);

struct SplitConfig {
  int train_per_domain = 96;
  int val_per_domain = 16;
  int test_per_domain = 32;
  int zsd_per_domain = 16;
  std::vector<int> unseen_classes{4, 5};  // ring, cross
  std::uint64_t seed = 1;
};

struct ManifestEntry {
  int domain = 0;
  std::uint64_t seed = 0;
  bool unseen_only = false;  // ZSD scenes draw from the unseen palette
};

struct Splits {
  std::vector<ManifestEntry> train, val, test, zsd;
  std::vector<int> seen_classes, unseen_classes;
};

/// Deterministic manifests with disjoint seed ranges per split. Unseen
/// classes never enter train/val/test palettes; ZSD scenes hold only them.
Splits make_splits(const SplitConfig& config);

/// Regenerates the sample a manifest entry describes, bit-identically.
SceneSample materialize(const ManifestEntry& entry, const std::vector<DomainSpec>& domains,
                        const std::vector<int>& seen, const std::vector<int>& unseen);

std::string splits_to_json(const Splits& splits);
Splits splits_from_json(const std::string& text);

/// Writes manifest.json plus per-scene tensor blobs and annotation JSON.
void write_corpus(const std::string& dir, const Splits& splits,
                  const std::vector<DomainSpec>& domains, bool materialize_images);

}  // namespace hmr
