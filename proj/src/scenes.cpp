#include "hmr/scenes.hpp"

#include "hmr/io.hpp"
#include "hmr/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

namespace hmr {

namespace {

const char* kClassNames[kNumClasses] = {"square", "disk", "triangle", "bar", "ring", "cross"};

struct ShapeInstance {
  int class_id;
  double cx, cy, w, h;
  std::array<double, 3> color;
  bool vertical_bar = false;
};

bool inside_shape(const ShapeInstance& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  switch (s.class_id) {
    case 0:  // square
      return std::abs(dx) <= s.w / 2 && std::abs(dy) <= s.h / 2;
    case 1:  // disk
      return dx * dx + dy * dy <= 0.25 * s.w * s.w;
    case 2: {  // upward triangle
      if (dy < -s.h / 2 || dy > s.h / 2) return false;
      const double half_width = (dy + s.h / 2) / s.h * (s.w / 2);
      return std::abs(dx) <= half_width;
    }
    case 3:  // bar
      return std::abs(dx) <= s.w / 2 && std::abs(dy) <= s.h / 2;
    case 4: {  // ring
      const double r2 = dx * dx + dy * dy;
      const double outer = 0.5 * s.w;
      const double inner = 0.55 * outer;
      return r2 <= outer * outer && r2 >= inner * inner;
    }
    case 5: {  // cross
      const double t = std::max(3.0, s.w / 3.0) / 2;
      return (std::abs(dx) <= s.w / 2 && std::abs(dy) <= t) ||
             (std::abs(dy) <= s.h / 2 && std::abs(dx) <= t);
    }
    default:
      return false;
  }
}

void paint_background(Tensor& image, const DomainSpec& spec, Rng& rng) {
  const int n = kSceneSize;
  // Two-zone canvas: a random straight boundary separates the patterned
  // zone from a plain, brightness-shifted one, so scenes carry regionally
  // distinct texture.
  const bool horizontal_split = rng.coin();
  const double boundary = rng.uniform(0.3, 0.7) * n;
  const double zone_shift = rng.coin() ? 0.14 : -0.14;

  struct Blob {
    double bx, by, sigma, amp;
  };
  std::vector<Blob> blobs;
  if (spec.pattern == 1) {
    const int nb = 3 + static_cast<int>(rng.uniform_int(3ull));
    for (int i = 0; i < nb; ++i)
      blobs.push_back({rng.uniform(0, n), rng.uniform(0, n), rng.uniform(3.0, 9.0),
                       rng.uniform(0.1, 0.2) * (rng.coin() ? 1.0 : -1.0)});
  }
  const double phase = rng.uniform(0.0, 6.0);

  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const bool zone_b = horizontal_split ? (y >= boundary) : (x >= boundary);
      double mod = zone_b ? zone_shift : 0.0;
      if (!zone_b) {
        switch (spec.pattern) {
          case 0:
            mod += (static_cast<int>((y + phase) / 6.0) % 2 == 0) ? 0.08 : -0.08;
            break;
          case 1:
            for (const Blob& b : blobs) {
              const double d2 = (x - b.bx) * (x - b.bx) + (y - b.by) * (y - b.by);
              mod += b.amp * std::exp(-d2 / (2 * b.sigma * b.sigma));
            }
            break;
          case 2:
            mod += (static_cast<int>((x + phase) / 6.0) % 2 == 0) ? 0.08 : -0.08;
            break;
          case 3:
            mod += 0.18 * ((x + y) / (2.0 * n) - 0.5);
            break;
          default:
            break;
        }
      }
      for (int c = 0; c < 3; ++c) {
        const double noise = rng.normal(0.0, spec.noise_amp);
        const double v = spec.base_color[static_cast<std::size_t>(c)] + mod + noise;
        image.mut((static_cast<std::int64_t>(c) * n + y) * n + x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
}

}  // namespace

const char* class_name(int class_id) {
  if (class_id < 0 || class_id >= kNumClasses)
    throw std::invalid_argument("class id out of range: " + std::to_string(class_id));
  return kClassNames[class_id];
}

int class_id_from_name(const std::string& name) {
  for (int i = 0; i < kNumClasses; ++i)
    if (name == kClassNames[i]) return i;
  throw std::invalid_argument("unknown class name: " + name);
}

std::vector<DomainSpec> default_domains() {
  std::vector<DomainSpec> d(4);
  d[0] = {0, {0.18, 0.34, 0.20}, 0.02, 0, 7, 13, {0, 1, 4}, 1, 4};
  d[1] = {1, {0.66, 0.55, 0.34}, 0.05, 1, 10, 18, {1, 2, 5}, 2, 6};
  d[2] = {2, {0.24, 0.32, 0.58}, 0.08, 2, 14, 24, {2, 3, 4}, 1, 5};
  d[3] = {3, {0.46, 0.20, 0.42}, 0.035, 3, 8, 20, {0, 3, 5}, 0, 3};
  return d;
}

SceneSample generate_scene(const DomainSpec& spec, std::uint64_t seed) {
  if (spec.palette.empty()) throw std::invalid_argument("generate_scene: empty class palette");
  if (spec.min_objects < 0 || spec.max_objects < spec.min_objects)
    throw std::invalid_argument("generate_scene: bad objects-per-scene range");

  SceneSample sample;
  sample.domain = spec.id;
  sample.seed = seed;
  sample.image = Tensor({3, kSceneSize, kSceneSize});

  Rng rng(seed, "scene-domain-" + std::to_string(spec.id));
  paint_background(sample.image, spec, rng);

  const int want = spec.min_objects + static_cast<int>(rng.uniform_int(
                                          static_cast<std::uint64_t>(spec.max_objects - spec.min_objects + 1)));
  std::vector<ShapeInstance> placed;
  for (int obj = 0; obj < want; ++obj) {
    const int cls = spec.palette[rng.uniform_int(spec.palette.size())];
    double s = rng.uniform(spec.min_scale, spec.max_scale);
    if (cls == 4) s = std::max(s, 9.0);  // ring needs a visible hole
    if (cls == 5) s = std::max(s, 7.0);
    s = std::max(s, 4.0);

    ShapeInstance inst;
    inst.class_id = cls;
    inst.w = s;
    inst.h = s;
    if (cls == 3) {
      inst.vertical_bar = rng.coin();
      const double thick = std::max(3.0, std::round(s / 3.0));
      if (inst.vertical_bar) {
        inst.w = thick;
        inst.h = s;
      } else {
        inst.h = thick;
      }
    }
    for (int c = 0; c < 3; ++c) inst.color[static_cast<std::size_t>(c)] = rng.uniform();
    {  // ensure contrast against the domain base
      double dist = 0;
      for (int c = 0; c < 3; ++c)
        dist += std::abs(inst.color[static_cast<std::size_t>(c)] - spec.base_color[static_cast<std::size_t>(c)]);
      if (dist < 0.75)
        for (int c = 0; c < 3; ++c)
          inst.color[static_cast<std::size_t>(c)] = 1.0 - inst.color[static_cast<std::size_t>(c)];
    }

    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      inst.cx = rng.uniform(inst.w / 2 + 1, kSceneSize - inst.w / 2 - 1);
      inst.cy = rng.uniform(inst.h / 2 + 1, kSceneSize - inst.h / 2 - 1);
      ok = true;
      for (const ShapeInstance& other : placed) {
        const bool sep = inst.cx + inst.w / 2 + 1 < other.cx - other.w / 2 ||
                         other.cx + other.w / 2 + 1 < inst.cx - inst.w / 2 ||
                         inst.cy + inst.h / 2 + 1 < other.cy - other.h / 2 ||
                         other.cy + other.h / 2 + 1 < inst.cy - inst.h / 2;
        if (!sep) {
          ok = false;
          break;
        }
      }
    }
    if (!ok) continue;  // crowded canvas: emit the placed subset
    placed.push_back(inst);
  }

  for (const ShapeInstance& inst : placed) {
    const int x0 = std::max(0, static_cast<int>(std::floor(inst.cx - inst.w / 2)));
    const int x1 = std::min(kSceneSize - 1, static_cast<int>(std::ceil(inst.cx + inst.w / 2)));
    const int y0 = std::max(0, static_cast<int>(std::floor(inst.cy - inst.h / 2)));
    const int y1 = std::min(kSceneSize - 1, static_cast<int>(std::ceil(inst.cy + inst.h / 2)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (inside_shape(inst, x + 0.5, y + 0.5))
          for (int c = 0; c < 3; ++c)
            sample.image.mut((static_cast<std::int64_t>(c) * kSceneSize + y) * kSceneSize + x) =
                inst.color[static_cast<std::size_t>(c)];

    BoundingBox box{inst.cx - inst.w / 2, inst.cy - inst.h / 2, inst.cx + inst.w / 2,
                    inst.cy + inst.h / 2};
    box.x_min = std::clamp(box.x_min, 0.0, static_cast<double>(kSceneSize));
    box.y_min = std::clamp(box.y_min, 0.0, static_cast<double>(kSceneSize));
    box.x_max = std::clamp(box.x_max, 0.0, static_cast<double>(kSceneSize));
    box.y_max = std::clamp(box.y_max, 0.0, static_cast<double>(kSceneSize));
    sample.boxes.push_back({box, inst.class_id});
  }
  return sample;
}

Splits make_splits(const SplitConfig& config) {
  Splits splits;
  splits.unseen_classes = config.unseen_classes;
  std::sort(splits.unseen_classes.begin(), splits.unseen_classes.end());
  for (std::size_t i = 1; i < splits.unseen_classes.size(); ++i)
    if (splits.unseen_classes[i] == splits.unseen_classes[i - 1])
      throw std::invalid_argument("make_splits: duplicate unseen class");
  for (int c : splits.unseen_classes)
    if (c < 0 || c >= kNumClasses)
      throw std::invalid_argument("make_splits: unseen class id out of range");
  for (int c = 0; c < kNumClasses; ++c)
    if (!std::binary_search(splits.unseen_classes.begin(), splits.unseen_classes.end(), c))
      splits.seen_classes.push_back(c);
  if (splits.seen_classes.empty())
    throw std::invalid_argument("make_splits: every class is unseen; nothing to train on");

  const auto domains = default_domains();
  auto emit = [&](std::vector<ManifestEntry>& out, int per_domain, std::uint64_t split_tag,
                  bool unseen_only) {
    for (const DomainSpec& d : domains)
      for (int i = 0; i < per_domain; ++i)
        out.push_back({d.id,
                       config.seed + static_cast<std::uint64_t>(d.id) * 1000000ull +
                           split_tag * 250000ull + static_cast<std::uint64_t>(i),
                       unseen_only});
  };
  emit(splits.train, config.train_per_domain, 0, false);
  emit(splits.val, config.val_per_domain, 1, false);
  emit(splits.test, config.test_per_domain, 2, false);
  if (!splits.unseen_classes.empty()) emit(splits.zsd, config.zsd_per_domain, 3, true);
  return splits;
}

SceneSample materialize(const ManifestEntry& entry, const std::vector<DomainSpec>& domains,
                        const std::vector<int>& seen, const std::vector<int>& unseen) {
  if (entry.domain < 0 || entry.domain >= static_cast<int>(domains.size()))
    throw std::invalid_argument("materialize: unknown domain " + std::to_string(entry.domain));
  DomainSpec spec = domains[static_cast<std::size_t>(entry.domain)];
  const std::vector<int>& allowed = entry.unseen_only ? unseen : seen;
  std::vector<int> palette;
  for (int c : spec.palette)
    if (std::find(allowed.begin(), allowed.end(), c) != allowed.end()) palette.push_back(c);
  spec.palette = palette;
  if (entry.unseen_only && spec.min_objects < 1) spec.min_objects = 1;
  return generate_scene(spec, entry.seed);
}

std::string splits_to_json(const Splits& splits) {
  nlohmann::json j;
  j["schema"] = 1;
  j["seen"] = splits.seen_classes;
  j["unseen"] = splits.unseen_classes;
  auto dump = [](const std::vector<ManifestEntry>& entries) {
    nlohmann::json arr = nlohmann::json::array();
    for (const ManifestEntry& e : entries)
      arr.push_back({{"domain", e.domain}, {"seed", e.seed}, {"unseen_only", e.unseen_only}});
    return arr;
  };
  j["train"] = dump(splits.train);
  j["val"] = dump(splits.val);
  j["test"] = dump(splits.test);
  j["zsd"] = dump(splits.zsd);
  return j.dump(2);
}

Splits splits_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  Splits splits;
  splits.seen_classes = j.at("seen").get<std::vector<int>>();
  splits.unseen_classes = j.at("unseen").get<std::vector<int>>();
  auto load = [&](const char* key, std::vector<ManifestEntry>& out) {
    for (const auto& e : j.at(key))
      out.push_back({e.at("domain").get<int>(), e.at("seed").get<std::uint64_t>(),
                     e.at("unseen_only").get<bool>()});
  };
  load("train", splits.train);
  load("val", splits.val);
  load("test", splits.test);
  load("zsd", splits.zsd);
  return splits;
}

void write_corpus(const std::string& dir, const Splits& splits,
                  const std::vector<DomainSpec>& domains, bool materialize_images) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_text_file(dir + "/manifest.json", splits_to_json(splits));
  if (!materialize_images) return;

  fs::create_directories(dir + "/scenes");
  auto dump_split = [&](const char* name, const std::vector<ManifestEntry>& entries) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      SceneSample s = materialize(entries[i], domains, splits.seen_classes, splits.unseen_classes);
      const std::string stem =
          dir + "/scenes/" + name + "_" + std::to_string(i);
      write_tensor_blob(stem + ".bin", "image", s.image);
      nlohmann::json ann = nlohmann::json::array();
      for (const Annotation& a : s.boxes)
        ann.push_back({{"box", {a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max}},
                       {"class", a.class_id},
                       {"class_name", class_name(a.class_id)}});
      nlohmann::json j{{"domain", s.domain}, {"seed", s.seed}, {"annotations", ann}};
      write_text_file(stem + ".json", j.dump(2));
    }
  };
  dump_split("train", splits.train);
  dump_split("val", splits.val);
  dump_split("test", splits.test);
  dump_split("zsd", splits.zsd);
}

}  // namespace hmr
