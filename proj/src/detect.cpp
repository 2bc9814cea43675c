#include "hmr/detect.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hmr {

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

HeadParams::HeadParams(int channels, int num_classes_in, Rng& rng)
    : kernel(kaiming_conv(num_classes_in + 5, channels, rng)), num_classes(num_classes_in) {}

void HeadParams::collect(std::vector<ParamRef>& params) {
  params.push_back({"head.kernel", kernel});
}

Tensor head_forward(Tape& tape, const HeadParams& head, const Tensor& fused) {
  return conv2d(tape, fused, head.kernel);
}

namespace {

struct CellTarget {
  int label;
  bool matched = false;
  double offsets[4] = {0, 0, 0, 0};
};

std::vector<CellTarget> assign_targets(const std::vector<Annotation>& truth,
                                       const HeadGeometry& geo, int grid_h, int grid_w,
                                       int num_classes) {
  std::vector<CellTarget> cells(static_cast<std::size_t>(grid_h) * grid_w);
  for (auto& c : cells) c.label = num_classes;

  // One object per cell; contested cells go to the nearest object center.
  std::vector<double> best_dist(cells.size(), 1e18);
  for (const Annotation& gt : truth) {
    if (!gt.box.valid() || gt.box.x_min < 0 || gt.box.y_min < 0 || gt.box.x_max > geo.image_size ||
        gt.box.y_max > geo.image_size)
      throw std::invalid_argument("detection_loss: ground-truth box outside the image");
    if (gt.class_id < 0 || gt.class_id >= num_classes)
      throw std::invalid_argument("detection_loss: ground-truth class out of range");
    const int col = std::clamp(static_cast<int>(gt.box.cx() / geo.stride), 0, grid_w - 1);
    const int row = std::clamp(static_cast<int>(gt.box.cy() / geo.stride), 0, grid_h - 1);
    const std::size_t idx = static_cast<std::size_t>(row) * grid_w + col;
    const double dx = gt.box.cx() - geo.cell_cx(col);
    const double dy = gt.box.cy() - geo.cell_cy(row);
    const double dist = dx * dx + dy * dy;
    if (dist >= best_dist[idx]) continue;
    best_dist[idx] = dist;
    cells[idx].label = gt.class_id;
    cells[idx].matched = true;
    cells[idx].offsets[0] = dx / geo.base();
    cells[idx].offsets[1] = dy / geo.base();
    cells[idx].offsets[2] = gt.box.width() / geo.base();
    cells[idx].offsets[3] = gt.box.height() / geo.base();
  }
  return cells;
}

}  // namespace

Tensor detection_loss(Tape& tape, const Tensor& head_out, const std::vector<Annotation>& truth,
                      const HeadGeometry& geometry, int num_classes) {
  const int channels = head_out.dim(0), gh = head_out.dim(1), gw = head_out.dim(2);
  if (channels != num_classes + 5)
    throw std::invalid_argument("detection_loss: head output has " + std::to_string(channels) +
                                " channels, expected " + std::to_string(num_classes + 5));
  auto cells = assign_targets(truth, geometry, gh, gw, num_classes);

  std::vector<int> labels(cells.size());
  std::vector<std::int64_t> matched;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    labels[i] = cells[i].label;
    if (cells[i].matched) matched.push_back(static_cast<std::int64_t>(i));
  }

  Tensor class_logits = slice_channels(tape, head_out, 0, num_classes + 1);
  Tensor ce = cross_entropy_cells(tape, class_logits, labels);
  if (matched.empty()) return ce;

  // Gather predicted offsets of matched cells into one [4n] vector.
  const std::int64_t hw = static_cast<std::int64_t>(gh) * gw;
  Tensor offsets = slice_channels(tape, head_out, num_classes + 1, num_classes + 5);
  Tensor flat = reshape(tape, offsets, {static_cast<int>(4 * hw)});
  Tensor gathered;
  Array target(static_cast<std::int64_t>(matched.size()) * 4);
  for (std::size_t i = 0; i < matched.size(); ++i) {
    for (int k = 0; k < 4; ++k) {
      Tensor one = reshape(tape, pick(tape, flat, k * hw + matched[i]), {1});
      gathered = gathered.defined() ? concat(tape, gathered, one, 0) : one;
      target[static_cast<std::int64_t>(i) * 4 + k] = cells[static_cast<std::size_t>(matched[i])].offsets[k];
    }
  }
  Tensor box_loss = smooth_l1(tape, gathered, target, 1.0, 4);
  return add(tape, ce, box_loss);
}

std::vector<Detection> decode_and_nms(const Tensor& head_out, double score_threshold,
                                      double iou_threshold, const HeadGeometry& geometry,
                                      int num_classes, int max_detections) {
  if (score_threshold < 0 || score_threshold > 1 || iou_threshold < 0 || iou_threshold > 1)
    throw std::invalid_argument("decode_and_nms thresholds must be within [0,1]");
  const int gh = head_out.dim(1), gw = head_out.dim(2);
  const std::int64_t hw = static_cast<std::int64_t>(gh) * gw;
  const double base = geometry.base();

  std::vector<Detection> candidates;
  for (int row = 0; row < gh; ++row) {
    for (int col = 0; col < gw; ++col) {
      const std::int64_t cell = static_cast<std::int64_t>(row) * gw + col;
      // softmax over class channels
      double mx = head_out.at(cell);
      for (int k = 1; k <= num_classes; ++k) mx = std::max(mx, head_out.at(k * hw + cell));
      double denom = 0;
      std::vector<double> probs(static_cast<std::size_t>(num_classes) + 1);
      for (int k = 0; k <= num_classes; ++k) {
        probs[static_cast<std::size_t>(k)] = std::exp(head_out.at(k * hw + cell) - mx);
        denom += probs[static_cast<std::size_t>(k)];
      }
      const double tx = head_out.at((num_classes + 1) * hw + cell);
      const double ty = head_out.at((num_classes + 2) * hw + cell);
      const double tw = head_out.at((num_classes + 3) * hw + cell);
      const double th = head_out.at((num_classes + 4) * hw + cell);
      const double cx = geometry.cell_cx(col) + tx * base;
      const double cy = geometry.cell_cy(row) + ty * base;
      const double w = tw * base, h = th * base;
      BoundingBox box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
      box.x_min = std::clamp(box.x_min, 0.0, static_cast<double>(geometry.image_size));
      box.y_min = std::clamp(box.y_min, 0.0, static_cast<double>(geometry.image_size));
      box.x_max = std::clamp(box.x_max, 0.0, static_cast<double>(geometry.image_size));
      box.y_max = std::clamp(box.y_max, 0.0, static_cast<double>(geometry.image_size));
      if (!box.valid()) continue;
      for (int k = 0; k < num_classes; ++k) {
        const double score = probs[static_cast<std::size_t>(k)] / denom;
        if (score >= score_threshold)
          candidates.push_back({box, k, score, static_cast<int>(cell)});
      }
    }
  }

  std::stable_sort(candidates.begin(), candidates.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.cell < b.cell;
  });

  std::vector<Detection> kept;
  for (const Detection& cand : candidates) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id != cand.class_id) continue;
      if (iou(k.box, cand.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      kept.push_back(cand);
      if (static_cast<int>(kept.size()) >= max_detections) break;
    }
  }
  return kept;
}

}  // namespace hmr
