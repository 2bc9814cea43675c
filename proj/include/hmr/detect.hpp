#pragma once

#include "hmr/experts.hpp"
#include "hmr/tensor.hpp"

#include <vector>

namespace hmr {

/// Axis-aligned box in image pixels.
struct BoundingBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  bool valid() const { return x_min < x_max && y_min < y_max; }
  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x_min + x_max); }
  double cy() const { return 0.5 * (y_min + y_max); }
};

double iou(const BoundingBox& a, const BoundingBox& b);

struct Detection {
  BoundingBox box;
  int class_id = 0;  // or prompt id in open-category mode
  double score = 0;
  int cell = 0;  // decoding cell, deterministic tie-break key
};

struct Annotation {
  BoundingBox box;
  int class_id = 0;
};

/// Dense single-stage head: one conv producing, per cell, class logits
/// (num_classes + background) and 4 box offsets. Cells sit on a stride-4
/// grid; the anchor is the cell center with base size = 2 * stride.
struct HeadParams {
  Tensor kernel;  // [num_classes+5, C', 3, 3]
  int num_classes = 0;

  HeadParams() = default;
  HeadParams(int channels, int num_classes, Rng& rng);
  void collect(std::vector<ParamRef>& params);
  std::int64_t param_count() const { return kernel.size(); }
};

struct HeadGeometry {
  int image_size = 64;
  int stride = 4;
  double base() const { return 2.0 * stride; }
  double cell_cx(int col) const { return stride * (col + 0.5); }
  double cell_cy(int row) const { return stride * (row + 0.5); }
};

Tensor head_forward(Tape& tape, const HeadParams& head, const Tensor& fused);

/// Mean cross-entropy over all cells plus mean smooth-L1 (beta 1) over the
/// cells matched by center containment; offsets are normalized by the base
/// size. Boxes outside the image are a validation error.
Tensor detection_loss(Tape& tape, const Tensor& head_out, const std::vector<Annotation>& truth,
                      const HeadGeometry& geometry, int num_classes);

/// Decode offsets, clip to the image, drop below the score threshold, then
/// per-class greedy NMS (descending score, ties to the lower cell index).
std::vector<Detection> decode_and_nms(const Tensor& head_out, double score_threshold,
                                      double iou_threshold, const HeadGeometry& geometry,
                                      int num_classes, int max_detections = 100);

}  // namespace hmr
