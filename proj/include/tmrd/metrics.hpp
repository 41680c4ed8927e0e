#pragma once

#include <array>
#include <vector>

namespace tmrd {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
};

// Intersection over union; degenerate (non-positive area) boxes score 0.
double iou(const Box& a, const Box& b);

struct ScoredBox {
  Box box;
  int class_id = 0;
  double score = 0.0;
};

struct GroundTruth {
  Box box;
  int class_id = 0;
};

// One evaluated image: detections paired with its ground truths.
struct EvalImage {
  std::vector<ScoredBox> detections;
  std::vector<GroundTruth> truths;
};

// All-points interpolated average precision at one IoU threshold over a set
// of images, for detections/truths of a single class. Matching is greedy by
// descending score; each truth matches at most once; ties on IoU go to the
// lower truth index. No truths and no detections scores 1; no truths with
// any detection scores 0.
double average_precision(const std::vector<EvalImage>& images, double iou_threshold);

struct EvalResult {
  // ap[class][threshold index] over IoU 0.50:0.05:0.95
  std::vector<std::array<double, 10>> ap_per_class_per_iou;
  double ap50 = 0.0;
  double map = 0.0;
};

extern const std::array<double, 10> kIouGrid;

// Per-class AP over the COCO IoU grid plus the ap50 / map aggregates.
// images hold detections for all classes; they are split per class here.
EvalResult evaluate_detections(const std::vector<EvalImage>& images, int num_classes);

}  // namespace tmrd
