#pragma once

#include <array>
#include <vector>

#include "tmrd/detector.hpp"
#include "tmrd/metrics.hpp"

namespace tmrd {

// Raw teacher prediction for one grid cell, in the un-flipped base frame.
struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;              // objectness * best class probability
  std::array<double, 4> spread{};  // per-boundary spread of the final stage
};

// Filtered teacher detection used to supervise the student.
struct PseudoLabel {
  Box box;
  int class_id = 0;
  double confidence = 0.0;
  std::array<double, 4> spread{};
};

// Per-cell detections from head outputs that were already computed. Boxes
// are clipped to the image and mapped back through the recorded flip; cells
// whose final box degenerates are dropped.
std::vector<Detection> detections_from_outputs(const DetectorConfig& cfg, const HeadOutputs& out,
                                               bool flip_applied);

// Dense per-cell detections from a frozen teacher on a weak view.
std::vector<Detection> infer_teacher(const DetectorConfig& cfg, const ParameterSet& teacher,
                                     const Tensor& weak_image, bool flip_applied);

// Greedy score-descending NMS at nms_iou, then the confidence cut.
std::vector<PseudoLabel> filter_detections(std::vector<Detection> detections,
                                           double conf_threshold, double nms_iou);

}  // namespace tmrd
