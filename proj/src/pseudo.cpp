#include "tmrd/pseudo.hpp"

#include <algorithm>
#include <stdexcept>

namespace tmrd {

std::vector<Detection> detections_from_outputs(const DetectorConfig& cfg, const HeadOutputs& out,
                                               bool flip_applied) {
  const int g = cfg.grid;
  const std::size_t plane = static_cast<std::size_t>(g) * g;
  const int k = cfg.num_classes;
  const double width = static_cast<double>(cfg.image_size);

  const Tensor probs = softmax(out.class_logits, 0);
  const Tensor obj_prob = sigmoid(out.objectness);
  const auto& pv = probs.data();
  const auto& ov = obj_prob.data();
  const Tensor& final_boxes = out.boxes.back();
  const Tensor& final_spreads = out.spreads.back();
  const auto& bv = final_boxes.data();
  const auto& sv = final_spreads.data();

  std::vector<Detection> dets;
  dets.reserve(plane);
  for (std::size_t c = 0; c < plane; ++c) {
    Detection d;
    double best_p = pv[c];  // class 0
    int best_c = 0;
    for (int cl = 1; cl < k; ++cl) {
      const double p = pv[static_cast<std::size_t>(cl) * plane + c];
      if (p > best_p) {
        best_p = p;
        best_c = cl;
      }
    }
    d.class_id = best_c;
    d.score = ov[c] * best_p;
    Box b{bv[0 * plane + c], bv[1 * plane + c], bv[2 * plane + c], bv[3 * plane + c]};
    if (flip_applied) {
      const double x1 = width - b.x2;
      const double x2 = width - b.x1;
      b.x1 = x1;
      b.x2 = x2;
    }
    b.x1 = std::clamp(b.x1, 0.0, width);
    b.x2 = std::clamp(b.x2, 0.0, width);
    b.y1 = std::clamp(b.y1, 0.0, width);
    b.y2 = std::clamp(b.y2, 0.0, width);
    if (!(b.x1 < b.x2 && b.y1 < b.y2)) continue;
    d.box = b;
    for (int i = 0; i < 4; ++i) d.spread[static_cast<std::size_t>(i)] = sv[static_cast<std::size_t>(i) * plane + c];
    dets.push_back(d);
  }
  return dets;
}

std::vector<Detection> infer_teacher(const DetectorConfig& cfg, const ParameterSet& teacher,
                                     const Tensor& weak_image, bool flip_applied) {
  if (Tape::current() != nullptr && teacher.entries().front().second.requires_grad()) {
    throw std::runtime_error("infer_teacher: teacher must be in frozen-inference mode");
  }
  HeadOutputs out = forward(cfg, teacher, weak_image);
  return detections_from_outputs(cfg, out, flip_applied);
}

std::vector<PseudoLabel> filter_detections(std::vector<Detection> detections,
                                           double conf_threshold, double nms_iou) {
  if (!(conf_threshold >= 0.0 && conf_threshold <= 1.0) || !(nms_iou >= 0.0 && nms_iou <= 1.0)) {
    throw std::invalid_argument("filter_detections: thresholds must lie in [0,1]");
  }
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<PseudoLabel> kept;
  std::vector<Box> kept_boxes;
  for (const Detection& d : detections) {
    bool suppressed = false;
    for (const Box& kb : kept_boxes) {
      if (iou(d.box, kb) > nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (suppressed) continue;
    kept_boxes.push_back(d.box);
    if (d.score < conf_threshold) continue;
    PseudoLabel label;
    label.box = d.box;
    label.class_id = d.class_id;
    label.confidence = d.score;
    label.spread = d.spread;
    kept.push_back(label);
  }
  return kept;
}

}  // namespace tmrd
