#include "tmrd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tmrd {

const std::array<double, 10> kIouGrid = {0.50, 0.55, 0.60, 0.65, 0.70,
                                         0.75, 0.80, 0.85, 0.90, 0.95};

double iou(const Box& a, const Box& b) {
  if (a.area() <= 0.0 || b.area() <= 0.0) return 0.0;
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

namespace {

struct RankedDet {
  double score;
  int image;
  int index;  // position within the image's detection list, for stable ties
};

}  // namespace

double average_precision(const std::vector<EvalImage>& images, double iou_threshold) {
  std::size_t total_truths = 0;
  std::size_t total_dets = 0;
  for (const auto& img : images) {
    total_truths += img.truths.size();
    total_dets += img.detections.size();
  }
  if (total_truths == 0) return total_dets == 0 ? 1.0 : 0.0;

  std::vector<RankedDet> ranked;
  ranked.reserve(total_dets);
  for (int i = 0; i < static_cast<int>(images.size()); ++i)
    for (int d = 0; d < static_cast<int>(images[i].detections.size()); ++d)
      ranked.push_back({images[i].detections[d].score, i, d});
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedDet& a, const RankedDet& b) { return a.score > b.score; });

  std::vector<std::vector<char>> matched(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) matched[i].assign(images[i].truths.size(), 0);

  std::vector<double> precision, recall;
  precision.reserve(ranked.size());
  recall.reserve(ranked.size());
  std::size_t tp = 0, fp = 0;
  for (const auto& det : ranked) {
    const auto& img = images[static_cast<std::size_t>(det.image)];
    const Box& db = img.detections[static_cast<std::size_t>(det.index)].box;
    int best = -1;
    double best_iou = 0.0;
    for (int t = 0; t < static_cast<int>(img.truths.size()); ++t) {
      if (matched[static_cast<std::size_t>(det.image)][static_cast<std::size_t>(t)]) continue;
      const double v = iou(db, img.truths[static_cast<std::size_t>(t)].box);
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best = t;
      }
    }
    if (best >= 0) {
      matched[static_cast<std::size_t>(det.image)][static_cast<std::size_t>(best)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_truths));
  }

  // All-points interpolation: running max of precision from the right, then
  // the area under the stepwise curve over recall.
  double ap = 0.0;
  double running_max = 0.0;
  for (std::size_t i = precision.size(); i-- > 0;) {
    running_max = std::max(running_max, precision[i]);
    const double r_lo = i == 0 ? 0.0 : recall[i - 1];
    ap += (recall[i] - r_lo) * running_max;
  }
  return ap;
}

EvalResult evaluate_detections(const std::vector<EvalImage>& images, int num_classes) {
  EvalResult result;
  result.ap_per_class_per_iou.assign(static_cast<std::size_t>(num_classes), {});
  double ap50_acc = 0.0;
  double map_acc = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<EvalImage> class_images(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
      for (const auto& d : images[i].detections)
        if (d.class_id == c) class_images[i].detections.push_back(d);
      for (const auto& t : images[i].truths)
        if (t.class_id == c) class_images[i].truths.push_back(t);
    }
    for (std::size_t k = 0; k < kIouGrid.size(); ++k) {
      const double ap = average_precision(class_images, kIouGrid[k]);
      result.ap_per_class_per_iou[static_cast<std::size_t>(c)][k] = ap;
      map_acc += ap;
      if (k == 0) ap50_acc += ap;
    }
  }
  result.ap50 = ap50_acc / num_classes;
  result.map = map_acc / (num_classes * static_cast<double>(kIouGrid.size()));
  return result;
}

}  // namespace tmrd
