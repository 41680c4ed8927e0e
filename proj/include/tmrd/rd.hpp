#pragma once

#include <vector>

#include "tmrd/detector.hpp"
#include "tmrd/pseudo.hpp"

namespace tmrd {

// Channel-softmaxed backbone features of the last two stages. At every
// spatial location the channel probabilities sum to one.
struct ReprDist {
  Tensor level1;  // [C1,H/2,W/2]
  Tensor level2;  // [C2,G,G]
};

// Softmax over the channel axis of both backbone levels; a flipped view is
// spatially un-flipped before the softmax so distributions stay aligned
// with the un-flipped frame.
ReprDist representation_probs(const DetectorConfig& cfg, const ParameterSet& params,
                              const Tensor& image, bool flip_applied);

// Same, from feature maps that were already computed.
ReprDist repr_from_features(const Tensor& feat1, const Tensor& feat2, bool flip_applied);

// Asymmetric KL(student || teacher), averaged over spatial locations and
// the two levels. No gradient flows into the teacher distribution.
Tensor rd_loss(const ReprDist& student, const ReprDist& teacher);

// One student sample inside an SSL iteration.
struct UnlabeledSample {
  Tensor strong_image;                   // student input
  std::vector<PseudoLabel> pseudo;       // teacher labels, base frame
  ReprDist teacher_repr;                 // teacher on the weak view, no grad
};

struct StudentStepStats {
  double loss_unsup = 0.0;
  double loss_rd = 0.0;
  bool unsup_applied = false;
};

struct StudentStepConfig {
  double xi = 0.02;        // learning rate
  double lambda_u = 4.0;
  double lambda_d = 0.0;
  bool literal_update = false;  // ascend the combined objective instead
  bool pseudo_uncertainty = true;
};

// One gradient step on lambda_u*L_unsup - lambda_d*L_RD: the default
// descends the unsupervised term and ascends the disagreement term. With
// literal_update the step direction is reversed. An empty pseudo-label
// batch skips the unsupervised term; the RD term is always applied.
StudentStepStats student_step(const DetectorConfig& cfg, ParameterSet& theta_s,
                              const std::vector<UnlabeledSample>& batch,
                              const ParameterSet& teacher, const StudentStepConfig& step);

}  // namespace tmrd
