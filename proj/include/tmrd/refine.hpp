#pragma once

#include <functional>
#include <vector>

#include "tmrd/detector.hpp"
#include "tmrd/params.hpp"

namespace tmrd {

struct EmaConfig {
  double alpha = 0.999;
};

// theta_t' = alpha*theta_t + (1-alpha)*theta_s, elementwise.
ParameterSet ema_step(const ParameterSet& theta_t, const ParameterSet& theta_s, double alpha);

// Closed form after n steps: alpha^n*theta_t0 + (1-alpha)*sum_k
// alpha^(n-1-k)*history[k]. history[k] is the student at step k.
ParameterSet ema_unrolled(const ParameterSet& theta_t0,
                          const std::vector<ParameterSet>& student_history, double alpha, int n);

// lambda_t * L_sc(theta_t scaled by omega_t) + lambda_s * L_sc(theta_s
// scaled by omega_s) on one strongly-augmented labeled batch. Weights are
// frozen; the omega leaves are the only gradient targets.
struct TmrLoss {
  Tensor total;
  double teacher_term = 0.0;
  double student_term = 0.0;
};
TmrLoss tmr_loss(const DetectorConfig& cfg, const ParameterSet& theta_t, OmegaTensors& omega_t,
                 const ParameterSet& theta_s, OmegaTensors& omega_s,
                 const std::vector<LabeledSample>& batch, double lambda_t, double lambda_s);

// One Eq.-style descent step on scaling leaves: omega -= gamma * grad,
// written back to the set and clamped to [kOmegaFloor, 1].
void omega_apply_step(OmegaTensors& leaves, ScalingSet& target, double gamma);

// n_prime clamped SGD steps on both scaling sets; weights untouched.
// next_batch supplies one strongly-augmented labeled batch per step.
std::vector<double> tmr_optimize(const DetectorConfig& cfg, const ParameterSet& theta_t,
                                 const ParameterSet& theta_s, ScalingSet& omega_t,
                                 ScalingSet& omega_s,
                                 const std::function<std::vector<LabeledSample>()>& next_batch,
                                 double gamma, int n_prime, double lambda_t, double lambda_s);

// Per-channel convex mixing with m = omega_t / (omega_t + omega_s):
//   theta_t' = m*theta_t + (1-m)*theta_s
//   theta_s' = (1-m)*theta_t + m*theta_s
struct RefineResult {
  ParameterSet teacher;
  ParameterSet student;
};
RefineResult refine_weights(const ParameterSet& theta_t, const ParameterSet& theta_s,
                            const ScalingSet& omega_t, const ScalingSet& omega_s);

}  // namespace tmrd
