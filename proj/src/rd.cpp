#include "tmrd/rd.hpp"

#include <cmath>
#include <stdexcept>

namespace tmrd {

ReprDist repr_from_features(const Tensor& feat1, const Tensor& feat2, bool flip_applied) {
  ReprDist out;
  Tensor f1 = flip_applied ? hflip(feat1) : feat1;
  Tensor f2 = flip_applied ? hflip(feat2) : feat2;
  out.level1 = softmax(f1, 0);
  out.level2 = softmax(f2, 0);
  return out;
}

ReprDist representation_probs(const DetectorConfig& cfg, const ParameterSet& params,
                              const Tensor& image, bool flip_applied) {
  HeadOutputs out = forward(cfg, params, image);
  return repr_from_features(out.feat1, out.feat2, flip_applied);
}

namespace {

Tensor level_kl(const Tensor& p_s, const Tensor& p_t) {
  if (p_s.shape() != p_t.shape()) {
    throw std::invalid_argument("rd_loss: distribution shapes differ, " + shape_str(p_s.shape()) +
                                " vs " + shape_str(p_t.shape()));
  }
  // teacher side enters as plain data so no gradient can reach it
  Tensor log_p_t = Tensor::from_data(p_t.shape(), [&] {
    std::vector<double> v = p_t.data();
    for (double& x : v) x = std::log(x);
    return v;
  }());
  Tensor per_entry = mul(p_s, sub(log(p_s), log_p_t));
  const double locations = static_cast<double>(p_s.dim(1)) * p_s.dim(2);
  return mul_scalar(sum(per_entry), 1.0 / locations);
}

}  // namespace

Tensor rd_loss(const ReprDist& student, const ReprDist& teacher) {
  Tensor l1 = level_kl(student.level1, teacher.level1);
  Tensor l2 = level_kl(student.level2, teacher.level2);
  return mul_scalar(add(l1, l2), 0.5);
}

StudentStepStats student_step(const DetectorConfig& cfg, ParameterSet& theta_s,
                              const std::vector<UnlabeledSample>& batch,
                              const ParameterSet& teacher, const StudentStepConfig& step) {
  if (batch.empty()) throw std::invalid_argument("student_step: batch is empty");
  if (!(step.xi > 0.0)) throw std::invalid_argument("student_step: xi must be positive");
  for (const auto& [name, t] : teacher.entries()) {
    if (t.requires_grad()) {
      throw std::runtime_error("student_step: teacher parameters must not require gradients");
    }
  }

  std::size_t total_pseudo = 0;
  for (const auto& s : batch) total_pseudo += s.pseudo.size();
  const bool use_unsup = total_pseudo > 0;
  const bool use_rd = step.lambda_d != 0.0;

  StudentStepStats stats;
  if (!use_unsup && !use_rd) return stats;

  DetectorConfig unsup_cfg = cfg;
  if (!step.pseudo_uncertainty) unsup_cfg.uncertainty = false;

  theta_s.set_requires_grad(true);
  Tape tape;
  Tensor unsup_total, rd_total;
  for (const auto& sample : batch) {
    HeadOutputs out = forward(unsup_cfg, theta_s, sample.strong_image);
    if (use_unsup) {
      std::vector<GroundTruth> truths;
      truths.reserve(sample.pseudo.size());
      for (const auto& p : sample.pseudo) truths.push_back({p.box, p.class_id});
      LossTerms terms = loss_from_outputs(unsup_cfg, out, truths);
      unsup_total = unsup_total.defined() ? add(unsup_total, terms.total) : terms.total;
    }
    if (use_rd) {
      ReprDist student_repr = repr_from_features(out.feat1, out.feat2, false);
      Tensor kl = rd_loss(student_repr, sample.teacher_repr);
      rd_total = rd_total.defined() ? add(rd_total, kl) : kl;
    }
  }

  const double inv = 1.0 / static_cast<double>(batch.size());
  Tensor objective;
  if (use_unsup) {
    unsup_total = mul_scalar(unsup_total, inv);
    stats.loss_unsup = unsup_total.value();
    stats.unsup_applied = true;
    objective = mul_scalar(unsup_total, step.lambda_u);
  }
  if (use_rd) {
    rd_total = mul_scalar(rd_total, inv);
    stats.loss_rd = rd_total.value();
    Tensor weighted = mul_scalar(rd_total, -step.lambda_d);
    objective = objective.defined() ? add(objective, weighted) : weighted;
  }
  if (!std::isfinite(objective.value())) {
    throw std::runtime_error("student_step: non-finite objective");
  }
  tape.backward(objective);
  // default: descend lambda_u*L_unsup - lambda_d*L_RD; the literal variant
  // ascends it instead
  theta_s.sgd_step(step.literal_update ? -step.xi : step.xi);
  theta_s.zero_grads();
  theta_s.set_requires_grad(false);
  return stats;
}

}  // namespace tmrd
