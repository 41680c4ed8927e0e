#include "tmrd/detector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tmrd {

std::vector<std::pair<std::string, std::vector<int>>> layer_spec(const DetectorConfig& cfg) {
  const int kp1 = cfg.num_classes + 1;
  std::vector<std::pair<std::string, std::vector<int>>> spec = {
      {"backbone.conv1.weight", {cfg.c1, 1, 3, 3}},
      {"backbone.conv1.bias", {cfg.c1}},
      {"backbone.conv2.weight", {cfg.c2, cfg.c1, 3, 3}},
      {"backbone.conv2.bias", {cfg.c2}},
      {"head.obj.weight", {1, cfg.c2, 3, 3}},
      {"head.obj.bias", {1}},
      {"head.cls.weight", {kp1, cfg.c2, 3, 3}},
      {"head.cls.bias", {kp1}},
  };
  for (int k = 1; k <= 3; ++k) {
    spec.push_back({"head.box" + std::to_string(k) + ".weight", {4, cfg.c2, 3, 3}});
    spec.push_back({"head.box" + std::to_string(k) + ".bias", {4}});
    spec.push_back({"head.unc" + std::to_string(k) + ".weight", {4, cfg.c2, 3, 3}});
    spec.push_back({"head.unc" + std::to_string(k) + ".bias", {4}});
  }
  return spec;
}

ParameterSet init_params(const DetectorConfig& cfg, Rng& rng) {
  ParameterSet params;
  for (const auto& [name, shape] : layer_spec(cfg)) {
    std::int64_t numel = 1;
    for (int e : shape) numel *= e;
    std::vector<double> data(static_cast<std::size_t>(numel));
    if (shape.size() == 1) {
      // biases start at zero
      std::fill(data.begin(), data.end(), 0.0);
    } else {
      std::int64_t fan_in = 1;
      for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
      double bound = std::sqrt(2.0 / static_cast<double>(fan_in));
      // box/spread heads start near zero so stage-1 boxes begin at the
      // default boxes and spreads near softplus(0)
      if (name.rfind("head.box", 0) == 0 || name.rfind("head.unc", 0) == 0) bound *= 0.1;
      for (double& v : data) v = rng.uniform(-bound, bound);
    }
    params.add(name, Tensor::from_data(shape, std::move(data)));
  }
  return params;
}

Tensor& OmegaTensors::at(const std::string& name) {
  for (auto& e : entries)
    if (e.first == name) return e.second;
  throw std::out_of_range("OmegaTensors: no entry named '" + name + "'");
}

const Tensor& OmegaTensors::at(const std::string& name) const {
  for (const auto& e : entries)
    if (e.first == name) return e.second;
  throw std::out_of_range("OmegaTensors: no entry named '" + name + "'");
}

OmegaTensors omega_leaves(const ScalingSet& omega, bool requires_grad) {
  OmegaTensors out;
  for (const auto& [name, coeffs] : omega.entries()) {
    Tensor t = Tensor::from_data({static_cast<int>(coeffs.size())}, coeffs);
    t.set_requires_grad(requires_grad);
    out.entries.emplace_back(name, std::move(t));
  }
  return out;
}

void omega_store(const OmegaTensors& leaves, ScalingSet& omega) {
  if (leaves.entries.size() != omega.size()) {
    throw std::invalid_argument("omega_store: entry count mismatch");
  }
  for (std::size_t i = 0; i < leaves.entries.size(); ++i) {
    omega.entries()[i].second = leaves.entries[i].second.data();
  }
}

namespace {

// Weight lookup that applies the per-channel scaling when present.
struct WeightSource {
  const ParameterSet& params;
  const OmegaTensors* scaling;

  Tensor get(const std::string& name) const {
    const Tensor& w = params.at(name);
    if (!scaling) return w;
    return channel_scale(w, scaling->at(name));
  }
};

}  // namespace

Tensor default_boxes(const DetectorConfig& cfg) {
  const int g = cfg.grid;
  const double stride = static_cast<double>(cfg.cell_stride());
  const double half = 0.5 * cfg.default_box_size;
  std::vector<double> data(static_cast<std::size_t>(4) * g * g);
  for (int y = 0; y < g; ++y)
    for (int x = 0; x < g; ++x) {
      const double cx = (x + 0.5) * stride;
      const double cy = (y + 0.5) * stride;
      const std::size_t cell = static_cast<std::size_t>(y) * g + x;
      const std::size_t plane = static_cast<std::size_t>(g) * g;
      data[0 * plane + cell] = cx - half;
      data[1 * plane + cell] = cy - half;
      data[2 * plane + cell] = cx + half;
      data[3 * plane + cell] = cy + half;
    }
  return Tensor::from_data({4, g, g}, std::move(data));
}

HeadOutputs forward(const DetectorConfig& cfg, const ParameterSet& params, const Tensor& image,
                    const OmegaTensors* scaling) {
  if (image.shape() != std::vector<int>{1, cfg.image_size, cfg.image_size}) {
    throw std::invalid_argument("forward: image shape " + shape_str(image.shape()) +
                                " does not match configured [1," + std::to_string(cfg.image_size) +
                                "," + std::to_string(cfg.image_size) + "]");
  }
  if (scaling && scaling->entries.size() != params.size()) {
    throw std::invalid_argument("forward: scaling set does not align with parameters");
  }
  WeightSource w{params, scaling};

  HeadOutputs out;
  Tensor x1 = maxpool2(relu(conv2d(image, w.get("backbone.conv1.weight"), w.get("backbone.conv1.bias"))));
  Tensor x2 = maxpool2(relu(conv2d(x1, w.get("backbone.conv2.weight"), w.get("backbone.conv2.bias"))));
  out.feat1 = x1;
  out.feat2 = x2;

  out.objectness = conv2d(x2, w.get("head.obj.weight"), w.get("head.obj.bias"));
  out.class_logits = conv2d(x2, w.get("head.cls.weight"), w.get("head.cls.bias"));

  Tensor prev = default_boxes(cfg);
  for (int k = 1; k <= cfg.num_stages(); ++k) {
    const std::string ks = std::to_string(k);
    Tensor delta = conv2d(x2, w.get("head.box" + ks + ".weight"), w.get("head.box" + ks + ".bias"));
    Tensor box = add(prev, delta);
    Tensor spread;
    if (cfg.uncertainty) {
      spread = add_scalar(
          softplus(conv2d(x2, w.get("head.unc" + ks + ".weight"), w.get("head.unc" + ks + ".bias"))),
          cfg.spread_min);
    } else {
      spread = Tensor::full({4, cfg.grid, cfg.grid}, 1.0);
    }
    out.boxes.push_back(box);
    out.spreads.push_back(spread);
    prev = box;
  }
  return out;
}

// ---- scalar losses --------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, int target_class) {
  if (logits.shape().size() != 1) {
    throw std::invalid_argument("cross_entropy: logits must be rank-1");
  }
  if (target_class < 0 || target_class >= logits.dim(0)) {
    throw std::invalid_argument("cross_entropy: target class " + std::to_string(target_class) +
                                " out of range [0," + std::to_string(logits.dim(0)) + ")");
  }
  Tensor log_probs = log(softmax(logits, 0));
  std::vector<double> onehot(static_cast<std::size_t>(logits.dim(0)), 0.0);
  onehot[static_cast<std::size_t>(target_class)] = 1.0;
  return neg(sum(mul(log_probs, Tensor::from_data(logits.shape(), std::move(onehot)))));
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument("smooth_l1: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                shape_str(target.shape()));
  }
  return sum(smooth_l1_elem(sub(pred, target)));
}

Tensor focal_loss(const Tensor& prob_true_class, double alpha_f, double gamma_f) {
  for (double p : prob_true_class.data()) {
    if (!(p > 0.0 && p <= 1.0)) {
      throw std::invalid_argument("focal_loss: probability must lie in (0,1], got " + std::to_string(p));
    }
  }
  Tensor one_minus = add_scalar(neg(prob_true_class), 1.0);
  Tensor weight = pow_scalar(one_minus, gamma_f);
  return mul_scalar(sum(mul(weight, log(prob_true_class))), -alpha_f);
}

Tensor npll_standin(const Tensor& pred_boundary, const Tensor& spread,
                    const Tensor& target_boundary, double rho) {
  if (pred_boundary.shape() != spread.shape() || pred_boundary.shape() != target_boundary.shape()) {
    throw std::invalid_argument("npll_standin: shape mismatch");
  }
  if (!(rho > 0.0 && rho <= 1.0)) {
    throw std::invalid_argument("npll_standin: rho must lie in (0,1]");
  }
  for (double s : spread.data()) {
    if (s <= 0.0) throw std::invalid_argument("npll_standin: spread must be positive");
  }
  Tensor resid = div(abs(sub(target_boundary, pred_boundary)), spread);
  Tensor log_term = log(mul_scalar(spread, 2.0));
  return mul_scalar(sum(add(resid, log_term)), rho);
}

// ---- assignment -----------------------------------------------------------

std::vector<int> assign_cells(const std::vector<Box>& cell_boxes,
                              const std::vector<GroundTruth>& truths, double tau) {
  std::vector<int> matched(cell_boxes.size(), -1);
  for (std::size_t c = 0; c < cell_boxes.size(); ++c) {
    double best_iou = 0.0;
    int best = -1;
    for (int t = 0; t < static_cast<int>(truths.size()); ++t) {
      const double v = iou(cell_boxes[c], truths[static_cast<std::size_t>(t)].box);
      if (v >= tau && v > best_iou) {
        best_iou = v;
        best = t;
      }
    }
    matched[c] = best;
  }
  return matched;
}

std::vector<Box> boxes_from_tensor(const Tensor& boxes) {
  const int g = boxes.dim(1);
  const std::size_t plane = static_cast<std::size_t>(g) * boxes.dim(2);
  const auto& v = boxes.data();
  std::vector<Box> out(plane);
  for (std::size_t c = 0; c < plane; ++c) {
    out[c] = Box{v[0 * plane + c], v[1 * plane + c], v[2 * plane + c], v[3 * plane + c]};
  }
  return out;
}

// ---- supervised loss ------------------------------------------------------

double LossTerms::value_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return values[i];
  throw std::out_of_range("LossTerms: no term named '" + name + "'");
}

namespace {

// Focal classification over all cells: positives target the objectness
// probability, negatives its complement.
Tensor objectness_focal_term(const DetectorConfig& cfg, const Tensor& objectness,
                             const std::vector<int>& assignment) {
  const int cells = cfg.grid * cfg.grid;
  std::vector<double> pos(static_cast<std::size_t>(cells)), negm(static_cast<std::size_t>(cells));
  for (int c = 0; c < cells; ++c) {
    pos[static_cast<std::size_t>(c)] = assignment[static_cast<std::size_t>(c)] >= 0 ? 1.0 : 0.0;
    negm[static_cast<std::size_t>(c)] = 1.0 - pos[static_cast<std::size_t>(c)];
  }
  Tensor flat = reshape(objectness, {cells});
  Tensor p = sigmoid(flat);
  Tensor pos_mask = Tensor::from_data({cells}, std::move(pos));
  Tensor neg_mask = Tensor::from_data({cells}, std::move(negm));
  Tensor p_true = add(mul(p, pos_mask), mul(add_scalar(neg(p), 1.0), neg_mask));
  Tensor weight = pow_scalar(add_scalar(neg(p_true), 1.0), cfg.focal_gamma);
  Tensor per_cell = mul_scalar(mul(weight, log(p_true)), -cfg.focal_alpha);
  return mean(per_cell);
}

// Cross entropy against the stage's class-or-background target, averaged
// over all cells.
Tensor class_term(const DetectorConfig& cfg, const Tensor& class_logits,
                  const std::vector<int>& assignment, const std::vector<GroundTruth>& truths) {
  const int g = cfg.grid;
  const int kp1 = cfg.num_classes + 1;
  const std::size_t plane = static_cast<std::size_t>(g) * g;
  std::vector<double> onehot(static_cast<std::size_t>(kp1) * plane, 0.0);
  for (std::size_t c = 0; c < plane; ++c) {
    const int t = assignment[c];
    const int cls = t >= 0 ? truths[static_cast<std::size_t>(t)].class_id : cfg.num_classes;
    onehot[static_cast<std::size_t>(cls) * plane + c] = 1.0;
  }
  Tensor log_probs = log(softmax(class_logits, 0));
  Tensor mask = Tensor::from_data({kp1, g, g}, std::move(onehot));
  return mul_scalar(neg(sum(mul(log_probs, mask))), 1.0 / static_cast<double>(plane));
}

struct StageMasks {
  Tensor pos4;     // [4,G,G] 1 on positive cells
  Tensor target4;  // [4,G,G] matched truth boundaries (zero elsewhere)
  int n_pos = 0;
};

StageMasks stage_masks(const DetectorConfig& cfg, const std::vector<int>& assignment,
                       const std::vector<GroundTruth>& truths) {
  const int g = cfg.grid;
  const std::size_t plane = static_cast<std::size_t>(g) * g;
  std::vector<double> mask(4 * plane, 0.0), target(4 * plane, 0.0);
  StageMasks out;
  for (std::size_t c = 0; c < plane; ++c) {
    const int t = assignment[c];
    if (t < 0) continue;
    ++out.n_pos;
    const Box& b = truths[static_cast<std::size_t>(t)].box;
    const double coords[4] = {b.x1, b.y1, b.x2, b.y2};
    for (int k = 0; k < 4; ++k) {
      mask[static_cast<std::size_t>(k) * plane + c] = 1.0;
      target[static_cast<std::size_t>(k) * plane + c] = coords[k];
    }
  }
  out.pos4 = Tensor::from_data({4, g, g}, std::move(mask));
  out.target4 = Tensor::from_data({4, g, g}, std::move(target));
  return out;
}

Tensor masked_box_term(const Tensor& boxes, const StageMasks& m) {
  Tensor diff = smooth_l1_elem(sub(boxes, m.target4));
  return mul_scalar(sum(mul(diff, m.pos4)), 1.0 / static_cast<double>(m.n_pos));
}

Tensor masked_spread_term(const DetectorConfig& cfg, const Tensor& boxes, const Tensor& spreads,
                          const StageMasks& m) {
  Tensor resid = div(abs(sub(m.target4, boxes)), spreads);
  Tensor log_term = log(mul_scalar(spreads, 2.0));
  Tensor per = add(resid, log_term);
  return mul_scalar(sum(mul(per, m.pos4)), cfg.npll_rho / static_cast<double>(m.n_pos));
}

}  // namespace

LossTerms loss_from_outputs(const DetectorConfig& cfg, const HeadOutputs& out,
                            const std::vector<GroundTruth>& truths) {
  if (static_cast<int>(out.boxes.size()) != cfg.num_stages()) {
    throw std::invalid_argument("loss_from_outputs: outputs carry " +
                                std::to_string(out.boxes.size()) + " stages, config expects " +
                                std::to_string(cfg.num_stages()));
  }
  LossTerms terms;
  std::vector<Tensor> pieces;
  auto push = [&](const std::string& name, const Tensor& t) {
    terms.names.push_back(name);
    terms.values.push_back(t.value());
    pieces.push_back(t);
  };
  auto push_zero = [&](const std::string& name) {
    terms.names.push_back(name);
    terms.values.push_back(0.0);
  };

  const std::vector<Box> defaults = boxes_from_tensor(default_boxes(cfg));

  // grid-level pair: focal objectness plus first-stage regression at the
  // looser grid threshold
  const std::vector<int> rpn_assign = assign_cells(defaults, truths, cfg.rpn_tau);
  push("obj_cls", objectness_focal_term(cfg, out.objectness, rpn_assign));
  {
    StageMasks m = stage_masks(cfg, rpn_assign, truths);
    if (m.n_pos > 0) {
      push("obj_reg", masked_box_term(out.boxes[0], m));
    } else {
      push_zero("obj_reg");
    }
  }

  // cascade stages: assignment k uses the previous stage's boxes
  std::vector<Box> prev = defaults;
  for (int k = 0; k < cfg.num_stages(); ++k) {
    const std::string ks = std::to_string(k + 1);
    const std::vector<int> assign = assign_cells(prev, truths, cfg.tau[static_cast<std::size_t>(k)]);
    push("cls" + ks, class_term(cfg, out.class_logits, assign, truths));
    StageMasks m = stage_masks(cfg, assign, truths);
    if (m.n_pos > 0) {
      push("reg" + ks, masked_box_term(out.boxes[static_cast<std::size_t>(k)], m));
      if (cfg.uncertainty) {
        push("unc" + ks, masked_spread_term(cfg, out.boxes[static_cast<std::size_t>(k)],
                                            out.spreads[static_cast<std::size_t>(k)], m));
      } else {
        push_zero("unc" + ks);
      }
    } else {
      push_zero("reg" + ks);
      push_zero("unc" + ks);
    }
    prev = boxes_from_tensor(out.boxes[static_cast<std::size_t>(k)]);
  }

  Tensor total = pieces.front();
  for (std::size_t i = 1; i < pieces.size(); ++i) total = add(total, pieces[i]);
  terms.total = total;
  return terms;
}

LossTerms supervised_loss(const DetectorConfig& cfg, const ParameterSet& params,
                          const std::vector<LabeledSample>& batch, const OmegaTensors* scaling) {
  if (batch.empty()) throw std::invalid_argument("supervised_loss: batch is empty");
  LossTerms agg;
  Tensor total;
  for (const auto& sample : batch) {
    HeadOutputs out = forward(cfg, params, sample.image, scaling);
    LossTerms terms = loss_from_outputs(cfg, out, sample.objects);
    if (agg.names.empty()) {
      agg.names = terms.names;
      agg.values = terms.values;
      total = terms.total;
    } else {
      for (std::size_t i = 0; i < agg.values.size(); ++i) agg.values[i] += terms.values[i];
      total = add(total, terms.total);
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (double& v : agg.values) v *= inv;
  agg.total = mul_scalar(total, inv);
  return agg;
}

}  // namespace tmrd
