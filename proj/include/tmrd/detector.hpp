#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "tmrd/metrics.hpp"
#include "tmrd/params.hpp"
#include "tmrd/rng.hpp"
#include "tmrd/tensor.hpp"

namespace tmrd {

// Dense-grid detector over 64x64 grayscale scenes: a two-stage conv
// backbone, a per-cell objectness logit, a (K+1)-way class head (index K is
// background), three cascaded box-refinement heads and one positive spread
// head per cascade stage. Cell k's stage-0 box is a fixed default box
// centered on the cell.
struct DetectorConfig {
  int image_size = 64;
  int num_classes = 3;  // K; the class head emits K+1 logits
  int c1 = 8;
  int c2 = 16;
  int grid = 16;
  double default_box_size = 16.0;
  double spread_min = 0.05;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double npll_rho = 0.25;
  // positive-assignment thresholds: the grid-level (objectness) threshold
  // and one per cascade stage
  double rpn_tau = 0.3;
  std::array<double, 3> tau = {0.5, 0.6, 0.7};
  bool cascade = true;      // false: single refinement stage
  bool uncertainty = true;  // false: spread heads excluded from losses

  int cell_stride() const { return image_size / grid; }
  int num_stages() const { return cascade ? 3 : 1; }
};

// Names and shapes of every layer, in fixed order.
std::vector<std::pair<std::string, std::vector<int>>> layer_spec(const DetectorConfig& cfg);

ParameterSet init_params(const DetectorConfig& cfg, Rng& rng);

// Leaf tensors for a ScalingSet, used as gradient targets by the TMR stage.
struct OmegaTensors {
  std::vector<std::pair<std::string, Tensor>> entries;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
};
OmegaTensors omega_leaves(const ScalingSet& omega, bool requires_grad);
void omega_store(const OmegaTensors& leaves, ScalingSet& omega);

// All head outputs for one image. Boxes are decoded to absolute image
// coordinates; spreads are strictly positive.
struct HeadOutputs {
  Tensor objectness;               // [1,G,G] logits
  Tensor class_logits;             // [K+1,G,G]
  std::vector<Tensor> boxes;       // per active stage, [4,G,G] (x1,y1,x2,y2)
  std::vector<Tensor> spreads;     // per active stage, [4,G,G]
  Tensor feat1, feat2;             // backbone stages, [C1,H/2,W/2], [C2,G,G]
};

// Runs the detector. When scaling is given, every weight and bias is
// channel-scaled by its omega before use.
HeadOutputs forward(const DetectorConfig& cfg, const ParameterSet& params, const Tensor& image,
                    const OmegaTensors* scaling = nullptr);

Tensor default_boxes(const DetectorConfig& cfg);  // [4,G,G]

// ---- scalar loss functions ----------------------------------------------

Tensor cross_entropy(const Tensor& logits, int target_class);
Tensor smooth_l1(const Tensor& pred, const Tensor& target);
Tensor focal_loss(const Tensor& prob_true_class, double alpha_f, double gamma_f);
// rho * (|target - pred| / spread + ln(2*spread)) summed over boundaries
Tensor npll_standin(const Tensor& pred_boundary, const Tensor& spread,
                    const Tensor& target_boundary, double rho);

// ---- assignment -----------------------------------------------------------

// cell_boxes: one box per grid cell (row-major). Returns the matched ground
// truth index per cell or -1; a cell is positive when its box reaches
// IoU >= tau with some truth. Ties: highest IoU, then lowest truth index.
std::vector<int> assign_cells(const std::vector<Box>& cell_boxes,
                              const std::vector<GroundTruth>& truths, double tau);

std::vector<Box> boxes_from_tensor(const Tensor& boxes);  // [4,G,G] -> G*G boxes

// ---- supervised loss ------------------------------------------------------

struct LossTerms {
  Tensor total;                     // scalar, on the active tape
  std::vector<std::string> names;   // parallel to values
  std::vector<double> values;
  double value_of(const std::string& name) const;
};

// The eleven-term loss over one already-forwarded image: grid-level focal
// objectness + grid-level box regression, then per cascade stage the
// classification, regression and spread terms under that stage's
// assignment. Classification terms average over all cells; regression and
// spread terms average over that stage's positive cells and are skipped
// when the stage has none.
LossTerms loss_from_outputs(const DetectorConfig& cfg, const HeadOutputs& out,
                            const std::vector<GroundTruth>& truths);

struct LabeledSample {
  Tensor image;
  std::vector<GroundTruth> objects;
};

// Mean of loss_from_outputs over a batch, running the forward pass itself.
LossTerms supervised_loss(const DetectorConfig& cfg, const ParameterSet& params,
                          const std::vector<LabeledSample>& batch,
                          const OmegaTensors* scaling = nullptr);

}  // namespace tmrd
