#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmrd/detector.hpp"
#include "tmrd/metrics.hpp"
#include "tmrd/params.hpp"
#include "tmrd/refine.hpp"
#include "tmrd/rng.hpp"
#include "tmrd/scenes.hpp"

namespace tmrd {

enum class TrainMode { Supervised, ClassicalEma, Tmr, TmrRd };

std::string mode_name(TrainMode mode);
TrainMode mode_from_name(const std::string& name);

enum class Stage { BurnIn, Ssl, TmrStage, Done };
std::string stage_name(Stage s);

struct TrainConfig {
  DetectorConfig det;
  AugmentConfig aug;

  TrainMode mode = TrainMode::TmrRd;
  bool cascade_enabled = true;
  bool uncertainty_enabled = true;

  // schedule; total_iters includes the burn-in prefix, then SSL/TMR cycles
  // of ssl_iters + tmr_iters
  int burn_in_iters = 300;
  int total_iters = 600;
  int ssl_iters = 40;   // N
  int tmr_iters = 20;   // N'

  double ema_alpha = 0.999;
  double burn_in_lr = 0.05;
  double student_lr = 0.02;  // xi
  double omega_lr = 0.02;    // gamma
  double lambda_teacher = 1.0;
  double lambda_student = 4.0;
  double lambda_unsup = 4.0;
  double lambda_rd = 1.0;
  // reproduce the published student update sign (ascends the combined
  // objective) instead of the descent form
  bool literal_update_rule = false;

  double conf_threshold = 0.7;
  double nms_iou = 0.5;
  bool pseudo_uncertainty = true;

  int labeled_batch = 8;
  int unlabeled_batch = 8;

  bool omega_per_tensor = false;
  bool omega_carry = false;

  std::uint64_t seed = 1;
  int eval_interval = 40;
  double eval_conf_threshold = 0.05;
  bool log_timing = false;

  // Throws listing every violated constraint; syncs det.cascade and
  // det.uncertainty with the enable flags.
  void validate_and_sync();
};

struct MetricsRow {
  int iteration = 0;
  Stage stage = Stage::BurnIn;
  std::optional<double> loss_sup;
  std::optional<double> loss_unsup;
  std::optional<double> loss_rd;
  std::optional<double> loss_tmr;
  std::optional<double> mean_repr_kl;
  std::optional<double> ap50;
  std::optional<double> map;
  std::optional<double> wall_seconds;
};

extern const char* const kMetricsHeader;
std::string metrics_row_csv(const MetricsRow& row);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

struct TrainState {
  ParameterSet teacher;
  ParameterSet student;
  ScalingSet omega_t;
  ScalingSet omega_s;
  int iteration = 0;  // completed iterations, global
  Rng rng;
  std::vector<MetricsRow> history;
  std::vector<std::string> stage_log;  // audit trail of TMR events
};

// Stage of the iteration about to execute (0-based index).
Stage stage_of_iteration(const TrainConfig& cfg, int iteration);

// Supervised-only pre-training of a single detector on labeled data.
// Returns the trained parameters (both models are duplicated from them).
ParameterSet burn_in(const TrainConfig& cfg, const std::vector<Scene>& labeled, Rng& rng,
                     std::vector<MetricsRow>* history = nullptr,
                     const std::vector<Scene>* eval_scenes = nullptr);

struct RunHooks {
  std::optional<int> save_at_iteration;
  std::string save_path;
};

// Runs the configured schedule end to end (or resumes a loaded state) and
// returns the final state with its metrics history.
TrainState run(const TrainConfig& cfg, const Dataset& data, const std::vector<Scene>& eval_scenes,
               std::optional<TrainState> resume = std::nullopt, const RunHooks& hooks = {});

// Teacher evaluation on labeled scenes: NMS + score cut, then COCO-style AP.
EvalResult evaluate_model(const DetectorConfig& cfg, const ParameterSet& params,
                          const std::vector<Scene>& scenes, double conf_threshold, double nms_iou);

// Mean KL(student || teacher) over identity views of probe scenes.
double mean_representation_kl(const DetectorConfig& cfg, const ParameterSet& teacher,
                              const ParameterSet& student, const std::vector<Scene>& probe);

// Checkpoint container ("TMRC"): bit-exact round trip of parameters,
// scalings, counters and RNG state, plus a config echo.
void save_checkpoint(const std::string& path, const TrainConfig& cfg, const TrainState& state);
struct Checkpoint {
  std::string config_echo;
  TrainState state;
};
Checkpoint load_checkpoint(const std::string& path);

struct TrainDivergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace tmrd
