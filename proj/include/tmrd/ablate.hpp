#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tmrd/scenes.hpp"
#include "tmrd/trainer.hpp"

namespace tmrd {

// One ablation configuration: label plus the mechanism toggles. lambda_rd
// falls back to 0.5 (single-stage) or 1.0 (cascade) when unset.
struct AblationRow {
  std::string label;
  TrainMode mode = TrainMode::ClassicalEma;
  bool cascade = false;
  bool uncertainty = false;
  std::optional<double> lambda_rd;
};

struct AblationSpec {
  std::vector<AblationRow> rows;
};

// Spec file: one row per line, "label, mode, cascade, uncertainty[, lambda_rd]",
// '#' comments allowed. Labels must be unique.
AblationSpec parse_ablation_spec_text(const std::string& text);
AblationSpec parse_ablation_spec(const std::string& path);

TrainConfig config_for_row(const TrainConfig& base, const AblationRow& row);

struct AblationOutcome {
  AblationRow row;
  bool ok = false;
  std::string error;
  double ap50 = 0.0;
  double map = 0.0;
};

// Runs every row against the shared dataset/eval split. Rows sharing a
// (cascade, uncertainty) combination reuse one burn-in; the SSL/TMR phases
// run on up to max_threads worker threads (TMRD_THREADS caps this).
std::vector<AblationOutcome> run_ablation(const TrainConfig& base, const AblationSpec& spec,
                                          const Dataset& data, const std::vector<Scene>& eval_scenes,
                                          int max_threads);

// Checkmark-matrix table: one indicator column per mechanism.
std::string ablation_table_text(const std::vector<AblationOutcome>& outcomes);
std::string ablation_table_csv(const std::vector<AblationOutcome>& outcomes);

int ablation_threads_from_env(int rows);

}  // namespace tmrd
