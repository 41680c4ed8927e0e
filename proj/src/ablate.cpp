#include "tmrd/ablate.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>

namespace tmrd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(trim(cur));
  return out;
}

bool parse_flag(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

}  // namespace

AblationSpec parse_ablation_spec_text(const std::string& text) {
  AblationSpec spec;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  std::vector<std::string> errors;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto fields = split_commas(line);
    if (fields.size() < 4 || fields.size() > 5) {
      errors.push_back("line " + std::to_string(lineno) +
                       ": expected 'label, mode, cascade, uncertainty[, lambda_rd]'");
      continue;
    }
    try {
      AblationRow row;
      row.label = fields[0];
      row.mode = mode_from_name(fields[1]);
      row.cascade = parse_flag(fields[2]);
      row.uncertainty = parse_flag(fields[3]);
      if (fields.size() == 5) row.lambda_rd = std::stod(fields[4]);
      if (row.label.empty()) throw std::invalid_argument("empty label");
      for (const auto& r : spec.rows) {
        if (r.label == row.label) throw std::invalid_argument("duplicate label '" + row.label + "'");
      }
      spec.rows.push_back(std::move(row));
    } catch (const std::exception& e) {
      errors.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg = "bad ablation spec:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
  if (spec.rows.empty()) throw std::invalid_argument("ablation spec contains no rows");
  return spec;
}

AblationSpec parse_ablation_spec(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open ablation spec '" + path + "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_ablation_spec_text(buf.str());
}

TrainConfig config_for_row(const TrainConfig& base, const AblationRow& row) {
  TrainConfig cfg = base;
  cfg.mode = row.mode;
  cfg.cascade_enabled = row.cascade;
  cfg.uncertainty_enabled = row.uncertainty;
  cfg.lambda_rd = row.lambda_rd ? *row.lambda_rd : (row.cascade ? 1.0 : 0.5);
  cfg.validate_and_sync();
  return cfg;
}

int ablation_threads_from_env(int rows) {
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads < 1) threads = 1;
  if (const char* env = std::getenv("TMRD_THREADS")) {
    try {
      threads = std::max(1, std::stoi(env));
    } catch (...) {
      throw std::invalid_argument("TMRD_THREADS must be an integer, got '" + std::string(env) + "'");
    }
  }
  return std::min(threads, std::max(1, rows));
}

std::vector<AblationOutcome> run_ablation(const TrainConfig& base, const AblationSpec& spec,
                                          const Dataset& data, const std::vector<Scene>& eval_scenes,
                                          int max_threads) {
  // burn-in is mode-independent, so rows sharing the loss wiring share one
  // prefix state
  std::map<std::pair<bool, bool>, TrainState> burn_ins;
  for (const auto& row : spec.rows) {
    const auto key = std::make_pair(row.cascade, row.uncertainty);
    if (burn_ins.count(key)) continue;
    TrainConfig cfg = config_for_row(base, row);
    cfg.mode = TrainMode::Supervised;
    cfg.total_iters = cfg.burn_in_iters;
    burn_ins.emplace(key, run(cfg, data, {}));
  }

  std::vector<AblationOutcome> outcomes(spec.rows.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= spec.rows.size()) return;
      AblationOutcome& out = outcomes[i];
      out.row = spec.rows[i];
      try {
        TrainConfig cfg = config_for_row(base, spec.rows[i]);
        TrainState start = burn_ins.at(std::make_pair(cfg.cascade_enabled, cfg.uncertainty_enabled));
        TrainState state = run(cfg, data, eval_scenes, std::move(start));
        EvalResult ev = evaluate_model(cfg.det, state.teacher, eval_scenes,
                                       cfg.eval_conf_threshold, cfg.nms_iou);
        out.ap50 = ev.ap50;
        out.map = ev.map;
        out.ok = true;
      } catch (const std::exception& e) {
        out.ok = false;
        out.error = e.what();
      }
    }
  };

  const int threads = std::max(1, std::min<int>(max_threads, static_cast<int>(spec.rows.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return outcomes;
}

namespace {

const char* mark(bool on) { return on ? "x" : "-"; }

struct RowMarks {
  bool v1, v2, cema, tmr, rd, cascade;
};

RowMarks marks_of(const AblationRow& row) {
  RowMarks m{};
  m.v1 = !row.uncertainty;
  m.v2 = row.uncertainty;
  m.cema = row.mode == TrainMode::ClassicalEma;
  m.tmr = row.mode == TrainMode::Tmr || row.mode == TrainMode::TmrRd;
  m.rd = row.mode == TrainMode::TmrRd;
  m.cascade = row.cascade;
  if (row.mode == TrainMode::Supervised) m.v1 = m.v2 = false;
  return m;
}

}  // namespace

std::string ablation_table_text(const std::vector<AblationOutcome>& outcomes) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "Abl." << std::setw(5) << "A1" << std::setw(5) << "A2"
     << std::setw(6) << "cEMA" << std::setw(5) << "TMR" << std::setw(5) << "RD" << std::setw(11)
     << "c-regress" << std::right << std::setw(9) << "AP50" << std::setw(9) << "mAP" << "\n";
  os << std::string(65, '-') << "\n";
  for (const auto& out : outcomes) {
    const RowMarks m = marks_of(out.row);
    os << std::left << std::setw(10) << out.row.label << std::setw(5) << mark(m.v1) << std::setw(5)
       << mark(m.v2) << std::setw(6) << mark(m.cema) << std::setw(5) << mark(m.tmr) << std::setw(5)
       << mark(m.rd) << std::setw(11) << mark(m.cascade);
    if (out.ok) {
      os << std::right << std::fixed << std::setprecision(4) << std::setw(9) << out.ap50
         << std::setw(9) << out.map;
      os.unsetf(std::ios::fixed);
    } else {
      os << std::right << std::setw(9) << "FAILED" << std::setw(9) << "-";
    }
    os << "\n";
  }
  return os.str();
}

std::string ablation_table_csv(const std::vector<AblationOutcome>& outcomes) {
  std::ostringstream os;
  os << "label,baseline_v1,baseline_v2,cema,tmr,rd,cascade,ap50,map,status\n";
  os.precision(17);
  for (const auto& out : outcomes) {
    const RowMarks m = marks_of(out.row);
    os << out.row.label << "," << (m.v1 ? 1 : 0) << "," << (m.v2 ? 1 : 0) << "," << (m.cema ? 1 : 0)
       << "," << (m.tmr ? 1 : 0) << "," << (m.rd ? 1 : 0) << "," << (m.cascade ? 1 : 0) << ",";
    if (out.ok) {
      os << out.ap50 << "," << out.map << ",ok";
    } else {
      os << ",,FAILED";
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace tmrd
