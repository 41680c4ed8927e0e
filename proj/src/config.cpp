#include "tmrd/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace tmrd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
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
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      errors.push_back("line " + std::to_string(lineno) + ": empty key");
      continue;
    }
    kv[key] = value;
  }
  if (!errors.empty()) {
    std::string msg = "config syntax errors:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
  return kv;
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_kv_text(buf.str());
}

namespace {

struct Binder {
  TrainConfig& cfg;
  std::vector<std::string>& errors;
  const std::map<std::string, std::string>& kv;
  std::vector<std::string> seen;

  void handle(const std::string& key, const std::function<void(const std::string&)>& apply) {
    seen.push_back(key);
    const auto it = kv.find(key);
    if (it == kv.end()) return;
    try {
      apply(it->second);
    } catch (const std::exception& e) {
      errors.push_back(key + "=" + it->second + ": " + e.what());
    }
  }

  void bind_double(const std::string& key, double& field) {
    handle(key, [&field](const std::string& v) {
      std::size_t pos = 0;
      field = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing characters");
    });
  }

  void bind_int(const std::string& key, int& field) {
    handle(key, [&field](const std::string& v) {
      std::size_t pos = 0;
      field = std::stoi(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing characters");
    });
  }

  void bind_u64(const std::string& key, std::uint64_t& field) {
    handle(key, [&field](const std::string& v) {
      std::size_t pos = 0;
      field = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing characters");
    });
  }

  void bind_bool(const std::string& key, bool& field) {
    handle(key, [&field](const std::string& v) {
      if (v == "true" || v == "1") {
        field = true;
      } else if (v == "false" || v == "0") {
        field = false;
      } else {
        throw std::invalid_argument("expected true/false/1/0");
      }
    });
  }

  void bind_mode(const std::string& key, TrainMode& field) {
    handle(key, [&field](const std::string& v) { field = mode_from_name(v); });
  }
};

void bind_all(Binder& b) {
  TrainConfig& c = b.cfg;
  b.bind_mode("train.mode", c.mode);
  b.bind_bool("train.cascade_enabled", c.cascade_enabled);
  b.bind_bool("train.uncertainty_enabled", c.uncertainty_enabled);
  b.bind_int("train.burn_in_iters", c.burn_in_iters);
  b.bind_int("train.total_iters", c.total_iters);
  b.bind_int("train.ssl_iters", c.ssl_iters);
  b.bind_int("train.tmr_iters", c.tmr_iters);
  b.bind_double("train.ema_alpha", c.ema_alpha);
  b.bind_double("train.burn_in_lr", c.burn_in_lr);
  b.bind_double("train.student_lr", c.student_lr);
  b.bind_double("train.omega_lr", c.omega_lr);
  b.bind_double("train.lambda_teacher", c.lambda_teacher);
  b.bind_double("train.lambda_student", c.lambda_student);
  b.bind_double("train.lambda_unsup", c.lambda_unsup);
  b.bind_double("train.lambda_rd", c.lambda_rd);
  b.bind_bool("train.literal_update_rule", c.literal_update_rule);
  b.bind_double("train.conf_threshold", c.conf_threshold);
  b.bind_double("train.nms_iou", c.nms_iou);
  b.bind_bool("train.pseudo_uncertainty", c.pseudo_uncertainty);
  b.bind_int("train.labeled_batch", c.labeled_batch);
  b.bind_int("train.unlabeled_batch", c.unlabeled_batch);
  b.bind_bool("train.omega_per_tensor", c.omega_per_tensor);
  b.bind_bool("train.omega_carry", c.omega_carry);
  b.bind_u64("train.seed", c.seed);
  b.bind_int("train.eval_interval", c.eval_interval);
  b.bind_double("train.eval_conf_threshold", c.eval_conf_threshold);
  b.bind_bool("train.log_timing", c.log_timing);

  b.bind_int("det.image_size", c.det.image_size);
  b.bind_int("det.num_classes", c.det.num_classes);
  b.bind_int("det.c1", c.det.c1);
  b.bind_int("det.c2", c.det.c2);
  b.bind_int("det.grid", c.det.grid);
  b.bind_double("det.default_box_size", c.det.default_box_size);
  b.bind_double("det.spread_min", c.det.spread_min);
  b.bind_double("det.focal_alpha", c.det.focal_alpha);
  b.bind_double("det.focal_gamma", c.det.focal_gamma);
  b.bind_double("det.npll_rho", c.det.npll_rho);
  b.bind_double("det.rpn_tau", c.det.rpn_tau);
  b.bind_double("det.tau1", c.det.tau[0]);
  b.bind_double("det.tau2", c.det.tau[1]);
  b.bind_double("det.tau3", c.det.tau[2]);

  b.bind_double("aug.flip_prob", c.aug.flip_prob);
  b.bind_double("aug.brightness", c.aug.brightness);
  b.bind_double("aug.contrast", c.aug.contrast);
  b.bind_double("aug.noise_sigma", c.aug.noise_sigma);
  b.bind_bool("aug.cutout", c.aug.cutout);
  b.bind_double("aug.cutout_min", c.aug.cutout_min);
  b.bind_double("aug.cutout_max", c.aug.cutout_max);
  b.bind_double("aug.cutout_fill", c.aug.cutout_fill);
}

}  // namespace

TrainConfig config_from_kv(const std::map<std::string, std::string>& kv) {
  TrainConfig cfg;
  std::vector<std::string> errors;
  Binder binder{cfg, errors, kv, {}};
  bind_all(binder);
  for (const auto& [key, value] : kv) {
    if (std::find(binder.seen.begin(), binder.seen.end(), key) == binder.seen.end()) {
      errors.push_back(key + ": unknown key");
    }
  }
  if (!errors.empty()) {
    std::string msg = "bad config keys:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
  cfg.validate_and_sync();
  return cfg;
}

TrainConfig load_train_config(const std::string& path) {
  return config_from_kv(parse_kv_file(path));
}

std::string serialize_config(const TrainConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  auto emit = [&os](const std::string& key, const auto& value) { os << key << "=" << value << "\n"; };
  emit("train.mode", mode_name(cfg.mode));
  emit("train.cascade_enabled", cfg.cascade_enabled ? "true" : "false");
  emit("train.uncertainty_enabled", cfg.uncertainty_enabled ? "true" : "false");
  emit("train.burn_in_iters", cfg.burn_in_iters);
  emit("train.total_iters", cfg.total_iters);
  emit("train.ssl_iters", cfg.ssl_iters);
  emit("train.tmr_iters", cfg.tmr_iters);
  emit("train.ema_alpha", cfg.ema_alpha);
  emit("train.burn_in_lr", cfg.burn_in_lr);
  emit("train.student_lr", cfg.student_lr);
  emit("train.omega_lr", cfg.omega_lr);
  emit("train.lambda_teacher", cfg.lambda_teacher);
  emit("train.lambda_student", cfg.lambda_student);
  emit("train.lambda_unsup", cfg.lambda_unsup);
  emit("train.lambda_rd", cfg.lambda_rd);
  emit("train.literal_update_rule", cfg.literal_update_rule ? "true" : "false");
  emit("train.conf_threshold", cfg.conf_threshold);
  emit("train.nms_iou", cfg.nms_iou);
  emit("train.pseudo_uncertainty", cfg.pseudo_uncertainty ? "true" : "false");
  emit("train.labeled_batch", cfg.labeled_batch);
  emit("train.unlabeled_batch", cfg.unlabeled_batch);
  emit("train.omega_per_tensor", cfg.omega_per_tensor ? "true" : "false");
  emit("train.omega_carry", cfg.omega_carry ? "true" : "false");
  emit("train.seed", cfg.seed);
  emit("train.eval_interval", cfg.eval_interval);
  emit("train.eval_conf_threshold", cfg.eval_conf_threshold);
  emit("train.log_timing", cfg.log_timing ? "true" : "false");
  emit("det.image_size", cfg.det.image_size);
  emit("det.num_classes", cfg.det.num_classes);
  emit("det.c1", cfg.det.c1);
  emit("det.c2", cfg.det.c2);
  emit("det.grid", cfg.det.grid);
  emit("det.default_box_size", cfg.det.default_box_size);
  emit("det.spread_min", cfg.det.spread_min);
  emit("det.focal_alpha", cfg.det.focal_alpha);
  emit("det.focal_gamma", cfg.det.focal_gamma);
  emit("det.npll_rho", cfg.det.npll_rho);
  emit("det.rpn_tau", cfg.det.rpn_tau);
  emit("det.tau1", cfg.det.tau[0]);
  emit("det.tau2", cfg.det.tau[1]);
  emit("det.tau3", cfg.det.tau[2]);
  emit("aug.flip_prob", cfg.aug.flip_prob);
  emit("aug.brightness", cfg.aug.brightness);
  emit("aug.contrast", cfg.aug.contrast);
  emit("aug.noise_sigma", cfg.aug.noise_sigma);
  emit("aug.cutout", cfg.aug.cutout ? "true" : "false");
  emit("aug.cutout_min", cfg.aug.cutout_min);
  emit("aug.cutout_max", cfg.aug.cutout_max);
  emit("aug.cutout_fill", cfg.aug.cutout_fill);
  return os.str();
}

}  // namespace tmrd
