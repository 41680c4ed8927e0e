#include "tmrd/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tmrd/config.hpp"
#include "tmrd/pseudo.hpp"
#include "tmrd/rd.hpp"

namespace tmrd {

std::string mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::Supervised: return "supervised";
    case TrainMode::ClassicalEma: return "classical_ema";
    case TrainMode::Tmr: return "tmr";
    case TrainMode::TmrRd: return "tmr_rd";
  }
  return "?";
}

TrainMode mode_from_name(const std::string& name) {
  if (name == "supervised") return TrainMode::Supervised;
  if (name == "classical_ema") return TrainMode::ClassicalEma;
  if (name == "tmr") return TrainMode::Tmr;
  if (name == "tmr_rd") return TrainMode::TmrRd;
  throw std::invalid_argument("unknown mode '" + name +
                              "' (expected supervised|classical_ema|tmr|tmr_rd)");
}

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::BurnIn: return "BURN_IN";
    case Stage::Ssl: return "SSL";
    case Stage::TmrStage: return "TMR";
    case Stage::Done: return "DONE";
  }
  return "?";
}

void TrainConfig::validate_and_sync() {
  std::vector<std::string> errors;
  if (!(ema_alpha > 0.0 && ema_alpha < 1.0)) errors.push_back("ema_alpha must lie in (0,1)");
  if (ssl_iters < 1) errors.push_back("ssl_iters must be >= 1");
  if (tmr_iters < 1) errors.push_back("tmr_iters must be >= 1");
  if (burn_in_iters < 0) errors.push_back("burn_in_iters must be >= 0");
  if (total_iters < burn_in_iters) errors.push_back("total_iters must be >= burn_in_iters");
  if (!(det.tau[0] < det.tau[1] && det.tau[1] < det.tau[2])) {
    errors.push_back("tau thresholds must be strictly increasing");
  }
  if (!(conf_threshold >= 0.0 && conf_threshold <= 1.0)) errors.push_back("conf_threshold must lie in [0,1]");
  if (labeled_batch < 1) errors.push_back("labeled_batch must be >= 1");
  if (unlabeled_batch < 1) errors.push_back("unlabeled_batch must be >= 1");
  if (eval_interval < 1) errors.push_back("eval_interval must be >= 1");
  if (!(burn_in_lr > 0.0)) errors.push_back("burn_in_lr must be positive");
  if (!(student_lr > 0.0)) errors.push_back("student_lr must be positive");
  if (!(omega_lr >= 0.0)) errors.push_back("omega_lr must be non-negative");
  if (det.image_size != det.grid * det.cell_stride()) errors.push_back("grid must divide image_size");
  if (!errors.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
  det.cascade = cascade_enabled;
  det.uncertainty = uncertainty_enabled;
}

const char* const kMetricsHeader =
    "iteration,stage,loss_sup,loss_unsup,loss_rd,loss_tmr,mean_repr_kl,ap50,map,wall_seconds";

namespace {

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}

}  // namespace

std::string metrics_row_csv(const MetricsRow& row) {
  std::ostringstream os;
  os << row.iteration << "," << stage_name(row.stage) << "," << fmt_opt(row.loss_sup) << ","
     << fmt_opt(row.loss_unsup) << "," << fmt_opt(row.loss_rd) << "," << fmt_opt(row.loss_tmr)
     << "," << fmt_opt(row.mean_repr_kl) << "," << fmt_opt(row.ap50) << "," << fmt_opt(row.map)
     << "," << fmt_opt(row.wall_seconds);
  return os.str();
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write metrics file '" + path + "'");
  os << kMetricsHeader << "\n";
  for (const auto& row : rows) os << metrics_row_csv(row) << "\n";
}

Stage stage_of_iteration(const TrainConfig& cfg, int iteration) {
  if (iteration >= cfg.total_iters) return Stage::Done;
  if (iteration < cfg.burn_in_iters) return Stage::BurnIn;
  if (cfg.mode == TrainMode::Supervised) return Stage::Done;
  if (cfg.mode == TrainMode::ClassicalEma) return Stage::Ssl;
  const int pos = (iteration - cfg.burn_in_iters) % (cfg.ssl_iters + cfg.tmr_iters);
  return pos < cfg.ssl_iters ? Stage::Ssl : Stage::TmrStage;
}

// ---- batched sampling -----------------------------------------------------

namespace {

std::vector<LabeledSample> sample_labeled_batch(const std::vector<Scene>& pool,
                                                const TrainConfig& cfg, Rng& rng) {
  std::vector<int> indices(static_cast<std::size_t>(cfg.labeled_batch));
  for (int& i : indices) i = rng.uniform_int(0, static_cast<int>(pool.size()) - 1);
  std::vector<LabeledSample> batch;
  batch.reserve(indices.size());
  for (int i : indices) {
    Scene strong = strong_augment(pool[static_cast<std::size_t>(i)], cfg.aug, rng);
    batch.push_back({strong.image, strong.objects});
  }
  return batch;
}

EvalResult evaluate_internal(const DetectorConfig& det, const ParameterSet& params,
                             const std::vector<Scene>& scenes, double conf, double nms) {
  std::vector<EvalImage> images;
  images.reserve(scenes.size());
  for (const auto& scene : scenes) {
    EvalImage img;
    img.truths = scene.objects;
    auto dets = infer_teacher(det, params, scene.image, false);
    for (const auto& label : filter_detections(std::move(dets), conf, nms)) {
      img.detections.push_back({label.box, label.class_id, label.confidence});
    }
    images.push_back(std::move(img));
  }
  return evaluate_detections(images, det.num_classes);
}

}  // namespace

EvalResult evaluate_model(const DetectorConfig& cfg, const ParameterSet& params,
                          const std::vector<Scene>& scenes, double conf_threshold, double nms_iou) {
  return evaluate_internal(cfg, params, scenes, conf_threshold, nms_iou);
}

double mean_representation_kl(const DetectorConfig& cfg, const ParameterSet& teacher,
                              const ParameterSet& student, const std::vector<Scene>& probe) {
  if (probe.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& scene : probe) {
    ReprDist t = representation_probs(cfg, teacher, scene.image, false);
    ReprDist s = representation_probs(cfg, student, scene.image, false);
    acc += rd_loss(s, t).value();
  }
  return acc / static_cast<double>(probe.size());
}

// ---- burn-in ---------------------------------------------------------------

ParameterSet burn_in(const TrainConfig& cfg, const std::vector<Scene>& labeled, Rng& rng,
                     std::vector<MetricsRow>* history, const std::vector<Scene>* eval_scenes) {
  if (labeled.empty()) throw std::invalid_argument("burn_in: labeled data is empty");
  ParameterSet params = init_params(cfg.det, rng);
  for (int it = 0; it < cfg.burn_in_iters; ++it) {
    std::vector<LabeledSample> batch = sample_labeled_batch(labeled, cfg, rng);
    params.set_requires_grad(true);
    Tape tape;
    LossTerms loss = supervised_loss(cfg.det, params, batch);
    const double value = loss.total.value();
    if (!std::isfinite(value)) {
      throw TrainDivergence("burn_in: non-finite loss at iteration " + std::to_string(it));
    }
    tape.backward(loss.total);
    params.sgd_step(cfg.burn_in_lr);
    params.zero_grads();
    params.set_requires_grad(false);
    if (history) {
      MetricsRow row;
      row.iteration = it + 1;
      row.stage = Stage::BurnIn;
      row.loss_sup = value;
      const bool eval_now = (it + 1) % cfg.eval_interval == 0 || it + 1 == cfg.burn_in_iters;
      if (eval_now && eval_scenes && !eval_scenes->empty()) {
        EvalResult ev = evaluate_internal(cfg.det, params, *eval_scenes, cfg.eval_conf_threshold,
                                          cfg.nms_iou);
        row.ap50 = ev.ap50;
        row.map = ev.map;
      }
      history->push_back(row);
    }
  }
  return params;
}

// ---- main loop --------------------------------------------------------------

TrainState run(const TrainConfig& cfg_in, const Dataset& data, const std::vector<Scene>& eval_scenes,
               std::optional<TrainState> resume, const RunHooks& hooks) {
  TrainConfig cfg = cfg_in;
  cfg.validate_and_sync();
  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&t_start]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  };

  std::vector<Scene> probe;
  for (std::size_t i = 0; i < data.unlabeled.size() && i < 8; ++i) probe.push_back(data.unlabeled[i]);

  TrainState state;
  if (resume) {
    state = std::move(*resume);
  } else {
    state.rng = Rng(cfg.seed);
  }

  auto maybe_save = [&](int completed_iteration) {
    if (hooks.save_at_iteration && *hooks.save_at_iteration == completed_iteration &&
        !hooks.save_path.empty()) {
      save_checkpoint(hooks.save_path, cfg, state);
    }
  };

  auto eval_fields = [&](MetricsRow& row, bool have_student) {
    if (!eval_scenes.empty()) {
      EvalResult ev = evaluate_internal(cfg.det, state.teacher, eval_scenes,
                                        cfg.eval_conf_threshold, cfg.nms_iou);
      row.ap50 = ev.ap50;
      row.map = ev.map;
    }
    if (have_student && !probe.empty()) {
      row.mean_repr_kl = mean_representation_kl(cfg.det, state.teacher, state.student, probe);
    }
  };

  if (state.iteration == 0 && state.teacher.size() == 0) {
    state.teacher = init_params(cfg.det, state.rng);
  }

  // burn-in trains one detector; both models duplicate it
  if (state.iteration < cfg.burn_in_iters) {
    if (data.labeled.empty()) throw std::invalid_argument("run: labeled data is empty");
    while (state.iteration < cfg.burn_in_iters) {
      const int it = state.iteration;
      std::vector<LabeledSample> batch = sample_labeled_batch(data.labeled, cfg, state.rng);
      state.teacher.set_requires_grad(true);
      Tape tape;
      LossTerms loss = supervised_loss(cfg.det, state.teacher, batch);
      const double value = loss.total.value();
      if (!std::isfinite(value)) {
        throw TrainDivergence("BURN_IN iteration " + std::to_string(it) + ": non-finite loss");
      }
      tape.backward(loss.total);
      state.teacher.sgd_step(cfg.burn_in_lr);
      state.teacher.zero_grads();
      state.teacher.set_requires_grad(false);
      ++state.iteration;

      MetricsRow row;
      row.iteration = state.iteration;
      row.stage = Stage::BurnIn;
      row.loss_sup = value;
      if (state.iteration % cfg.eval_interval == 0 || state.iteration == cfg.burn_in_iters ||
          state.iteration == cfg.total_iters) {
        eval_fields(row, false);
      }
      if (cfg.log_timing) row.wall_seconds = elapsed();
      state.history.push_back(row);
      maybe_save(state.iteration);
    }
  }
  if (cfg.mode != TrainMode::Supervised && state.iteration >= cfg.burn_in_iters &&
      state.student.size() == 0) {
    state.student = state.teacher.clone();
    state.omega_t = ScalingSet::ones_like(state.teacher, cfg.omega_per_tensor);
    state.omega_s = ScalingSet::ones_like(state.student, cfg.omega_per_tensor);
    state.stage_log.push_back("burn_in_end:" + std::to_string(state.iteration));
  }

  const int cycle = cfg.ssl_iters + cfg.tmr_iters;
  while (state.iteration < cfg.total_iters) {
    const Stage stage = stage_of_iteration(cfg, state.iteration);
    if (stage == Stage::Done) break;
    const int it = state.iteration;
    const int pos = (it - cfg.burn_in_iters) % cycle;

    MetricsRow row;
    row.stage = stage;

    if (stage == Stage::Ssl) {
      if (data.unlabeled.empty()) throw std::invalid_argument("run: unlabeled data is empty");
      std::vector<int> indices(static_cast<std::size_t>(cfg.unlabeled_batch));
      for (int& i : indices) i = state.rng.uniform_int(0, static_cast<int>(data.unlabeled.size()) - 1);
      const bool use_rd = cfg.mode == TrainMode::TmrRd && cfg.lambda_rd != 0.0;
      std::vector<UnlabeledSample> batch;
      batch.reserve(indices.size());
      for (int i : indices) {
        AugmentedPair pair = make_pair(data.unlabeled[static_cast<std::size_t>(i)], cfg.aug, state.rng);
        UnlabeledSample sample;
        sample.strong_image = pair.strong.image;
        HeadOutputs teacher_out = forward(cfg.det, state.teacher, pair.weak.image);
        auto dets = detections_from_outputs(cfg.det, teacher_out, pair.flip_applied);
        sample.pseudo = filter_detections(std::move(dets), cfg.conf_threshold, cfg.nms_iou);
        if (use_rd) {
          sample.teacher_repr = repr_from_features(teacher_out.feat1, teacher_out.feat2, pair.flip_applied);
        }
        batch.push_back(std::move(sample));
      }
      StudentStepConfig step;
      step.xi = cfg.student_lr;
      step.lambda_u = cfg.lambda_unsup;
      step.lambda_d = use_rd ? cfg.lambda_rd : 0.0;
      step.literal_update = cfg.literal_update_rule;
      step.pseudo_uncertainty = cfg.pseudo_uncertainty;
      StudentStepStats stats = student_step(cfg.det, state.student, batch, state.teacher, step);
      if (stats.unsup_applied) row.loss_unsup = stats.loss_unsup;
      if (use_rd) row.loss_rd = stats.loss_rd;
      if (cfg.mode == TrainMode::ClassicalEma) {
        state.teacher = ema_step(state.teacher, state.student, cfg.ema_alpha);
      }
    } else {  // TMR stage
      if (pos == cfg.ssl_iters) {  // stage start
        if (!cfg.omega_carry) {
          state.omega_t.fill(1.0);
          state.omega_s.fill(1.0);
        }
        state.stage_log.push_back("tmr_begin:" + std::to_string(it));
      }
      auto next_batch = [&]() { return sample_labeled_batch(data.labeled, cfg, state.rng); };
      std::vector<double> trace;
      try {
        trace = tmr_optimize(cfg.det, state.teacher, state.student, state.omega_t, state.omega_s,
                             next_batch, cfg.omega_lr, 1, cfg.lambda_teacher, cfg.lambda_student);
      } catch (const std::runtime_error& e) {
        throw TrainDivergence("TMR iteration " + std::to_string(it) + ": " + e.what());
      }
      row.loss_tmr = trace.front();
      const bool last_of_stage = pos == cycle - 1 || it + 1 == cfg.total_iters;
      if (last_of_stage) {
        RefineResult refined = refine_weights(state.teacher, state.student, state.omega_t, state.omega_s);
        state.teacher = std::move(refined.teacher);
        state.student = std::move(refined.student);
        state.stage_log.push_back("refine_weights:" + std::to_string(it + 1));
      }
    }

    ++state.iteration;
    row.iteration = state.iteration;
    if (state.iteration % cfg.eval_interval == 0 || state.iteration == cfg.total_iters) {
      eval_fields(row, true);
    }
    if (cfg.log_timing) row.wall_seconds = elapsed();
    state.history.push_back(row);
    maybe_save(state.iteration);
  }
  return state;
}

// ---- checkpoint --------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'T', 'M', 'R', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void get(std::ifstream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint file is truncated");
}

void put_string(std::ofstream& os, const std::string& s) {
  put(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::ifstream& is) {
  std::uint32_t n = 0;
  get(is, n);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("checkpoint file is truncated");
  return s;
}

void put_named_tensor(std::ofstream& os, const std::string& name, const std::vector<int>& shape,
                      const std::vector<double>& data) {
  put_string(os, name);
  put(os, static_cast<std::uint32_t>(shape.size()));
  for (int e : shape) put(os, static_cast<std::int64_t>(e));
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
}

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};

NamedTensor get_named_tensor(std::ifstream& is) {
  NamedTensor t;
  t.name = get_string(is);
  std::uint32_t rank = 0;
  get(is, rank);
  std::int64_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::int64_t e = 0;
    get(is, e);
    t.shape.push_back(static_cast<int>(e));
    numel *= e;
  }
  t.data.resize(static_cast<std::size_t>(numel));
  is.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!is) throw std::runtime_error("checkpoint file is truncated");
  return t;
}

void put_params(std::ofstream& os, const std::string& prefix, const ParameterSet& params) {
  for (const auto& [name, t] : params.entries()) {
    put_named_tensor(os, prefix + "/" + name, t.shape(), t.data());
  }
}

void put_scaling(std::ofstream& os, const std::string& prefix, const ScalingSet& omega) {
  for (const auto& [name, v] : omega.entries()) {
    put_named_tensor(os, prefix + "/" + name, {static_cast<int>(v.size())}, v);
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainConfig& cfg, const TrainState& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  os.write(kCheckpointMagic, 4);
  put(os, kCheckpointVersion);
  put_string(os, serialize_config(cfg));
  put(os, static_cast<std::int64_t>(state.iteration));
  const bool post_burn_in = state.student.size() > 0;
  put(os, static_cast<std::uint8_t>(post_burn_in ? 1 : 0));
  std::uint32_t tensor_count = static_cast<std::uint32_t>(state.teacher.size());
  if (post_burn_in) {
    tensor_count += static_cast<std::uint32_t>(state.student.size() + state.omega_t.size() +
                                               state.omega_s.size());
  }
  put(os, tensor_count);
  put_params(os, "teacher", state.teacher);
  if (post_burn_in) {
    put_params(os, "student", state.student);
    put_scaling(os, "omega_t", state.omega_t);
    put_scaling(os, "omega_s", state.omega_s);
  }
  put(os, static_cast<std::uint8_t>(state.omega_t.per_tensor() ? 1 : 0));
  put_string(os, state.rng.serialize());
  put(os, static_cast<std::uint32_t>(state.stage_log.size()));
  for (const auto& s : state.stage_log) put_string(os, s);
  if (!os) throw std::runtime_error("failed while writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw std::runtime_error("bad magic in '" + path + "': not a TMRC checkpoint");
  }
  std::uint32_t version = 0;
  get(is, version);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.config_echo = get_string(is);
  std::int64_t iteration = 0;
  get(is, iteration);
  ck.state.iteration = static_cast<int>(iteration);
  std::uint8_t post_burn_in = 0;
  get(is, post_burn_in);
  std::uint32_t tensor_count = 0;
  get(is, tensor_count);
  std::vector<NamedTensor> tensors;
  tensors.reserve(tensor_count);
  for (std::uint32_t i = 0; i < tensor_count; ++i) tensors.push_back(get_named_tensor(is));
  std::uint8_t per_tensor = 0;
  get(is, per_tensor);
  const std::string rng_blob = get_string(is);
  ck.state.rng.deserialize(rng_blob);
  std::uint32_t log_count = 0;
  get(is, log_count);
  for (std::uint32_t i = 0; i < log_count; ++i) ck.state.stage_log.push_back(get_string(is));

  for (auto& t : tensors) {
    const auto slash = t.name.find('/');
    if (slash == std::string::npos) throw std::runtime_error("checkpoint tensor '" + t.name + "' has no prefix");
    const std::string prefix = t.name.substr(0, slash);
    const std::string name = t.name.substr(slash + 1);
    if (prefix == "teacher") {
      ck.state.teacher.add(name, Tensor::from_data(t.shape, std::move(t.data)));
    } else if (prefix == "student") {
      ck.state.student.add(name, Tensor::from_data(t.shape, std::move(t.data)));
    } else if (prefix == "omega_t" || prefix == "omega_s") {
      // rebuilt below once parameter sets exist
    } else {
      throw std::runtime_error("checkpoint tensor '" + t.name + "' has unknown prefix");
    }
  }
  if (post_burn_in) {
    ck.state.omega_t = ScalingSet::ones_like(ck.state.teacher, per_tensor != 0);
    ck.state.omega_s = ScalingSet::ones_like(ck.state.student, per_tensor != 0);
    for (auto& t : tensors) {
      const auto slash = t.name.find('/');
      const std::string prefix = t.name.substr(0, slash);
      const std::string name = t.name.substr(slash + 1);
      if (prefix == "omega_t") ck.state.omega_t.at(name) = t.data;
      if (prefix == "omega_s") ck.state.omega_s.at(name) = t.data;
    }
  }
  return ck;
}

}  // namespace tmrd
