#include "tmrd/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tmrd {

namespace {

constexpr char kMagic[4] = {'T', 'M', 'R', 'D'};
constexpr std::uint32_t kVersion = 1;

void paint_object(std::vector<double>& img, int side, const Box& box, int class_id, double level) {
  const int x1 = static_cast<int>(std::lround(box.x1));
  const int y1 = static_cast<int>(std::lround(box.y1));
  const int x2 = static_cast<int>(std::lround(box.x2));
  const int y2 = static_cast<int>(std::lround(box.y2));
  for (int y = y1; y < y2; ++y) {
    for (int x = x1; x < x2; ++x) {
      double v = level;
      switch (class_id) {
        case 0:  // solid block
          break;
        case 1:  // vertical stripes, 3 px period
          v = ((x - x1) / 3) % 2 == 0 ? level : 0.5 * level;
          break;
        default:  // checkerboard, 3 px cells
          v = (((x - x1) / 3 + (y - y1) / 3) % 2 == 0) ? level : 0.35 * level;
          break;
      }
      img[static_cast<std::size_t>(y) * side + x] = v;
    }
  }
}

template <typename T>
void write_raw(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::ifstream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("dataset file is truncated");
}

void write_scene(std::ofstream& os, const Scene& s) {
  const auto& img = s.image.data();
  os.write(reinterpret_cast<const char*>(img.data()),
           static_cast<std::streamsize>(img.size() * sizeof(double)));
  write_raw(os, static_cast<std::uint32_t>(s.objects.size()));
  for (const auto& obj : s.objects) {
    write_raw(os, static_cast<std::uint32_t>(obj.class_id));
    write_raw(os, obj.box.x1);
    write_raw(os, obj.box.y1);
    write_raw(os, obj.box.x2);
    write_raw(os, obj.box.y2);
  }
}

Scene read_scene(std::ifstream& is, int side) {
  Scene s;
  std::vector<double> img(static_cast<std::size_t>(side) * side);
  is.read(reinterpret_cast<char*>(img.data()),
          static_cast<std::streamsize>(img.size() * sizeof(double)));
  if (!is) throw std::runtime_error("dataset file is truncated");
  s.image = Tensor::from_data({1, side, side}, std::move(img));
  std::uint32_t n = 0;
  read_raw(is, n);
  for (std::uint32_t i = 0; i < n; ++i) {
    GroundTruth g;
    std::uint32_t cid = 0;
    read_raw(is, cid);
    g.class_id = static_cast<int>(cid);
    read_raw(is, g.box.x1);
    read_raw(is, g.box.y1);
    read_raw(is, g.box.x2);
    read_raw(is, g.box.y2);
    s.objects.push_back(g);
  }
  return s;
}

}  // namespace

Scene generate_scene(const SceneConfig& cfg, Rng& rng) {
  const int side = cfg.image_size;
  std::vector<double> img(static_cast<std::size_t>(side) * side);
  for (double& v : img) {
    v = cfg.background_level + rng.uniform(-cfg.background_noise, cfg.background_noise);
    v = std::clamp(v, 0.0, 1.0);
  }

  Scene s;
  const int want = rng.uniform_int(cfg.min_objects, cfg.max_objects);
  int attempts = 0;
  while (static_cast<int>(s.objects.size()) < want && attempts < 200) {
    ++attempts;
    const double w = rng.uniform(cfg.min_size, cfg.max_size);
    const double h = rng.uniform(cfg.min_size, cfg.max_size);
    const double x1 = rng.uniform(1.0, side - w - 1.0);
    const double y1 = rng.uniform(1.0, side - h - 1.0);
    Box box{x1, y1, x1 + w, y1 + h};
    bool ok = true;
    for (const auto& other : s.objects) {
      if (iou(box, other.box) > cfg.max_gt_iou) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    GroundTruth g;
    g.box = box;
    g.class_id = rng.uniform_int(0, cfg.num_classes - 1);
    s.objects.push_back(g);
  }
  // brightness varies per object so texture, not intensity, carries class
  for (const auto& obj : s.objects) {
    const double level = rng.uniform(0.7, 1.0);
    paint_object(img, side, obj.box, obj.class_id, level);
  }
  s.image = Tensor::from_data({1, side, side}, std::move(img));
  return s;
}

Dataset generate_dataset(const SceneConfig& cfg, std::uint64_t seed, int count, double ratio) {
  if (count <= 0) throw std::invalid_argument("generate_dataset: count must be positive");
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("generate_dataset: ratio must lie in (0,1), got " + std::to_string(ratio));
  }
  Rng rng(seed);
  Dataset out;
  out.config = cfg;
  const int n_labeled = std::max(1, static_cast<int>(std::lround(count * ratio)));
  for (int i = 0; i < count; ++i) {
    Scene s = generate_scene(cfg, rng);
    if (i < n_labeled) {
      out.labeled.push_back(std::move(s));
    } else {
      s.objects.clear();
      out.unlabeled.push_back(std::move(s));
    }
  }
  return out;
}

Scene flip_scene(const Scene& s) {
  Scene out;
  out.image = hflip(s.image);
  const double w = static_cast<double>(s.image.dim(2));
  for (const auto& obj : s.objects) {
    GroundTruth g = obj;
    g.box.x1 = w - obj.box.x2;
    g.box.x2 = w - obj.box.x1;
    out.objects.push_back(g);
  }
  return out;
}

Scene weak_augment(const Scene& s, const AugmentConfig& cfg, Rng& rng, bool* flip_applied) {
  const bool flip = rng.bernoulli(cfg.flip_prob);
  if (flip_applied) *flip_applied = flip;
  return flip ? flip_scene(s) : s;
}

Scene strong_augment(const Scene& s, const AugmentConfig& cfg, Rng& rng) {
  const int side = s.image.dim(1);
  std::vector<double> img = s.image.data();
  const bool jitter = cfg.brightness > 0.0 || cfg.contrast > 0.0;
  if (jitter) {
    const double brightness = rng.uniform(-cfg.brightness, cfg.brightness);
    const double contrast = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast);
    for (double& v : img) v = contrast * (v - 0.5) + 0.5 + brightness;
  }
  if (cfg.noise_sigma > 0.0) {
    for (double& v : img) v += rng.normal(0.0, cfg.noise_sigma);
  }
  if (cfg.cutout) {
    const double cw = rng.uniform(cfg.cutout_min, cfg.cutout_max);
    const double ch = rng.uniform(cfg.cutout_min, cfg.cutout_max);
    const int x1 = static_cast<int>(rng.uniform(0.0, side - cw));
    const int y1 = static_cast<int>(rng.uniform(0.0, side - ch));
    const int x2 = std::min(side, x1 + static_cast<int>(cw));
    const int y2 = std::min(side, y1 + static_cast<int>(ch));
    for (int y = y1; y < y2; ++y)
      for (int x = x1; x < x2; ++x) img[static_cast<std::size_t>(y) * side + x] = cfg.cutout_fill;
  }
  for (double& v : img) v = std::clamp(v, 0.0, 1.0);
  Scene out;
  out.image = Tensor::from_data(s.image.shape(), std::move(img));
  out.objects = s.objects;  // photometric only
  return out;
}

AugmentedPair make_pair(const Scene& s, const AugmentConfig& cfg, Rng& rng) {
  AugmentedPair pair;
  pair.weak = weak_augment(s, cfg, rng, &pair.flip_applied);
  pair.strong = strong_augment(s, cfg, rng);
  return pair;
}

void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write dataset file '" + path + "'");
  os.write(kMagic, 4);
  write_raw(os, kVersion);
  write_raw(os, static_cast<std::uint32_t>(data.config.image_size));
  write_raw(os, static_cast<std::uint32_t>(data.config.image_size));
  write_raw(os, static_cast<std::uint32_t>(data.config.num_classes));
  write_raw(os, static_cast<std::uint32_t>(data.labeled.size()));
  write_raw(os, static_cast<std::uint32_t>(data.unlabeled.size()));
  for (const auto& s : data.labeled) write_scene(os, s);
  for (const auto& s : data.unlabeled) write_scene(os, s);
  if (!os) throw std::runtime_error("failed while writing '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset file '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("bad magic in '" + path + "': not a TMRD dataset");
  }
  std::uint32_t version = 0;
  read_raw(is, version);
  if (version != kVersion) {
    throw std::runtime_error("unsupported dataset version " + std::to_string(version));
  }
  std::uint32_t h = 0, w = 0, k = 0, nl = 0, nu = 0;
  read_raw(is, h);
  read_raw(is, w);
  read_raw(is, k);
  read_raw(is, nl);
  read_raw(is, nu);
  if (h != w) throw std::runtime_error("dataset images must be square");
  Dataset out;
  out.config.image_size = static_cast<int>(h);
  out.config.num_classes = static_cast<int>(k);
  for (std::uint32_t i = 0; i < nl; ++i) out.labeled.push_back(read_scene(is, static_cast<int>(h)));
  for (std::uint32_t i = 0; i < nu; ++i) out.unlabeled.push_back(read_scene(is, static_cast<int>(h)));
  return out;
}

}  // namespace tmrd
