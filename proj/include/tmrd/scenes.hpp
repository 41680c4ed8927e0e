#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tmrd/metrics.hpp"
#include "tmrd/rng.hpp"
#include "tmrd/tensor.hpp"

namespace tmrd {

// One synthetic sample: a grayscale image in [0,1] plus its object list.
// Unlabeled scenes carry an empty object list.
struct Scene {
  Tensor image;  // [1,H,W]
  std::vector<GroundTruth> objects;
};

struct SceneConfig {
  int image_size = 64;
  int num_classes = 3;  // 0 solid, 1 striped, 2 checker
  int min_objects = 1;
  int max_objects = 3;
  // object side lengths; the band keeps every object reachable from the
  // 16 px cell-anchored default boxes at IoU 0.5
  double min_size = 12.0;
  double max_size = 20.0;
  double max_gt_iou = 0.3;
  double background_level = 0.15;
  double background_noise = 0.05;
};

struct AugmentConfig {
  double flip_prob = 0.5;  // weak augmentation
  // strong augmentation (photometric only; boxes never move)
  double brightness = 0.2;
  double contrast = 0.2;
  double noise_sigma = 0.02;
  bool cutout = true;
  double cutout_min = 8.0;
  double cutout_max = 16.0;
  double cutout_fill = 0.5;
};

struct Dataset {
  SceneConfig config;
  std::vector<Scene> labeled;
  std::vector<Scene> unlabeled;
};

// Weak/strong views of the same base scene. flip_applied refers to the
// weak view; strong views keep the base geometry.
struct AugmentedPair {
  Scene weak;
  Scene strong;
  bool flip_applied = false;
};

Scene generate_scene(const SceneConfig& cfg, Rng& rng);

// Deterministic for a fixed (seed, count, ratio). The first
// round(count*ratio) scenes keep their labels; the rest are stripped.
Dataset generate_dataset(const SceneConfig& cfg, std::uint64_t seed, int count, double ratio);

Scene flip_scene(const Scene& s);  // horizontal mirror of image and boxes

// With probability cfg.flip_prob a horizontal flip, otherwise identity.
Scene weak_augment(const Scene& s, const AugmentConfig& cfg, Rng& rng, bool* flip_applied);

// Brightness/contrast jitter, additive Gaussian noise and one cutout
// rectangle; geometry is untouched and pixels are clamped to [0,1].
Scene strong_augment(const Scene& s, const AugmentConfig& cfg, Rng& rng);

AugmentedPair make_pair(const Scene& s, const AugmentConfig& cfg, Rng& rng);

// Dataset container ("TMRD"): byte-exact replay across runs.
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace tmrd
