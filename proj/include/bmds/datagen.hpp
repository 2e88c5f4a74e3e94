#pragma once

#include "bmds/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace bmds {

/// Synthetic multi-modal phantom: three nested axis-aligned ellipsoids
/// (region 2 inside region 1 inside region 0, analogous to ET / TC / WT).
///
/// Channel contrasts (added on top of a zero background, then Gaussian noise):
///   informative channel : region 0   (the only channel that sees region 0)
///   channel 0, 1        : region 1   (+, -)
///   channel 2           : region 2
/// Dropping the informative channel removes the outer boundary entirely.
struct PhantomSpec {
  std::int64_t size = 32;
  std::int64_t num_modalities = 4;
  std::int64_t num_regions = 3;
  double noise_std = 0.25;
  std::int64_t informative_channel = 3;
  std::uint64_t seed = 0;
};

struct Sample {
  Tensor volume;  // [M, S, S, S]
  Tensor label;   // [R, S, S, S], binary, nested
  std::string id;
};

/// n samples; sample i draws from the stream derive_seed(spec.seed, "phantom", i).
std::vector<Sample> generate(const PhantomSpec& spec, std::int64_t n);
Sample generate_one(const PhantomSpec& spec, std::int64_t index);

/// Per-channel z-score (population std). Throws on a zero-variance channel.
Tensor znorm(const Tensor& volume);

/// Flips and quarter turns applied by `augment`.
struct AugmentDraw {
  std::array<bool, 3> flip{false, false, false};
  int rot_axis = 0;
  int rot_quarters = 0;

  bool is_identity() const { return !flip[0] && !flip[1] && !flip[2] && rot_quarters == 0; }
};

AugmentDraw draw_augment(std::uint64_t seed);
/// Same spatial permutation applied to every channel of a [C,S,S,S] cube.
Tensor apply_augment(const Tensor& volume, const AugmentDraw& draw);
Sample augment(const Sample& sample, std::uint64_t seed);

/// Random size^3 window; the corner is uniform over valid positions.
std::array<std::int64_t, 3> draw_crop_corner(std::int64_t volume_size, std::int64_t crop_size,
                                             std::uint64_t seed);
Tensor crop_volume(const Tensor& volume, const std::array<std::int64_t, 3>& corner,
                   std::int64_t crop_size);
Sample crop(const Sample& sample, std::int64_t crop_size, std::uint64_t seed);

/// True if label channel r+1 implies channel r at every voxel.
bool labels_nested(const Tensor& label);

enum class Split { train, val, test };
const char* split_name(Split s);

/// 80 / 15 / 5 assignment over a seeded permutation. Validation and test
/// each get at least one sample when n >= 3.
std::vector<Split> assign_splits(std::int64_t n, std::uint64_t seed);

}  // namespace bmds
