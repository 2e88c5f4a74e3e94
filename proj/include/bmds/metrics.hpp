#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace bmds {

/// Binary voxel mask on an H x W x D grid, row-major.
struct Mask3 {
  std::array<std::int64_t, 3> dims{0, 0, 0};
  std::vector<std::uint8_t> voxels;

  Mask3() = default;
  Mask3(std::array<std::int64_t, 3> d, std::vector<std::uint8_t> v);
  explicit Mask3(std::array<std::int64_t, 3> d)
      : Mask3(d, std::vector<std::uint8_t>(static_cast<std::size_t>(d[0] * d[1] * d[2]), 0)) {}

  std::int64_t size() const { return dims[0] * dims[1] * dims[2]; }
  std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return (i * dims[1] + j) * dims[2] + k;
  }
  bool at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return voxels[static_cast<std::size_t>(index(i, j, k))] != 0;
  }
  bool empty() const;
};

/// Thresholds probabilities: p >= threshold -> 1.
Mask3 threshold_mask(std::span<const double> probs, std::array<std::int64_t, 3> dims,
                     double threshold = 0.5);

/// 2|P n G| / (|P| + |G|); 1 when both are empty.
double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
double dice_score(const Mask3& pred, const Mask3& gt);

/// Foreground voxels with a 6-connected background neighbour. Voxels outside
/// the grid count as background.
std::vector<std::array<std::int64_t, 3>> boundary_voxels(const Mask3& mask);

/// Exact squared Euclidean distance to the nearest set voxel.
std::vector<double> squared_distance_transform(const Mask3& features);

/// Nearest-rank percentile index for q in percent: rank = ceil(q n / 100).
std::size_t nearest_rank_index(std::size_t n, int percent);

/// max of the two directed 95th-percentile boundary distances (unit spacing).
/// Both empty: 0. Exactly one empty: nullopt (undefined).
std::optional<double> hd95(const Mask3& pred, const Mask3& gt);

/// Expected calibration error with confidence max(p, 1 - p) and correctness
/// (p >= 0.5) == label, over `bins` equal-width bins on [0.5, 1].
double ece(std::span<const double> probs, std::span<const std::uint8_t> labels, int bins = 10);

/// Same binning on precomputed (confidence, correct) pairs.
double ece_from_confidence(std::span<const double> confidence, std::span<const std::uint8_t> correct,
                           int bins = 10);

/// Mean binary negative log-likelihood with p clamped to [1e-7, 1 - 1e-7].
double nll(std::span<const double> probs, std::span<const std::uint8_t> labels);

/// ROC AUC of `scores` for predicting `error` voxels, ties averaged.
/// Throws when all voxels are errors or none are.
double uncertainty_error_auc(std::span<const double> scores, std::span<const std::uint8_t> error);

}  // namespace bmds
