#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bmds {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t elements = 0;  // finite-difference probes
  std::size_t kinks_skipped = 0;
};

/// Finite-difference check of every differentiable op on small random
/// inputs, plus the composite stage-1 loss (alpha and gamma included) and
/// the ELBO. Everything is seeded.
std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed = 0);

inline constexpr double kGradCheckTolerance = 1e-5;

}  // namespace bmds
