#include "bmds/datagen.hpp"

#include "bmds/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace bmds {

namespace {

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> semi;

  bool contains(std::int64_t i, std::int64_t j, std::int64_t k) const {
    const double p[3] = {static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)};
    double r = 0.0;
    for (int d = 0; d < 3; ++d) {
      const double t = (p[d] - center[d]) / semi[d];
      r += t * t;
    }
    return r <= 1.0;
  }
};

constexpr int kMaxAttempts = 100;

// Region contrasts before noise: {region, channel, delta}.
struct Contrast {
  int region;
  int channel;  // -1 = informative channel
  double delta;
};
constexpr Contrast kContrasts[] = {
    {0, -1, 1.5},
    {1, 0, 1.0},
    {1, 1, -0.8},
    {2, 2, 1.5},
};

}  // namespace

Sample generate_one(const PhantomSpec& spec, std::int64_t index) {
  if (spec.num_regions != 3) throw std::invalid_argument("generate: num_regions must be 3");
  if (spec.num_modalities < 3) throw std::invalid_argument("generate: need at least 3 modalities");
  if (spec.informative_channel < 0 || spec.informative_channel >= spec.num_modalities) {
    throw std::invalid_argument("generate: informative_channel out of range");
  }
  const std::int64_t S = spec.size;
  const double lo = static_cast<double>(S) / 8.0;
  const double hi = static_cast<double>(S) / 3.0;
  Rng rng(derive_seed(spec.seed, "phantom", static_cast<std::uint64_t>(index)));

  const std::int64_t V = S * S * S;
  std::vector<double> label(static_cast<std::size_t>(3 * V), 0.0);
  bool ok = false;
  for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
    std::array<Ellipsoid, 3> e;
    for (int d = 0; d < 3; ++d) {
      e[0].semi[d] = rng.uniform(static_cast<double>(S) / 4.0, hi);
      e[0].center[d] = rng.uniform(e[0].semi[d], static_cast<double>(S - 1) - e[0].semi[d]);
    }
    bool feasible = true;
    for (int r = 1; r < 3 && feasible; ++r) {
      for (int d = 0; d < 3; ++d) {
        const double upper = 0.8 * e[r - 1].semi[d];
        if (upper < lo) {
          feasible = false;
          break;
        }
        e[r].semi[d] = rng.uniform(lo, upper);
        const double slack = 0.5 * (e[r - 1].semi[d] - e[r].semi[d]);
        e[r].center[d] = e[r - 1].center[d] + rng.uniform(-slack, slack);
      }
    }
    if (!feasible) continue;
    std::fill(label.begin(), label.end(), 0.0);
    std::array<std::int64_t, 3> count{0, 0, 0};
    ok = true;
    for (std::int64_t i = 0; i < S && ok; ++i) {
      for (std::int64_t j = 0; j < S && ok; ++j) {
        for (std::int64_t k = 0; k < S; ++k) {
          const std::int64_t v = (i * S + j) * S + k;
          bool inside_parent = true;
          for (int r = 0; r < 3; ++r) {
            const bool in = e[r].contains(i, j, k);
            if (in && !inside_parent) {
              ok = false;
              break;
            }
            inside_parent = in;
            if (in) {
              label[static_cast<std::size_t>(r * V + v)] = 1.0;
              ++count[r];
            }
          }
          if (!ok) break;
        }
      }
    }
    ok = ok && count[2] > 0;
  }
  if (!ok) {
    throw std::runtime_error("generate: failed to fit nested ellipsoids for sample " +
                             std::to_string(index) + " after " + std::to_string(kMaxAttempts) +
                             " attempts");
  }

  const std::int64_t M = spec.num_modalities;
  std::vector<double> vol(static_cast<std::size_t>(M * V), 0.0);
  for (const auto& c : kContrasts) {
    const std::int64_t ch = c.channel < 0 ? spec.informative_channel : c.channel;
    for (std::int64_t v = 0; v < V; ++v) {
      if (label[static_cast<std::size_t>(c.region * V + v)] != 0.0) vol[static_cast<std::size_t>(ch * V + v)] += c.delta;
    }
  }
  if (spec.noise_std > 0.0) {
    for (auto& x : vol) x += rng.normal(0.0, spec.noise_std);
  }

  char id[32];
  std::snprintf(id, sizeof id, "case_%04lld", static_cast<long long>(index));
  return {Tensor(Shape{M, S, S, S}, std::move(vol)), Tensor(Shape{3, S, S, S}, std::move(label)), id};
}

std::vector<Sample> generate(const PhantomSpec& spec, std::int64_t n) {
  if (n < 1) throw std::invalid_argument("generate: n must be >= 1");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out.push_back(generate_one(spec, i));
  return out;
}

Tensor znorm(const Tensor& volume) {
  if (volume.ndim() < 2) throw DimensionError("znorm: expected [C, ...] volume");
  const std::int64_t C = volume.dim(0);
  const std::int64_t n = volume.numel() / C;
  std::vector<double> out(volume.data().begin(), volume.data().end());
  for (std::int64_t c = 0; c < C; ++c) {
    double* x = out.data() + c * n;
    double m = 0.0;
    for (std::int64_t i = 0; i < n; ++i) m += x[i];
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::int64_t i = 0; i < n; ++i) v += (x[i] - m) * (x[i] - m);
    v /= static_cast<double>(n);
    if (!(v > 0.0)) {
      throw std::invalid_argument("znorm: channel " + std::to_string(c) + " has zero variance");
    }
    const double sd = std::sqrt(v);
    for (std::int64_t i = 0; i < n; ++i) x[i] = (x[i] - m) / sd;
  }
  return Tensor(volume.shape(), std::move(out));
}

AugmentDraw draw_augment(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "augment"));
  AugmentDraw d;
  for (auto& f : d.flip) f = rng.bernoulli(0.5);
  d.rot_axis = static_cast<int>(rng.below(3));
  d.rot_quarters = static_cast<int>(rng.below(4));
  return d;
}

Tensor apply_augment(const Tensor& volume, const AugmentDraw& draw) {
  if (volume.ndim() != 4 || volume.dim(1) != volume.dim(2) || volume.dim(2) != volume.dim(3)) {
    throw DimensionError("augment: expected a cubic [C,S,S,S] volume, got " + shape_str(volume.shape()));
  }
  const std::int64_t C = volume.dim(0), S = volume.dim(1), V = S * S * S;
  const int u = (draw.rot_axis + 1) % 3, w = (draw.rot_axis + 2) % 3;
  std::vector<std::int64_t> dest(static_cast<std::size_t>(V));
  for (std::int64_t i = 0; i < S; ++i) {
    for (std::int64_t j = 0; j < S; ++j) {
      for (std::int64_t k = 0; k < S; ++k) {
        std::array<std::int64_t, 3> p{i, j, k};
        for (int a = 0; a < 3; ++a) {
          if (draw.flip[a]) p[a] = S - 1 - p[a];
        }
        for (int q = 0; q < draw.rot_quarters; ++q) {
          const std::int64_t pu = p[u], pw = p[w];
          p[u] = pw;
          p[w] = S - 1 - pu;
        }
        dest[static_cast<std::size_t>((i * S + j) * S + k)] = (p[0] * S + p[1]) * S + p[2];
      }
    }
  }
  std::vector<double> out(static_cast<std::size_t>(C * V));
  const auto src = volume.data();
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t v = 0; v < V; ++v) out[c * V + dest[v]] = src[c * V + v];
  }
  return Tensor(volume.shape(), std::move(out));
}

Sample augment(const Sample& sample, std::uint64_t seed) {
  const AugmentDraw d = draw_augment(seed);
  if (d.is_identity()) return {sample.volume.detach(), sample.label.detach(), sample.id};
  return {apply_augment(sample.volume, d), apply_augment(sample.label, d), sample.id};
}

std::array<std::int64_t, 3> draw_crop_corner(std::int64_t volume_size, std::int64_t crop_size,
                                             std::uint64_t seed) {
  if (crop_size > volume_size || crop_size < 1) {
    throw std::invalid_argument("crop: size " + std::to_string(crop_size) +
                                " does not fit in volume of size " + std::to_string(volume_size));
  }
  Rng rng(derive_seed(seed, "crop"));
  std::array<std::int64_t, 3> c{};
  for (auto& v : c) v = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(volume_size - crop_size + 1)));
  return c;
}

Tensor crop_volume(const Tensor& volume, const std::array<std::int64_t, 3>& corner,
                   std::int64_t n) {
  if (volume.ndim() != 4) throw DimensionError("crop: expected [C,H,W,D] volume");
  const std::int64_t C = volume.dim(0), H = volume.dim(1), W = volume.dim(2), D = volume.dim(3);
  if (corner[0] + n > H || corner[1] + n > W || corner[2] + n > D) {
    throw std::invalid_argument("crop: window exceeds volume");
  }
  std::vector<double> out(static_cast<std::size_t>(C * n * n * n));
  const auto src = volume.data();
  std::size_t o = 0;
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        const auto base = ((c * H + corner[0] + i) * W + corner[1] + j) * D + corner[2];
        std::copy(src.begin() + base, src.begin() + base + n, out.begin() + static_cast<std::ptrdiff_t>(o));
        o += static_cast<std::size_t>(n);
      }
    }
  }
  return Tensor(Shape{C, n, n, n}, std::move(out));
}

Sample crop(const Sample& sample, std::int64_t crop_size, std::uint64_t seed) {
  const auto corner = draw_crop_corner(sample.volume.dim(1), crop_size, seed);
  return {crop_volume(sample.volume, corner, crop_size), crop_volume(sample.label, corner, crop_size),
          sample.id};
}

bool labels_nested(const Tensor& label) {
  const std::int64_t R = label.dim(0);
  const std::int64_t V = label.numel() / R;
  const auto d = label.data();
  for (std::int64_t r = 1; r < R; ++r) {
    for (std::int64_t v = 0; v < V; ++v) {
      if (d[r * V + v] != 0.0 && d[(r - 1) * V + v] == 0.0) return false;
    }
  }
  return true;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

std::vector<Split> assign_splits(std::int64_t n, std::uint64_t seed) {
  if (n < 3) throw std::invalid_argument("assign_splits: need at least 3 samples");
  std::int64_t n_train = n * 80 / 100;
  const std::int64_t n_val = std::max<std::int64_t>(1, n * 15 / 100);
  const std::int64_t n_test = std::max<std::int64_t>(1, n - n_train - n_val);
  n_train = n - n_val - n_test;
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, "split"));
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::swap(perm[i], perm[static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
  }
  std::vector<Split> out(static_cast<std::size_t>(n));
  for (std::int64_t r = 0; r < n; ++r) {
    out[perm[r]] = r < n_train ? Split::train : (r < n_train + n_val ? Split::val : Split::test);
  }
  return out;
}

}  // namespace bmds
