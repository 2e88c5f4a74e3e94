#include "bmds/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace bmds {

Mask3::Mask3(std::array<std::int64_t, 3> d, std::vector<std::uint8_t> v)
    : dims(d), voxels(std::move(v)) {
  if (static_cast<std::int64_t>(voxels.size()) != size()) {
    throw std::invalid_argument("Mask3: voxel count does not match dims");
  }
}

bool Mask3::empty() const {
  return std::none_of(voxels.begin(), voxels.end(), [](std::uint8_t v) { return v != 0; });
}

Mask3 threshold_mask(std::span<const double> probs, std::array<std::int64_t, 3> dims,
                     double threshold) {
  std::vector<std::uint8_t> v(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) v[i] = probs[i] >= threshold ? 1 : 0;
  return Mask3(dims, std::move(v));
}

double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("dice_score: size mismatch");
  std::int64_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += p && g;
    np += p;
    ng += g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

double dice_score(const Mask3& pred, const Mask3& gt) {
  if (pred.dims != gt.dims) throw std::invalid_argument("dice_score: grid mismatch");
  return dice_score(std::span<const std::uint8_t>(pred.voxels), std::span<const std::uint8_t>(gt.voxels));
}

std::vector<std::array<std::int64_t, 3>> boundary_voxels(const Mask3& m) {
  std::vector<std::array<std::int64_t, 3>> out;
  const auto [H, W, D] = m.dims;
  auto fg = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    return i >= 0 && i < H && j >= 0 && j < W && k >= 0 && k < D && m.at(i, j, k);
  };
  for (std::int64_t i = 0; i < H; ++i) {
    for (std::int64_t j = 0; j < W; ++j) {
      for (std::int64_t k = 0; k < D; ++k) {
        if (!m.at(i, j, k)) continue;
        if (!fg(i - 1, j, k) || !fg(i + 1, j, k) || !fg(i, j - 1, k) || !fg(i, j + 1, k) ||
            !fg(i, j, k - 1) || !fg(i, j, k + 1)) {
          out.push_back({i, j, k});
        }
      }
    }
  }
  return out;
}

namespace {

constexpr double kFar = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one line.
void edt_1d(const double* f, std::int64_t n, std::int64_t stride, double* out,
            std::vector<std::int64_t>& v, std::vector<double>& z, std::vector<double>& tmp) {
  tmp.resize(static_cast<std::size_t>(n));
  v.resize(static_cast<std::size_t>(n));
  z.resize(static_cast<std::size_t>(n) + 1);
  std::int64_t k = -1;
  for (std::int64_t q = 0; q < n; ++q) {
    const double fq = f[q * stride];
    if (fq == kFar) continue;
    const double dq = static_cast<double>(q);
    while (k >= 0) {
      const double p = static_cast<double>(v[k]);
      const double s = ((fq + dq * dq) - (f[v[k] * stride] + p * p)) / (2.0 * dq - 2.0 * p);
      if (s <= z[k]) {
        --k;
      } else {
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kFar;
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kFar;
      z[1] = kFar;
    }
  }
  if (k < 0) {
    for (std::int64_t q = 0; q < n; ++q) tmp[q] = kFar;
  } else {
    std::int64_t j = 0;
    for (std::int64_t q = 0; q < n; ++q) {
      const double dq = static_cast<double>(q);
      while (z[j + 1] < dq) ++j;
      const double d = dq - static_cast<double>(v[j]);
      tmp[q] = d * d + f[v[j] * stride];
    }
  }
  for (std::int64_t q = 0; q < n; ++q) out[q * stride] = tmp[q];
}

}  // namespace

std::vector<double> squared_distance_transform(const Mask3& features) {
  const auto [H, W, D] = features.dims;
  std::vector<double> g(static_cast<std::size_t>(features.size()));
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = features.voxels[i] ? 0.0 : kFar;
  std::vector<std::int64_t> v;
  std::vector<double> z, tmp;
  for (std::int64_t i = 0; i < H; ++i) {
    for (std::int64_t j = 0; j < W; ++j) {
      double* line = g.data() + (i * W + j) * D;
      edt_1d(line, D, 1, line, v, z, tmp);
    }
  }
  for (std::int64_t i = 0; i < H; ++i) {
    for (std::int64_t k = 0; k < D; ++k) {
      double* line = g.data() + i * W * D + k;
      edt_1d(line, W, D, line, v, z, tmp);
    }
  }
  for (std::int64_t j = 0; j < W; ++j) {
    for (std::int64_t k = 0; k < D; ++k) {
      double* line = g.data() + j * D + k;
      edt_1d(line, H, W * D, line, v, z, tmp);
    }
  }
  return g;
}

std::size_t nearest_rank_index(std::size_t n, int percent) {
  if (n == 0) throw std::invalid_argument("nearest_rank_index: empty sample");
  const std::size_t rank = (static_cast<std::size_t>(percent) * n + 99) / 100;
  return std::max<std::size_t>(rank, 1) - 1;
}

namespace {

double directed_p95(const std::vector<std::array<std::int64_t, 3>>& from, const Mask3& to_boundary) {
  const auto dt = squared_distance_transform(to_boundary);
  std::vector<double> d;
  d.reserve(from.size());
  for (const auto& p : from) {
    d.push_back(std::sqrt(dt[static_cast<std::size_t>(to_boundary.index(p[0], p[1], p[2]))]));
  }
  const std::size_t r = nearest_rank_index(d.size(), 95);
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(r), d.end());
  return d[r];
}

Mask3 as_mask(const std::vector<std::array<std::int64_t, 3>>& pts, std::array<std::int64_t, 3> dims) {
  Mask3 m(dims);
  for (const auto& p : pts) m.voxels[static_cast<std::size_t>(m.index(p[0], p[1], p[2]))] = 1;
  return m;
}

}  // namespace

std::optional<double> hd95(const Mask3& pred, const Mask3& gt) {
  if (pred.dims != gt.dims) throw std::invalid_argument("hd95: grid mismatch");
  const bool pe = pred.empty(), ge = gt.empty();
  if (pe && ge) return 0.0;
  if (pe || ge) return std::nullopt;
  const auto bp = boundary_voxels(pred);
  const auto bg = boundary_voxels(gt);
  const double a = directed_p95(bp, as_mask(bg, gt.dims));
  const double b = directed_p95(bg, as_mask(bp, pred.dims));
  return std::max(a, b);
}

double ece_from_confidence(std::span<const double> confidence, std::span<const std::uint8_t> correct,
                           int bins) {
  if (bins <= 0) throw std::invalid_argument("ece: bins must be positive, got " + std::to_string(bins));
  if (confidence.size() != correct.size()) throw std::invalid_argument("ece: size mismatch");
  if (confidence.empty()) throw std::invalid_argument("ece: no samples");
  std::vector<double> conf_sum(static_cast<std::size_t>(bins), 0.0);
  std::vector<double> acc_sum(static_cast<std::size_t>(bins), 0.0);
  std::vector<std::int64_t> count(static_cast<std::size_t>(bins), 0);
  const double width = 0.5 / static_cast<double>(bins);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const double c = confidence[i];
    auto b = static_cast<std::int64_t>(std::floor((c - 0.5) / width));
    b = std::clamp<std::int64_t>(b, 0, bins - 1);
    conf_sum[b] += c;
    acc_sum[b] += correct[i] ? 1.0 : 0.0;
    ++count[b];
  }
  const double n = static_cast<double>(confidence.size());
  double e = 0.0;
  for (int b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const double nb = static_cast<double>(count[b]);
    e += (nb / n) * std::abs(acc_sum[b] / nb - conf_sum[b] / nb);
  }
  return e;
}

double ece(std::span<const double> probs, std::span<const std::uint8_t> labels, int bins) {
  if (probs.size() != labels.size()) throw std::invalid_argument("ece: size mismatch");
  std::vector<double> conf(probs.size());
  std::vector<std::uint8_t> ok(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("ece: probability outside [0,1]");
    conf[i] = std::max(p, 1.0 - p);
    ok[i] = ((p >= 0.5) == (labels[i] != 0)) ? 1 : 0;
  }
  return ece_from_confidence(conf, ok, bins);
}

double nll(std::span<const double> probs, std::span<const std::uint8_t> labels) {
  if (probs.size() != labels.size()) throw std::invalid_argument("nll: size mismatch");
  if (probs.empty()) throw std::invalid_argument("nll: no samples");
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], 1e-7, 1.0 - 1e-7);
    s -= labels[i] ? std::log(p) : std::log(1.0 - p);
  }
  return s / static_cast<double>(probs.size());
}

double uncertainty_error_auc(std::span<const double> scores, std::span<const std::uint8_t> error) {
  if (scores.size() != error.size()) throw std::invalid_argument("uncertainty_error_auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::int64_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // Average of 1-based ranks i+1 .. j.
    const double rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (error[order[k]]) {
        pos_rank_sum += rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::int64_t n_neg = static_cast<std::int64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw std::invalid_argument("uncertainty_error_auc: need both error and correct voxels");
  }
  const double u = pos_rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace bmds
