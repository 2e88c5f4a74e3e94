#include "bmds/fusion.hpp"

#include <stdexcept>
#include <string>

namespace bmds {

void MmcfState::collect(NamedParams& out) const {
  enc.collect("mmcf.enc", out);
  att_head.collect("mmcf.att_head", out);
  unc_head.collect("mmcf.unc_head", out);
  out.emplace_back("mmcf.alpha", alpha);
}

MmcfState make_mmcf(std::int64_t modalities, std::uint64_t seed, double alpha_init) {
  MmcfState s;
  s.enc = make_block(modalities, kMmcfWidth, seed, "mmcf.enc");
  s.att_head = make_conv(kMmcfWidth, modalities, 1, 1, 0, seed, "mmcf.att_head");
  s.unc_head = make_conv(kMmcfWidth, 1, 1, 1, 0, seed, "mmcf.unc_head");
  s.alpha = Tensor::scalar(alpha_init, true);
  return s;
}

MmcfOutput mmcf_forward(const MmcfState& state, const Tensor& x) {
  if (x.ndim() != 5 || x.dim(1) != state.modalities()) {
    throw DimensionError("mmcf_forward: expected " + std::to_string(state.modalities()) +
                         " modality channels, got input " + shape_str(x.shape()));
  }
  const Tensor feat = state.enc(x);
  MmcfOutput out;
  out.m_att = sigmoid(state.att_head(feat));
  out.u_map = sigmoid(state.unc_head(feat));
  out.x_fused = x + state.alpha * (x * out.m_att);
  return out;
}

void DdsState::collect(NamedParams& out) const {
  for (std::size_t i = 0; i < proj.size(); ++i) proj[i].collect("dds.proj" + std::to_string(i), out);
  out.emplace_back("dds.gamma", gamma);
}

DdsState make_dds(const std::vector<std::int64_t>& stage_channels, std::uint64_t seed,
                  double gamma_init) {
  DdsState s;
  for (std::size_t i = 0; i < stage_channels.size(); ++i) {
    s.proj.push_back(make_conv(1, stage_channels[i], 1, 1, 0, seed, "dds.proj" + std::to_string(i)));
  }
  s.gamma = Tensor::scalar(gamma_init, true);
  return s;
}

Tensor attention_at(const Tensor& m_att, const std::array<std::int64_t, 3>& size) {
  const Tensor avg = channel_mean(m_att);
  if (avg.dim(2) == size[0] && avg.dim(3) == size[1] && avg.dim(4) == size[2]) return avg;
  return interp3d(avg, size, InterpMode::trilinear);
}

Tensor dds_multiplier(const DdsState& state, const Tensor& m_att, std::size_t stage,
                      const std::array<std::int64_t, 3>& size) {
  if (stage >= state.proj.size()) {
    throw std::out_of_range("dds_gate: no projection registered for stage " + std::to_string(stage));
  }
  for (auto n : size) {
    if (n < 1) throw DimensionError("dds_gate: cannot resize attention to an empty grid");
  }
  const Tensor gate = sigmoid(state.proj[stage](attention_at(m_att, size)));
  return 1.0 + state.gamma * gate;
}

Tensor dds_gate(const DdsState& state, const Tensor& d_i, const Tensor& m_att, std::size_t stage) {
  if (d_i.ndim() != 5) throw DimensionError("dds_gate: expected [B,C,h,w,d], got " + shape_str(d_i.shape()));
  const Tensor g = dds_multiplier(state, m_att, stage, {d_i.dim(2), d_i.dim(3), d_i.dim(4)});
  if (g.dim(1) != d_i.dim(1)) {
    throw DimensionError("dds_gate: stage " + std::to_string(stage) + " projects to " +
                         std::to_string(g.dim(1)) + " channels but features have " +
                         std::to_string(d_i.dim(1)));
  }
  return d_i * g;
}

}  // namespace bmds
