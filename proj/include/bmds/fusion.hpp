#pragma once

#include "bmds/layers.hpp"
#include "bmds/tensor.hpp"

#include <cstdint>
#include <vector>

namespace bmds {

/// Zero-init multimodal contextual fusion.
///
///   F     = enc(X)                     two 3^3 conv + relu, C_in -> 8 -> 8
///   M_att = sigmoid(att_head(F))       1^3 conv, 8 -> C_in
///   U_map = sigmoid(unc_head(F))       1^3 conv, 8 -> 1
///   X'    = X + alpha * (X (.) M_att)
///
/// alpha starts at exactly 0, so the module is an identity map until trained.
struct MmcfState {
  ConvBlock enc;
  Conv3d att_head;
  Conv3d unc_head;
  Tensor alpha;  // scalar

  std::int64_t modalities() const { return att_head.out_channels(); }
  void collect(NamedParams& out) const;
};

inline constexpr std::int64_t kMmcfWidth = 8;

MmcfState make_mmcf(std::int64_t modalities, std::uint64_t seed, double alpha_init = 0.0);

struct MmcfOutput {
  Tensor x_fused;
  Tensor m_att;  // [B, C_in, S, S, S], in (0, 1)
  Tensor u_map;  // [B, 1, S, S, S], in (0, 1); exposed, not consumed by any loss
};

MmcfOutput mmcf_forward(const MmcfState& state, const Tensor& x);

/// Residual-gated decoder supervision: one 1 -> C_stage projection per
/// decoder stage and a shared scalar gamma (initially 0.1).
struct DdsState {
  std::vector<Conv3d> proj;
  Tensor gamma;  // scalar

  void collect(NamedParams& out) const;
};

DdsState make_dds(const std::vector<std::int64_t>& stage_channels, std::uint64_t seed,
                  double gamma_init = 0.1);

/// Modality-averaged attention resized to `size` (trilinear).
Tensor attention_at(const Tensor& m_att, const std::array<std::int64_t, 3>& size);

/// d_i (.) (1 + gamma * sigmoid(proj_stage(Interp(mean_c M_att)))).
Tensor dds_gate(const DdsState& state, const Tensor& d_i, const Tensor& m_att, std::size_t stage);

/// The multiplier G_i alone, for inspection and tests.
Tensor dds_multiplier(const DdsState& state, const Tensor& m_att, std::size_t stage,
                      const std::array<std::int64_t, 3>& size);

}  // namespace bmds
