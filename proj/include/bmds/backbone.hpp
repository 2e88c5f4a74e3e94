#pragma once

#include "bmds/fusion.hpp"
#include "bmds/layers.hpp"
#include "bmds/variational.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace bmds {

struct WiringFlags {
  bool use_mmcf = true;
  bool use_dds = true;

  bool operator==(const WiringFlags&) const = default;
};

/// Ablation variant name: baseline, mmcf_only, dds_only, bmds_net.
std::string variant_name(const WiringFlags& flags);
WiringFlags ablation_config(bool use_mmcf, bool use_dds);
const std::array<WiringFlags, 4>& all_ablation_variants();

struct ModelConfig {
  std::int64_t modalities = 4;
  std::int64_t regions = 3;
  WiringFlags flags;
  double alpha_init = 0.0;
  double gamma_init = 0.1;
  std::uint64_t seed = 0;
};

inline constexpr std::array<std::int64_t, 3> kEncoderWidths{16, 32, 64};

/// Compact 3-level encoder-decoder with skip connections.
///
/// encoder   enc0 @S (16) -> down -> enc1 @S/2 (32) -> down -> enc2 @S/4 (64)
/// bottleneck down -> @S/8 (64)
/// decoder   dec0 @S/4 (64), dec1 @S/2 (32), dec2 @S (16); each stage is
///           trilinear upsample, skip concat, two 3^3 conv + relu
/// heads     main 16 -> 3 on dec2; aux 64 -> 3 on dec0 and 32 -> 3 on dec1
struct BackboneState {
  std::array<ConvBlock, 3> enc;
  std::array<Conv3d, 3> down;
  ConvBlock bottleneck;
  std::array<ConvBlock, 3> dec;
  Conv3d main_head;
  std::array<Conv3d, 2> aux_heads;  // [0] deeper (S/4), [1] shallower (S/2)

  void collect(NamedParams& out) const;
};

BackboneState make_backbone(std::int64_t modalities, std::int64_t regions, std::uint64_t seed);

struct Model {
  ModelConfig config;
  MmcfState mmcf;                     // present only when flags.use_mmcf
  DdsState dds;                       // present only when flags.use_dds
  BackboneState backbone;
  std::optional<VariationalConvParams> bayes_head;  // replaces main_head when set

  /// Every tensor that defines the model, in checkpoint order.
  NamedParams named_parameters() const;
  /// Tensors updated by stage-1 training.
  std::vector<Tensor> trainable_parameters() const;
};

Model build_model(const ModelConfig& config);

struct NetOutput {
  Tensor logits_main;                // [B, 3, S, S, S]
  std::array<Tensor, 2> logits_aux;  // [B, 3, S/4, ...], [B, 3, S/2, ...]
  Tensor m_att;                      // MMCF attention, or the constant 0.5 map (dds_only)
  Tensor u_map;                      // undefined without MMCF
  std::vector<Tensor> d_refined;     // per decoder stage, coarse to fine
};

/// Everything up to (not including) the main head.
NetOutput forward_trunk(const Model& model, const Tensor& x);

/// Full forward. A Bayesian head contributes its posterior mean here; use
/// the sampling paths in bayes.hpp for stochastic predictions.
NetOutput forward(const Model& model, const Tensor& x);

/// Applies a 1^3 output layer with explicit weights to the finest decoder features.
Tensor apply_head(const Tensor& features, const Tensor& weight, const Tensor& bias);

}  // namespace bmds
