#pragma once

#include "bmds/backbone.hpp"
#include "bmds/tensor.hpp"

#include <vector>

namespace bmds {

struct LossWeights {
  double lambda1 = 0.4;  // deeper aux head (S/4)
  double lambda2 = 0.2;  // shallower aux head (S/2)
  double distill_weight = 0.2;
  double dice_smooth = 1e-5;
  double norm_eps = 1e-6;  // min-max spatial normalization guard
};

/// Multi-label soft Dice + mean binary cross-entropy on per-channel sigmoids.
/// Dice sums run over batch and space for each channel.
Tensor dice_ce(const Tensor& logits, const Tensor& target, double smooth = 1e-5);

/// Nearest-neighbour downsampling of a binary label volume.
Tensor downsample_labels(const Tensor& target, const std::array<std::int64_t, 3>& size);

struct SegTerms {
  Tensor main;
  Tensor aux_deep;
  Tensor aux_shallow;
  Tensor total;
};

SegTerms seg_terms(const NetOutput& out, const Tensor& target, const LossWeights& w);
Tensor seg_loss(const NetOutput& out, const Tensor& target, const LossWeights& w);

/// Sum over stages of mean_voxels (N(||D_i||_2) - N(Interp(mean_c M_att)))^2.
Tensor distill_loss(const std::vector<Tensor>& d_refined, const Tensor& m_att,
                    double norm_eps = 1e-6);

struct Stage1Loss {
  Tensor total;
  SegTerms seg;
  Tensor distill;  // undefined when the model has no MMCF attention
};

/// seg + distill_weight * distill. The distillation term needs the MMCF
/// attention map and is left out for wirings without MMCF.
Stage1Loss total_loss_stage1(const NetOutput& out, const Tensor& target, const LossWeights& w,
                             bool has_attention = true);

}  // namespace bmds
