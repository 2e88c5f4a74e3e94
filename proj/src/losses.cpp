#include "bmds/losses.hpp"

#include <stdexcept>

namespace bmds {

namespace {

void require_binary(const Tensor& t) {
  for (double v : t.data()) {
    if (v != 0.0 && v != 1.0) {
      throw std::invalid_argument("dice_ce: target contains a value outside {0,1}: " +
                                  std::to_string(v));
    }
  }
}

}  // namespace

Tensor dice_ce(const Tensor& logits, const Tensor& target, double smooth) {
  if (logits.shape() != target.shape()) {
    throw DimensionError("dice_ce: logits " + shape_str(logits.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  if (logits.ndim() < 2) throw DimensionError("dice_ce: expected [B,C,...] logits");
  require_binary(target);
  std::vector<std::size_t> axes{0};
  for (std::size_t d = 2; d < logits.ndim(); ++d) axes.push_back(d);

  const Tensor p = sigmoid(logits);
  const Tensor inter = sum(p * target, axes);
  const Tensor denom = sum(p, axes) + sum(target, axes) + smooth;
  const Tensor dice = (2.0 * inter + smooth) / denom;
  const Tensor dice_loss = 1.0 - mean(dice);
  // BCE with logits: softplus(x) - y x.
  const Tensor ce = mean(softplus(logits) - target * logits);
  return dice_loss + ce;
}

Tensor downsample_labels(const Tensor& target, const std::array<std::int64_t, 3>& size) {
  if (target.dim(2) == size[0] && target.dim(3) == size[1] && target.dim(4) == size[2]) {
    return target;
  }
  NoGradGuard guard;
  return interp3d(target, size, InterpMode::nearest);
}

SegTerms seg_terms(const NetOutput& out, const Tensor& target, const LossWeights& w) {
  SegTerms t;
  t.main = dice_ce(out.logits_main, target, w.dice_smooth);
  auto aux = [&](const Tensor& logits) {
    const Tensor y = downsample_labels(target, {logits.dim(2), logits.dim(3), logits.dim(4)});
    return dice_ce(logits, y, w.dice_smooth);
  };
  t.aux_deep = aux(out.logits_aux[0]);
  t.aux_shallow = aux(out.logits_aux[1]);
  t.total = t.main + w.lambda1 * t.aux_deep + w.lambda2 * t.aux_shallow;
  return t;
}

Tensor seg_loss(const NetOutput& out, const Tensor& target, const LossWeights& w) {
  return seg_terms(out, target, w).total;
}

Tensor distill_loss(const std::vector<Tensor>& d_refined, const Tensor& m_att, double norm_eps) {
  if (d_refined.empty()) throw std::invalid_argument("distill_loss: no decoder stages");
  if (!m_att.defined()) throw std::invalid_argument("distill_loss: attention map is undefined");
  Tensor total;
  for (const auto& d : d_refined) {
    const Tensor feat = minmax_normalize(channel_l2_norm(d), norm_eps);
    const Tensor att =
        minmax_normalize(attention_at(m_att, {d.dim(2), d.dim(3), d.dim(4)}), norm_eps);
    const Tensor term = mean(square(feat - att));
    total = total.defined() ? total + term : term;
  }
  return total;
}

Stage1Loss total_loss_stage1(const NetOutput& out, const Tensor& target, const LossWeights& w,
                             bool has_attention) {
  Stage1Loss l;
  l.seg = seg_terms(out, target, w);
  l.total = l.seg.total;
  if (has_attention && w.distill_weight != 0.0) {
    l.distill = distill_loss(out.d_refined, out.m_att, w.norm_eps);
    l.total = l.total + w.distill_weight * l.distill;
  }
  return l;
}

}  // namespace bmds
