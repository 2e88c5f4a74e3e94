#include "bmds/backbone.hpp"

#include <stdexcept>

namespace bmds {

std::string variant_name(const WiringFlags& f) {
  if (f.use_mmcf && f.use_dds) return "bmds_net";
  if (f.use_mmcf) return "mmcf_only";
  if (f.use_dds) return "dds_only";
  return "baseline";
}

WiringFlags ablation_config(bool use_mmcf, bool use_dds) { return {use_mmcf, use_dds}; }

const std::array<WiringFlags, 4>& all_ablation_variants() {
  static const std::array<WiringFlags, 4> v{WiringFlags{false, false}, WiringFlags{true, false},
                                            WiringFlags{false, true}, WiringFlags{true, true}};
  return v;
}

void BackboneState::collect(NamedParams& out) const {
  for (int i = 0; i < 3; ++i) enc[i].collect("enc" + std::to_string(i), out);
  for (int i = 0; i < 3; ++i) down[i].collect("down" + std::to_string(i), out);
  bottleneck.collect("bottleneck", out);
  for (int i = 0; i < 3; ++i) dec[i].collect("dec" + std::to_string(i), out);
  main_head.collect("head", out);
  for (int i = 0; i < 2; ++i) aux_heads[i].collect("aux" + std::to_string(i), out);
}

BackboneState make_backbone(std::int64_t modalities, std::int64_t regions, std::uint64_t seed) {
  const auto& w = kEncoderWidths;
  BackboneState bb;
  bb.enc[0] = make_block(modalities, w[0], seed, "enc0");
  bb.down[0] = make_conv(w[0], w[0], 3, 2, 1, seed, "down0");
  bb.enc[1] = make_block(w[0], w[1], seed, "enc1");
  bb.down[1] = make_conv(w[1], w[1], 3, 2, 1, seed, "down1");
  bb.enc[2] = make_block(w[1], w[2], seed, "enc2");
  bb.down[2] = make_conv(w[2], w[2], 3, 2, 1, seed, "down2");
  bb.bottleneck = make_block(w[2], w[2], seed, "bottleneck");
  // Decoder input = upsampled coarser features + skip.
  bb.dec[0] = make_block(w[2] + w[2], w[2], seed, "dec0");
  bb.dec[1] = make_block(w[2] + w[1], w[1], seed, "dec1");
  bb.dec[2] = make_block(w[1] + w[0], w[0], seed, "dec2");
  bb.main_head = make_conv(w[0], regions, 1, 1, 0, seed, "head");
  bb.aux_heads[0] = make_conv(w[2], regions, 1, 1, 0, seed, "aux0");
  bb.aux_heads[1] = make_conv(w[1], regions, 1, 1, 0, seed, "aux1");
  return bb;
}

NamedParams Model::named_parameters() const {
  NamedParams out;
  if (config.flags.use_mmcf) mmcf.collect(out);
  if (config.flags.use_dds) dds.collect(out);
  backbone.collect(out);
  if (bayes_head) bayes_head->collect("bayes_head", out);
  return out;
}

std::vector<Tensor> Model::trainable_parameters() const {
  std::vector<Tensor> out;
  NamedParams all;
  if (config.flags.use_mmcf) mmcf.collect(all);
  if (config.flags.use_dds) dds.collect(all);
  backbone.collect(all);
  for (auto& [name, t] : all) out.push_back(t);
  return out;
}

Model build_model(const ModelConfig& config) {
  Model m;
  m.config = config;
  if (config.flags.use_mmcf) m.mmcf = make_mmcf(config.modalities, config.seed, config.alpha_init);
  if (config.flags.use_dds) {
    m.dds = make_dds({kEncoderWidths[2], kEncoderWidths[1], kEncoderWidths[0]}, config.seed,
                     config.gamma_init);
  }
  m.backbone = make_backbone(config.modalities, config.regions, config.seed);
  return m;
}

namespace {

std::array<std::int64_t, 3> spatial(const Tensor& t) { return {t.dim(2), t.dim(3), t.dim(4)}; }

}  // namespace

NetOutput forward_trunk(const Model& model, const Tensor& x) {
  const auto& cfg = model.config;
  if (x.ndim() != 5 || x.dim(1) != cfg.modalities) {
    throw DimensionError("forward: expected [B," + std::to_string(cfg.modalities) +
                         ",S,S,S] input, got " + shape_str(x.shape()));
  }
  for (int d = 2; d < 5; ++d) {
    if (x.dim(d) % 8 != 0 || x.dim(d) == 0) {
      throw std::invalid_argument("forward: spatial size " + std::to_string(x.dim(d)) +
                                  " is not divisible by 8");
    }
  }
  const auto& bb = model.backbone;
  NetOutput out;
  Tensor h = x;
  if (cfg.flags.use_mmcf) {
    auto fused = mmcf_forward(model.mmcf, x);
    h = fused.x_fused;
    out.m_att = fused.m_att;
    out.u_map = fused.u_map;
  } else if (cfg.flags.use_dds) {
    // No attention source without MMCF: gate on the post-sigmoid neutral value.
    out.m_att = Tensor(Shape{x.dim(0), 1, x.dim(2), x.dim(3), x.dim(4)}, 0.5);
  }

  std::array<Tensor, 3> skips;
  for (int i = 0; i < 3; ++i) {
    h = bb.enc[i](h);
    skips[i] = h;
    h = relu(bb.down[i](h));
  }
  h = bb.bottleneck(h);

  for (int i = 0; i < 3; ++i) {
    const Tensor& skip = skips[2 - i];
    const Tensor up = interp3d(h, spatial(skip), InterpMode::trilinear);
    h = bb.dec[i](cat({up, skip}, 1));
    if (cfg.flags.use_dds) h = dds_gate(model.dds, h, out.m_att, static_cast<std::size_t>(i));
    out.d_refined.push_back(h);
    if (i < 2) out.logits_aux[i] = bb.aux_heads[i](h);
  }
  return out;
}

Tensor apply_head(const Tensor& features, const Tensor& weight, const Tensor& bias) {
  return conv3d(features, weight, bias, 1, 0);
}

NetOutput forward(const Model& model, const Tensor& x) {
  NetOutput out = forward_trunk(model, x);
  const Tensor& feat = out.d_refined.back();
  if (model.bayes_head) {
    out.logits_main = apply_head(feat, model.bayes_head->mu_weight, model.bayes_head->mu_bias);
  } else {
    out.logits_main = model.backbone.main_head(feat);
  }
  return out;
}

}  // namespace bmds
