#include "bmds/layers.hpp"

#include "bmds/rng.hpp"

#include <cmath>

namespace bmds {

void Conv3d::collect(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

Conv3d make_conv(std::int64_t in_ch, std::int64_t out_ch, int kernel, int stride, int padding,
                 std::uint64_t seed, const std::string& name) {
  Shape ws{out_ch, in_ch, kernel, kernel, kernel};
  std::vector<double> w(static_cast<std::size_t>(numel_of(ws)));
  const double fan_in = static_cast<double>(in_ch * kernel * kernel * kernel);
  const double std = std::sqrt(2.0 / fan_in);
  Rng rng(derive_seed(seed, name));
  for (auto& v : w) v = rng.normal(0.0, std);
  Conv3d conv;
  conv.weight = Tensor(ws, std::move(w), true);
  conv.bias = Tensor(Shape{out_ch}, 0.0, true);
  conv.stride = stride;
  conv.padding = padding;
  return conv;
}

void ConvBlock::collect(const std::string& prefix, NamedParams& out) const {
  first.collect(prefix + ".0", out);
  second.collect(prefix + ".1", out);
}

ConvBlock make_block(std::int64_t in_ch, std::int64_t out_ch, std::uint64_t seed,
                     const std::string& name) {
  return {make_conv(in_ch, out_ch, 3, 1, 1, seed, name + ".0"),
          make_conv(out_ch, out_ch, 3, 1, 1, seed, name + ".1")};
}

std::int64_t parameter_count(const NamedParams& params) {
  std::int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

}  // namespace bmds
