#pragma once

#include "bmds/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace bmds {

/// Ordered (name, tensor) table. Order is part of the checkpoint contract.
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct Conv3d {
  Tensor weight;  // [Co, Ci, k, k, k]
  Tensor bias;    // [Co]
  int stride = 1;
  int padding = 0;

  std::int64_t in_channels() const { return weight.dim(1); }
  std::int64_t out_channels() const { return weight.dim(0); }
  int kernel() const { return static_cast<int>(weight.dim(2)); }

  Tensor operator()(const Tensor& x) const { return conv3d(x, weight, bias, stride, padding); }
  void collect(const std::string& prefix, NamedParams& out) const;
};

/// He-normal weights, zero bias. The stream is derived from (seed, name) so
/// a layer's initial values do not depend on which other layers exist.
Conv3d make_conv(std::int64_t in_ch, std::int64_t out_ch, int kernel, int stride, int padding,
                 std::uint64_t seed, const std::string& name);

/// Two 3^3 conv + relu layers.
struct ConvBlock {
  Conv3d first;
  Conv3d second;

  Tensor operator()(const Tensor& x) const { return relu(second(relu(first(x)))); }
  void collect(const std::string& prefix, NamedParams& out) const;
};

ConvBlock make_block(std::int64_t in_ch, std::int64_t out_ch, std::uint64_t seed,
                     const std::string& name);

std::int64_t parameter_count(const NamedParams& params);

}  // namespace bmds
