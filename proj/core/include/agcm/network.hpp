#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "agcm/agcm.hpp"
#include "agcm/nn.hpp"
#include "agcm/tensor.hpp"

namespace agcm {

/// Encoder-decoder host: five halving encoder stages, pointwise skip
/// connections with graph modules on the flagged stages, a multi-rate
/// dilated block on the top skip, and a progressive decoder emitting a
/// sigmoid mask at input resolution.
struct NetworkConfig {
  std::int64_t input_height = 64;
  std::int64_t input_width = 64;
  std::array<std::int64_t, 5> widths = {8, 16, 24, 32, 40};
  std::array<bool, 5> agcm_stages = {false, false, false, true, true};
  AgcmConfig agcm;  // channel width bound per placed stage
  std::vector<std::int64_t> aspp_rates = {1, 2, 4};

  void validate() const;
  /// The module configuration bound to one stage's channel width.
  AgcmConfig agcm_for_stage(int stage) const;
  /// Skip tensor width entering the decoder from `stage` (1-based).
  std::int64_t skip_width(int stage) const;
};

/// Declares every learnable tensor of the model under the store.
void declare_model(ParameterStore& store, const NetworkConfig& cfg);

/// Closed-form learnable parameter count for a configuration; matches
/// ParameterStore::total_params() after declare_model.
std::int64_t parameter_count(const NetworkConfig& cfg);

/// Five feature maps, stage i at widths[i-1] x H/2^i x W/2^i.
std::array<Tensor, 5> encoder_forward(const ParameterStore& store, const NetworkConfig& cfg,
                                      const Tensor& image);

/// Parallel dilated 3x3 branches plus a pointwise branch, fused back to the
/// input width. A rate too large for the spatial extent falls back to 1
/// with a once-per-rate warning.
Tensor aspp_forward(const ParameterStore& store, const std::string& prefix,
                    const std::vector<std::int64_t>& rates, const Tensor& x);

/// Full forward pass: [3 x H x W] image to [1 x H x W] mask in (0,1).
Tensor model_forward(const ParameterStore& store, const NetworkConfig& cfg, const Tensor& image);

}  // namespace agcm
