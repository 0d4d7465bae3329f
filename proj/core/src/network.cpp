#include "agcm/network.hpp"

#include <algorithm>
#include <iostream>
#include <mutex>
#include <set>

#include "agcm/error.hpp"
#include "agcm/ops.hpp"

namespace agcm {

namespace {

std::string stage_prefix(const char* base, int stage) {
  return std::string(base) + ".s" + std::to_string(stage);
}

std::int64_t effective_rate(std::int64_t rate, std::int64_t h, std::int64_t w) {
  return rate < std::min(h, w) ? rate : 1;
}

void warn_rate_fallback_once(const std::string& prefix, std::int64_t rate, std::int64_t h,
                             std::int64_t w) {
  static std::mutex mu;
  static std::set<std::pair<std::string, std::int64_t>> warned;
  std::lock_guard<std::mutex> lock(mu);
  if (warned.emplace(prefix, rate).second) {
    std::cerr << "agcm-warning: '" << prefix << "' dilation rate " << rate
              << " exceeds the " << h << "x" << w << " feature map; using rate 1\n";
  }
}

}  // namespace

void NetworkConfig::validate() const {
  if (input_height < 32 || input_width < 32 || input_height % 32 != 0 || input_width % 32 != 0) {
    throw ConfigError("input dims must be positive multiples of 32 (five halving stages), got " +
                      std::to_string(input_height) + "x" + std::to_string(input_width));
  }
  for (const auto w : widths) {
    if (w < 1) throw ConfigError("encoder stage widths must be positive");
  }
  if (aspp_rates.empty()) throw ConfigError("at least one dilation rate is required");
  for (const auto r : aspp_rates) {
    if (r < 1) throw ConfigError("dilation rates must be >= 1");
  }
  for (int stage = 1; stage <= 5; ++stage) {
    if (agcm_stages[static_cast<std::size_t>(stage - 1)]) agcm_for_stage(stage).validate();
  }
}

AgcmConfig NetworkConfig::agcm_for_stage(int stage) const {
  AgcmConfig cfg = agcm;
  cfg.channels = widths[static_cast<std::size_t>(stage - 1)];
  return cfg;
}

std::int64_t NetworkConfig::skip_width(int stage) const {
  const std::int64_t base = widths[static_cast<std::size_t>(stage - 1)];
  return agcm_stages[static_cast<std::size_t>(stage - 1)] ? base + agcm.prototypes : base;
}

void declare_model(ParameterStore& store, const NetworkConfig& cfg) {
  cfg.validate();
  std::int64_t c_prev = 3;
  for (int stage = 1; stage <= 5; ++stage) {
    const std::int64_t c = cfg.widths[static_cast<std::size_t>(stage - 1)];
    declare_conv(store, stage_prefix("enc", stage) + ".a", c, c_prev, 3, 3);
    declare_conv(store, stage_prefix("enc", stage) + ".b", c, c, 3, 3);
    declare_conv(store, stage_prefix("enc", stage) + ".down", c, c, 3, 3);
    declare_conv1x1(store, stage_prefix("skip", stage), c, c);
    if (cfg.agcm_stages[static_cast<std::size_t>(stage - 1)]) {
      declare_agcm(store, stage_prefix("agcm", stage), cfg.agcm_for_stage(stage));
    }
    c_prev = c;
  }

  const std::int64_t top = cfg.skip_width(5);
  declare_conv1x1(store, "aspp.point", top, top);
  for (std::size_t i = 0; i < cfg.aspp_rates.size(); ++i) {
    declare_conv(store, "aspp.d" + std::to_string(i), top, top, 3, 3);
  }
  declare_conv1x1(store, "aspp.fuse", top,
                  top * static_cast<std::int64_t>(cfg.aspp_rates.size() + 1));

  std::int64_t above = top;
  for (int stage = 4; stage >= 1; --stage) {
    const std::int64_t c = cfg.widths[static_cast<std::size_t>(stage - 1)];
    declare_conv(store, stage_prefix("dec", stage), c, above + cfg.skip_width(stage), 3, 3);
    above = c;
  }
  declare_conv(store, "dec.head", cfg.widths[0], cfg.widths[0], 3, 3);
  declare_conv1x1(store, "dec.out", 1, cfg.widths[0]);
}

std::int64_t parameter_count(const NetworkConfig& cfg) {
  auto conv = [](std::int64_t c_out, std::int64_t c_in, std::int64_t k) {
    return c_out * c_in * k * k + c_out;
  };
  std::int64_t total = 0;
  std::int64_t c_prev = 3;
  for (int stage = 1; stage <= 5; ++stage) {
    const std::int64_t c = cfg.widths[static_cast<std::size_t>(stage - 1)];
    total += conv(c, c_prev, 3) + conv(c, c, 3) + conv(c, c, 3);  // a, b, down
    total += conv(c, c, 1);                                      // skip
    if (cfg.agcm_stages[static_cast<std::size_t>(stage - 1)]) {
      total += agcm_param_count(cfg.agcm_for_stage(stage));
    }
    c_prev = c;
  }
  const std::int64_t top = cfg.skip_width(5);
  const auto rates = static_cast<std::int64_t>(cfg.aspp_rates.size());
  total += conv(top, top, 1);                 // point branch
  total += rates * conv(top, top, 3);         // dilated branches
  total += conv(top, top * (rates + 1), 1);   // fuse
  std::int64_t above = top;
  for (int stage = 4; stage >= 1; --stage) {
    const std::int64_t c = cfg.widths[static_cast<std::size_t>(stage - 1)];
    total += conv(c, above + cfg.skip_width(stage), 3);
    above = c;
  }
  total += conv(cfg.widths[0], cfg.widths[0], 3);  // head
  total += conv(1, cfg.widths[0], 1);              // output
  return total;
}

std::array<Tensor, 5> encoder_forward(const ParameterStore& store, const NetworkConfig& cfg,
                                      const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.input_height ||
      image.dim(2) != cfg.input_width) {
    throw ConfigError("encoder expects a [3 x " + std::to_string(cfg.input_height) + " x " +
                      std::to_string(cfg.input_width) + "] image, got " + shape_str(image.shape()));
  }
  std::array<Tensor, 5> features;
  Tensor x = image;
  for (int stage = 1; stage <= 5; ++stage) {
    const std::string p = stage_prefix("enc", stage);
    x = relu(conv_forward(store, p + ".a", x, 1, 1, 1));
    x = relu(conv_forward(store, p + ".b", x, 1, 1, 1));
    x = conv_forward(store, p + ".down", x, 2, 1, 1);
    features[static_cast<std::size_t>(stage - 1)] = x;
  }
  return features;
}

Tensor aspp_forward(const ParameterStore& store, const std::string& prefix,
                    const std::vector<std::int64_t>& rates, const Tensor& x) {
  if (x.rank() != 3) {
    throw ShapeError("aspp expects rank-3 input, got " + shape_str(x.shape()));
  }
  const std::int64_t h = x.dim(1), w = x.dim(2);
  std::vector<Tensor> branches;
  branches.push_back(conv1x1_forward(store, prefix + ".point", x));
  for (std::size_t i = 0; i < rates.size(); ++i) {
    const std::int64_t eff = effective_rate(rates[i], h, w);
    if (eff != rates[i]) warn_rate_fallback_once(prefix, rates[i], h, w);
    // padding = dilation keeps the spatial dims of a 3x3 branch.
    branches.push_back(conv_forward(store, prefix + ".d" + std::to_string(i), x, 1, eff, eff));
  }
  return conv1x1_forward(store, prefix + ".fuse", concat(branches, 0));
}

Tensor model_forward(const ParameterStore& store, const NetworkConfig& cfg, const Tensor& image) {
  cfg.validate();
  const auto features = encoder_forward(store, cfg, image);

  std::array<Tensor, 5> skips;
  for (int stage = 1; stage <= 5; ++stage) {
    Tensor t = conv1x1_forward(store, stage_prefix("skip", stage),
                               features[static_cast<std::size_t>(stage - 1)]);
    if (cfg.agcm_stages[static_cast<std::size_t>(stage - 1)]) {
      t = agcm_forward(store, stage_prefix("agcm", stage), cfg.agcm_for_stage(stage), t);
    }
    if (stage == 5) t = aspp_forward(store, "aspp", cfg.aspp_rates, t);
    skips[static_cast<std::size_t>(stage - 1)] = t;
  }

  Tensor d = skips[4];
  for (int stage = 4; stage >= 1; --stage) {
    Tensor merged = concat({upsample_nearest2(d), skips[static_cast<std::size_t>(stage - 1)]}, 0);
    d = relu(conv_forward(store, stage_prefix("dec", stage), merged, 1, 1, 1));
  }
  Tensor full = relu(conv_forward(store, "dec.head", upsample_nearest2(d), 1, 1, 1));
  return sigmoid(conv1x1_forward(store, "dec.out", full));
}

}  // namespace agcm
