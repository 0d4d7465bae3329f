#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "agcm/ops.hpp"
#include "agcm/tensor.hpp"

namespace agcm {

/// All learnable weights, keyed by hierarchical path. Paths enumerate in
/// lexicographic order, which fixes the initialization and optimizer-state
/// ordering. Declaring a path twice with the same shape returns the existing
/// tensor; a shape conflict is a configuration error.
class ParameterStore {
 public:
  struct Entry {
    Tensor tensor;
    std::int64_t fan_in = 0;
    std::int64_t fan_out = 0;
    bool is_bias = false;
  };

  /// Declare-or-fetch a parameter. New tensors are zero until init_params or
  /// a checkpoint load assigns values; requires_grad is always set.
  Tensor param(const std::string& path, const Shape& shape, std::int64_t fan_in,
               std::int64_t fan_out, bool is_bias);

  bool contains(const std::string& path) const;
  Tensor get(const std::string& path) const;
  std::vector<std::string> paths() const;
  std::size_t size() const { return entries_.size(); }
  std::int64_t total_params() const;
  void zero_grads();

  bool initialized() const { return initialized_; }
  void mark_initialized() { initialized_ = true; }

  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  std::map<std::string, Entry> entries_;
  bool initialized_ = false;
};

enum class InitScheme { XavierUniform };

/// Fills declared parameters: weights uniform in +-sqrt(6/(fan_in+fan_out)),
/// biases zero. Deterministic under the seed; lexicographic path order.
/// Throws UsageError if the store was already initialized.
void init_params(ParameterStore& store, InitScheme scheme, std::uint64_t seed);

/// Fully connected stack. `widths` lists [d_in, hidden..., d_out]; with
/// fewer than two widths the forward is the identity. Hidden layers use
/// relu; the final layer is affine.
struct MlpSpec {
  std::vector<std::int64_t> widths;
};

/// Multi-head self-attention over a [tokens x dim] matrix; dim must divide
/// evenly into heads.
struct MhaSpec {
  std::int64_t dim = 0;
  std::int64_t heads = 1;
  void validate() const;
};

void declare_linear(ParameterStore& store, const std::string& prefix, std::int64_t out_dim,
                    std::int64_t in_dim);
/// x may be rank-1 [in] or rank-2 [rows x in].
Tensor linear_forward(const ParameterStore& store, const std::string& prefix, const Tensor& x);

void declare_mlp(ParameterStore& store, const std::string& prefix, const MlpSpec& spec);
Tensor mlp_forward(const ParameterStore& store, const std::string& prefix, const MlpSpec& spec,
                   const Tensor& x);

void declare_mha(ParameterStore& store, const std::string& prefix, const MhaSpec& spec);
/// Scaled dot-product self-attention with learned Q/K/V/output projections.
/// Per-head scale is 1/sqrt(dim/heads). Row-wise reductions accumulate in
/// value-sorted order, so permuting the input rows permutes the output rows
/// bitwise-identically.
Tensor mha_forward(const ParameterStore& store, const std::string& prefix, const MhaSpec& spec,
                   const Tensor& tokens);

void declare_conv(ParameterStore& store, const std::string& prefix, std::int64_t c_out,
                  std::int64_t c_in, std::int64_t kh, std::int64_t kw);
Tensor conv_forward(const ParameterStore& store, const std::string& prefix, const Tensor& x,
                    std::int64_t stride, std::int64_t dilation, std::int64_t padding);

void declare_conv1x1(ParameterStore& store, const std::string& prefix, std::int64_t c_out,
                     std::int64_t c_in);
/// Pointwise channel mix of a rank-3 [c x h x w] tensor.
Tensor conv1x1_forward(const ParameterStore& store, const std::string& prefix, const Tensor& x);

}  // namespace agcm
