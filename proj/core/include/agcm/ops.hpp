#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "agcm/tensor.hpp"

namespace agcm {

// Differentiable tensor operations. Every op validates shapes at the
// boundary, computes the forward value eagerly, and, when a tape is active
// and an input requires gradients, records a backward rule on it.

/// Matrix product of rank-2 tensors [m x n] * [n x p] -> [m x p].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Rank-2 transpose.
Tensor transpose(const Tensor& a);

/// Same-numel reshape (copies).
Tensor reshape(const Tensor& a, Shape shape);

/// Contiguous range along one axis.
Tensor slice(const Tensor& a, std::size_t axis, std::int64_t start, std::int64_t length);

/// Concatenation along one axis; all other dims must agree.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

/// Numerically stabilized softmax along `axis`; each slice sums to 1.
Tensor softmax(const Tensor& a, std::size_t axis);

/// Elementwise sum; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
/// Elementwise difference; shapes must match exactly.
Tensor sub(const Tensor& a, const Tensor& b);

/// Elementwise product. `b` is either shaped like `a` or a rank-1 vector of
/// length a.dim(0) broadcast across the remaining axes of `a`.
Tensor hadamard(const Tensor& a, const Tensor& b);

/// a + b with b rank-1 of length a.dim(0), broadcast across remaining axes.
Tensor add_bcast0(const Tensor& a, const Tensor& b);
/// Rank-2 a plus row vector b of length a.dim(1), added to every row.
Tensor add_bcast1(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
/// Natural log; inputs must be strictly positive.
Tensor log(const Tensor& a);
/// Square root; inputs must be non-negative.
Tensor sqrt(const Tensor& a);
/// 1/x; inputs must be nonzero.
Tensor reciprocal(const Tensor& a);
/// max(x, c); gradient is zero on the clamped side.
Tensor clamp_min(const Tensor& a, double c);

/// Sum of all elements, as a one-element tensor.
Tensor sum(const Tensor& a);
/// Sum along `axis`; the axis is removed from the shape.
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);

struct MaxResult {
  Tensor values;                     // shape with `axis` removed
  std::vector<std::int64_t> argmax;  // index along `axis` per output element
};
/// Max along `axis`. Gradient routes to the attaining element; ties take the
/// first (lowest) index.
MaxResult max(const Tensor& a, std::size_t axis);

/// Column gather on a rank-2 tensor: out[:, m] = a[:, idx[m]]. The index
/// list is non-differentiable structure; gradients scatter-add back.
Tensor gather_cols(const Tensor& a, const std::vector<std::int64_t>& idx);

/// Elementwise max over consecutive groups of `group` columns of a rank-2
/// tensor [c x e] -> [c x e/group]. Ties take the first column.
Tensor colgroup_max(const Tensor& a, std::int64_t group);

/// 2-D cross-correlation of x [c_in x h x w] with kernel
/// [c_out x c_in x kh x kw]. Output spatial dims follow
/// floor((h + 2*pad - dilation*(kh-1) - 1)/stride) + 1 and must be positive.
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::int64_t stride,
              std::int64_t dilation, std::int64_t padding);

/// Nearest-neighbor 2x upsampling of a rank-3 tensor [c x h x w].
Tensor upsample_nearest2(const Tensor& x);

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::int64_t worst_index = -1;
};

/// Compares the analytic gradient of scalar-valued `f` at `x` against
/// central finite differences with step `h`. Relative error per element is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). When
/// `max_probes` > 0 and x has more elements, an evenly strided subset is
/// probed. Throws NumericError if an evaluation of f is not finite.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                           double h = 1e-5, std::int64_t max_probes = 0);

}  // namespace agcm
