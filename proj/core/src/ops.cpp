#include "agcm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "agcm/error.hpp"

namespace agcm {

namespace {

using Node = Tensor::Node;
using NodePtr = std::shared_ptr<Node>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void axis_extents(const Shape& shape, std::size_t axis, std::int64_t& outer, std::int64_t& len,
                  std::int64_t& inner) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

/// Elementwise unary op with pointwise derivative computed from (x, y).
Tensor unary_op(const char* name, const Tensor& a,
                const std::function<double(double)>& fwd,
                const std::function<double(double, double)>& dfdx) {
  Tensor out(a.shape());
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i]);
  if (tracking({&a})) {
    out.set_requires_grad(true);
    active_tape()->record(name, [name, an = a.node(), on = out.node(), dfdx] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale(name);
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < an->value.size(); ++i) {
        an->grad[i] += gs * on->grad[i] * dfdx(an->value[i], on->value[i]);
      }
    });
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(0), n = a.dim(1), p = b.dim(1);
  Tensor out(Shape{m, p});
  {
    const double* av = a.data().data();
    const double* bv = b.data().data();
    double* ov = out.mutable_data().data();
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t k = 0; k < n; ++k) {
        const double aik = av[i * n + k];
        if (aik == 0.0) continue;
        const double* brow = bv + k * p;
        double* orow = ov + i * p;
        for (std::int64_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
      }
    }
  }
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    active_tape()->record("matmul", [an = a.node(), bn = b.node(), on = out.node(), m, n, p] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("matmul");
      const double* og = on->grad.data();
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        // dA = dC * B^T
        const double* bv = bn->value.data();
        double* ag = an->grad.data();
        for (std::int64_t i = 0; i < m; ++i) {
          for (std::int64_t j = 0; j < p; ++j) {
            const double g = gs * og[i * p + j];
            if (g == 0.0) continue;
            const double* brow = bv + j;
            for (std::int64_t k = 0; k < n; ++k) ag[i * n + k] += g * brow[k * p];
          }
        }
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        // dB = A^T * dC
        const double* av = an->value.data();
        double* bg = bn->grad.data();
        for (std::int64_t i = 0; i < m; ++i) {
          for (std::int64_t k = 0; k < n; ++k) {
            const double aik = gs * av[i * n + k];
            if (aik == 0.0) continue;
            const double* orow = og + i * p;
            double* brow = bg + k * p;
            for (std::int64_t j = 0; j < p; ++j) brow[j] += aik * orow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a rank-2 tensor, got " + shape_str(a.shape()));
  const std::int64_t m = a.dim(0), n = a.dim(1);
  Tensor out(Shape{n, m});
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  }
  if (tracking({&a})) {
    out.set_requires_grad(true);
    active_tape()->record("transpose", [an = a.node(), on = out.node(), m, n] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("transpose");
      detail::ensure_grad(*an);
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) an->grad[i * n + j] += gs * on->grad[j * m + i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape from " + shape_str(a.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  }
  Tensor out(std::move(shape), a.data());
  if (tracking({&a})) {
    out.set_requires_grad(true);
    active_tape()->record("reshape", [an = a.node(), on = out.node()] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("reshape");
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += gs * on->grad[i];
    });
  }
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::int64_t start, std::int64_t length) {
  std::int64_t outer, len, inner;
  axis_extents(a.shape(), axis, outer, len, inner);
  if (start < 0 || length <= 0 || start + length > len) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(axis) + " of " +
                     shape_str(a.shape()));
  }
  Shape oshape = a.shape();
  oshape[axis] = length;
  Tensor out(oshape);
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t l = 0; l < length; ++l) {
      const double* src = av.data() + (o * len + start + l) * inner;
      double* dst = ov.data() + (o * length + l) * inner;
      std::copy(src, src + inner, dst);
    }
  }
  if (tracking({&a})) {
    out.set_requires_grad(true);
    active_tape()->record("slice",
                          [an = a.node(), on = out.node(), outer, len, inner, start, length] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("slice");
      detail::ensure_grad(*an);
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t l = 0; l < length; ++l) {
          const double* src = on->grad.data() + (o * length + l) * inner;
          double* dst = an->grad.data() + (o * len + start + l) * inner;
          for (std::int64_t i = 0; i < inner; ++i) dst[i] += gs * src[i];
        }
      }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) {
    throw ShapeError("concat axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  }
  std::int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size()) {
      throw ShapeError("concat rank mismatch: " + shape_str(first) + " vs " + shape_str(p.shape()));
    }
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.shape()[i] != first[i]) {
        throw ShapeError("concat shapes disagree off-axis: " + shape_str(first) + " vs " +
                         shape_str(p.shape()));
      }
    }
    total += p.dim(axis);
  }
  Shape oshape = first;
  oshape[axis] = total;
  Tensor out(oshape);
  std::int64_t outer, olen, inner;
  axis_extents(oshape, axis, outer, olen, inner);

  std::vector<NodePtr> in_nodes;
  std::vector<std::int64_t> lens;
  bool any_grad = false;
  std::int64_t offset = 0;
  auto& ov = out.mutable_data();
  for (const Tensor& p : parts) {
    const std::int64_t plen = p.dim(axis);
    const auto& pv = p.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      const double* src = pv.data() + o * plen * inner;
      double* dst = ov.data() + (o * olen + offset) * inner;
      std::copy(src, src + plen * inner, dst);
    }
    offset += plen;
    in_nodes.push_back(p.node());
    lens.push_back(plen);
    any_grad = any_grad || p.requires_grad();
  }
  if (active_tape() && any_grad) {
    out.set_requires_grad(true);
    active_tape()->record("concat", [in_nodes, lens, on = out.node(), outer, olen, inner] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("concat");
      std::int64_t off = 0;
      for (std::size_t pi = 0; pi < in_nodes.size(); ++pi) {
        const auto& pn = in_nodes[pi];
        const std::int64_t plen = lens[pi];
        if (pn->requires_grad) {
          detail::ensure_grad(*pn);
          for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = on->grad.data() + (o * olen + off) * inner;
            double* dst = pn->grad.data() + o * plen * inner;
            for (std::int64_t i = 0; i < plen * inner; ++i) dst[i] += gs * src[i];
          }
        }
        off += plen;
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  std::int64_t outer, len, inner;
  axis_extents(a.shape(), axis, outer, len, inner);
  Tensor out(a.shape());
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const auto at = [&](std::int64_t l) { return (o * len + l) * inner + i; };
      double mx = av[at(0)];
      for (std::int64_t l = 1; l < len; ++l) mx = std::max(mx, av[at(l)]);
      double denom = 0.0;
      for (std::int64_t l = 0; l < len; ++l) {
        const double e = std::exp(av[at(l)] - mx);
        ov[at(l)] = e;
        denom += e;
      }
      for (std::int64_t l = 0; l < len; ++l) ov[at(l)] /= denom;
    }
  }
  if (tracking({&a})) {
    out.set_requires_grad(true);
    active_tape()->record("softmax", [an = a.node(), on = out.node(), outer, len, inner] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("softmax");
      detail::ensure_grad(*an);
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
          const auto at = [&](std::int64_t l) { return (o * len + l) * inner + i; };
          double dot = 0.0;
          for (std::int64_t l = 0; l < len; ++l) dot += on->grad[at(l)] * on->value[at(l)];
          for (std::int64_t l = 0; l < len; ++l) {
            an->grad[at(l)] += gs * on->value[at(l)] * (on->grad[at(l)] - dot);
          }
        }
      }
    });
  }
  return out;
}

namespace {

Tensor binary_same(const char* name, const Tensor& a, const Tensor& b, double bsign) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(name) + " shapes disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bsign * bv[i];
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    active_tape()->record(name, [name, an = a.node(), bn = b.node(), on = out.node(), bsign] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale(name);
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += gs * on->grad[i];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += gs * bsign * on->grad[i];
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_same("add", a, b, 1.0); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_same("sub", a, b, -1.0); }

Tensor hadamard(const Tensor& a, const Tensor& b) {
  const bool bcast = b.rank() == 1 && a.rank() >= 2 && b.dim(0) == a.dim(0);
  if (!bcast && a.shape() != b.shape()) {
    throw ShapeError("hadamard shapes not broadcastable: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.mutable_data();
  const std::int64_t rest = bcast ? a.numel() / a.dim(0) : 0;
  if (bcast) {
    for (std::int64_t c = 0; c < a.dim(0); ++c) {
      const double w = bv[static_cast<std::size_t>(c)];
      for (std::int64_t r = 0; r < rest; ++r) ov[c * rest + r] = av[c * rest + r] * w;
    }
  } else {
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
  }
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    active_tape()->record("hadamard", [an = a.node(), bn = b.node(), on = out.node(), bcast, rest] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("hadamard");
      if (bcast) {
        const std::int64_t channels = static_cast<std::int64_t>(bn->value.size());
        if (an->requires_grad) {
          detail::ensure_grad(*an);
          for (std::int64_t c = 0; c < channels; ++c) {
            const double w = gs * bn->value[static_cast<std::size_t>(c)];
            for (std::int64_t r = 0; r < rest; ++r) an->grad[c * rest + r] += w * on->grad[c * rest + r];
          }
        }
        if (bn->requires_grad) {
          detail::ensure_grad(*bn);
          for (std::int64_t c = 0; c < channels; ++c) {
            double acc = 0.0;
            for (std::int64_t r = 0; r < rest; ++r) acc += on->grad[c * rest + r] * an->value[c * rest + r];
            bn->grad[static_cast<std::size_t>(c)] += gs * acc;
          }
        }
      } else {
        if (an->requires_grad) {
          detail::ensure_grad(*an);
          for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += gs * on->grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
          detail::ensure_grad(*bn);
          for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += gs * on->grad[i] * an->value[i];
        }
      }
    });
  }
  return out;
}

namespace {

Tensor add_broadcast(const char* name, const Tensor& a, const Tensor& b, bool along_rows) {
  // along_rows=false: b indexed by a's axis 0 (leading).  true: by axis 1 of a rank-2 a.
  if (b.rank() != 1) throw ShapeError(std::string(name) + " expects a rank-1 addend, got " + shape_str(b.shape()));
  if (!along_rows) {
    if (a.rank() < 2 || b.dim(0) != a.dim(0)) {
      throw ShapeError(std::string(name) + " shapes not broadcastable: " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
    }
  } else {
    if (a.rank() != 2 || b.dim(0) != a.dim(1)) {
      throw ShapeError(std::string(name) + " shapes not broadcastable: " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
    }
  }
  Tensor out(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.mutable_data();
  const std::int64_t lead = a.dim(0);
  const std::int64_t rest = a.numel() / lead;
  for (std::int64_t c = 0; c < lead; ++c) {
    for (std::int64_t r = 0; r < rest; ++r) {
      const double add_v = along_rows ? bv[static_cast<std::size_t>(r)] : bv[static_cast<std::size_t>(c)];
      ov[c * rest + r] = av[c * rest + r] + add_v;
    }
  }
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    active_tape()->record(name, [name, an = a.node(), bn = b.node(), on = out.node(), lead, rest,
                                 along_rows] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale(name);
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += gs * on->grad[i];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::int64_t c = 0; c < lead; ++c) {
          for (std::int64_t r = 0; r < rest; ++r) {
            const std::size_t bi = static_cast<std::size_t>(along_rows ? r : c);
            bn->grad[bi] += gs * on->grad[c * rest + r];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor add_bcast0(const Tensor& a, const Tensor& b) { return add_broadcast("add_bcast0", a, b, false); }
Tensor add_bcast1(const Tensor& a, const Tensor& b) { return add_broadcast("add_bcast1", a, b, true); }

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op("add_scalar", a, [c](double x) { return x + c; },
                  [](double, double) { return 1.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op("scale", a, [c](double x) { return x * c; },
                  [c](double, double) { return c; });
}

Tensor relu(const Tensor& a) {
  // NaN passes through so upstream numeric failures stay visible.
  return unary_op("relu", a, [](double x) { return x < 0.0 ? 0.0 : x; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op("sigmoid", a,
                  [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                                 : std::exp(x) / (1.0 + std::exp(x)); },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary_op("exp", a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (av[i] <= 0.0) {  // NaN flows through instead of masking the real failure
      throw NumericError("log: non-positive input at element " + std::to_string(i));
    }
  }
  return unary_op("log", a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (av[i] < 0.0) throw NumericError("sqrt: negative input at element " + std::to_string(i));
  }
  return unary_op("sqrt", a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

Tensor reciprocal(const Tensor& a) {
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (av[i] == 0.0) throw NumericError("reciprocal: zero input at element " + std::to_string(i));
  }
  return unary_op("reciprocal", a, [](double x) { return 1.0 / x; },
                  [](double, double y) { return -y * y; });
}

Tensor clamp_min(const Tensor& a, double c) {
  return unary_op("clamp_min", a, [c](double x) { return x < c ? c : x; },
                  [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (const double v : a.data()) total += v;
  Tensor out = Tensor::scalar(total);
  if (tracking({&a})) {
    out.set_requires_grad(true);
    active_tape()->record("sum", [an = a.node(), on = out.node()] {
      if (on->grad.empty()) return;
      const double g = detail::grad_scale("sum") * on->grad[0];
      detail::ensure_grad(*an);
      for (auto& v : an->grad) v += g;
    });
  }
  return out;
}

Tensor sum(const Tensor& a, std::size_t axis) {
  std::int64_t outer, len, inner;
  axis_extents(a.shape(), axis, outer, len, inner);
  Tensor out(drop_axis(a.shape(), axis));
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t l = 0; l < len; ++l) {
      const double* src = av.data() + (o * len + l) * inner;
      double* dst = ov.data() + o * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  if (tracking({&a})) {
    out.set_requires_grad(true);
    active_tape()->record("sum_axis", [an = a.node(), on = out.node(), outer, len, inner] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("sum_axis");
      detail::ensure_grad(*an);
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t l = 0; l < len; ++l) {
          double* dst = an->grad.data() + (o * len + l) * inner;
          const double* src = on->grad.data() + o * inner;
          for (std::int64_t i = 0; i < inner; ++i) dst[i] += gs * src[i];
        }
      }
    });
  }
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean(const Tensor& a, std::size_t axis) {
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

MaxResult max(const Tensor& a, std::size_t axis) {
  std::int64_t outer, len, inner;
  axis_extents(a.shape(), axis, outer, len, inner);
  MaxResult res;
  res.values = Tensor(drop_axis(a.shape(), axis));
  res.argmax.assign(static_cast<std::size_t>(outer * inner), 0);
  const auto& av = a.data();
  auto& ov = res.values.mutable_data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      double best = av[(o * len) * inner + i];
      std::int64_t best_l = 0;
      for (std::int64_t l = 1; l < len; ++l) {
        const double v = av[(o * len + l) * inner + i];
        if (v > best) {  // strict: first index wins ties
          best = v;
          best_l = l;
        }
      }
      ov[o * inner + i] = best;
      res.argmax[static_cast<std::size_t>(o * inner + i)] = best_l;
    }
  }
  if (tracking({&a})) {
    res.values.set_requires_grad(true);
    active_tape()->record("max_axis", [an = a.node(), on = res.values.node(),
                                       arg = res.argmax, outer, len, inner] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("max_axis");
      detail::ensure_grad(*an);
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t l = arg[static_cast<std::size_t>(o * inner + i)];
          an->grad[(o * len + l) * inner + i] += gs * on->grad[o * inner + i];
        }
      }
    });
  }
  return res;
}

Tensor gather_cols(const Tensor& a, const std::vector<std::int64_t>& idx) {
  if (a.rank() != 2) throw ShapeError("gather_cols expects a rank-2 tensor, got " + shape_str(a.shape()));
  const std::int64_t c = a.dim(0), k = a.dim(1);
  const std::int64_t m = static_cast<std::int64_t>(idx.size());
  if (m == 0) throw UsageError("gather_cols: empty index list");
  for (const auto j : idx) {
    if (j < 0 || j >= k) {
      throw ShapeError("gather_cols index " + std::to_string(j) + " out of range for " +
                       shape_str(a.shape()));
    }
  }
  Tensor out(Shape{c, m});
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::int64_t r = 0; r < c; ++r) {
    for (std::int64_t j = 0; j < m; ++j) ov[r * m + j] = av[r * k + idx[static_cast<std::size_t>(j)]];
  }
  if (tracking({&a})) {
    out.set_requires_grad(true);
    active_tape()->record("gather_cols", [an = a.node(), on = out.node(), idx, c, k, m] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("gather_cols");
      detail::ensure_grad(*an);
      for (std::int64_t r = 0; r < c; ++r) {
        for (std::int64_t j = 0; j < m; ++j) {
          an->grad[r * k + idx[static_cast<std::size_t>(j)]] += gs * on->grad[r * m + j];
        }
      }
    });
  }
  return out;
}

Tensor colgroup_max(const Tensor& a, std::int64_t group) {
  if (a.rank() != 2) throw ShapeError("colgroup_max expects a rank-2 tensor, got " + shape_str(a.shape()));
  if (group <= 0 || a.dim(1) % group != 0) {
    throw ShapeError("colgroup_max: column count " + std::to_string(a.dim(1)) +
                     " not divisible by group " + std::to_string(group));
  }
  const std::int64_t c = a.dim(0), e = a.dim(1), k = e / group;
  Tensor out(Shape{c, k});
  std::vector<std::int64_t> arg(static_cast<std::size_t>(c * k), 0);
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::int64_t r = 0; r < c; ++r) {
    for (std::int64_t g = 0; g < k; ++g) {
      double best = av[r * e + g * group];
      std::int64_t best_j = 0;
      for (std::int64_t j = 1; j < group; ++j) {
        const double v = av[r * e + g * group + j];
        if (v > best) {
          best = v;
          best_j = j;
        }
      }
      ov[r * k + g] = best;
      arg[static_cast<std::size_t>(r * k + g)] = best_j;
    }
  }
  if (tracking({&a})) {
    out.set_requires_grad(true);
    active_tape()->record("colgroup_max", [an = a.node(), on = out.node(), arg, c, e, k, group] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("colgroup_max");
      detail::ensure_grad(*an);
      for (std::int64_t r = 0; r < c; ++r) {
        for (std::int64_t g = 0; g < k; ++g) {
          const std::int64_t j = arg[static_cast<std::size_t>(r * k + g)];
          an->grad[r * e + g * group + j] += gs * on->grad[r * k + g];
        }
      }
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::int64_t stride, std::int64_t dilation,
              std::int64_t padding) {
  if (x.rank() != 3) throw ShapeError("conv2d input must be rank-3, got " + shape_str(x.shape()));
  if (kernel.rank() != 4) throw ShapeError("conv2d kernel must be rank-4, got " + shape_str(kernel.shape()));
  if (stride < 1 || dilation < 1 || padding < 0) {
    throw ShapeError("conv2d: stride/dilation must be >= 1 and padding >= 0");
  }
  const std::int64_t c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::int64_t c_out = kernel.dim(0), kc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kc != c_in) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(kernel.shape()));
  }
  const std::int64_t oh = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
  const std::int64_t ow = (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
  if (oh <= 0 || ow <= 0) {
    throw ShapeError("conv2d produces non-positive output dims for input " + shape_str(x.shape()) +
                     ", kernel " + shape_str(kernel.shape()) + ", stride " + std::to_string(stride) +
                     ", dilation " + std::to_string(dilation) + ", padding " + std::to_string(padding));
  }
  Tensor out(Shape{c_out, oh, ow});
  {
    const double* xv = x.data().data();
    const double* kv = kernel.data().data();
    double* ov = out.mutable_data().data();
    for (std::int64_t co = 0; co < c_out; ++co) {
      for (std::int64_t ci = 0; ci < c_in; ++ci) {
        const double* xc = xv + ci * h * w;
        const double* kc_base = kv + ((co * c_in + ci) * kh) * kw;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const double kval = kc_base[ky * kw + kx];
            if (kval == 0.0) continue;
            for (std::int64_t oy = 0; oy < oh; ++oy) {
              const std::int64_t iy = oy * stride - padding + ky * dilation;
              if (iy < 0 || iy >= h) continue;
              double* orow = ov + (co * oh + oy) * ow;
              const double* xrow = xc + iy * w;
              for (std::int64_t ox = 0; ox < ow; ++ox) {
                const std::int64_t ix = ox * stride - padding + kx * dilation;
                if (ix < 0 || ix >= w) continue;
                orow[ox] += kval * xrow[ix];
              }
            }
          }
        }
      }
    }
  }
  if (tracking({&x, &kernel})) {
    out.set_requires_grad(true);
    active_tape()->record("conv2d", [xn = x.node(), kn = kernel.node(), on = out.node(), c_in, h, w,
                                     c_out, kh, kw, oh, ow, stride, dilation, padding] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("conv2d");
      const double* og = on->grad.data();
      if (xn->requires_grad) detail::ensure_grad(*xn);
      if (kn->requires_grad) detail::ensure_grad(*kn);
      for (std::int64_t co = 0; co < c_out; ++co) {
        for (std::int64_t ci = 0; ci < c_in; ++ci) {
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const std::size_t kidx = static_cast<std::size_t>(((co * c_in + ci) * kh + ky) * kw + kx);
              const double kval = kn->value[kidx];
              double kacc = 0.0;
              for (std::int64_t oy = 0; oy < oh; ++oy) {
                const std::int64_t iy = oy * stride - padding + ky * dilation;
                if (iy < 0 || iy >= h) continue;
                const double* grow = og + (co * oh + oy) * ow;
                const double* xrow = xn->value.data() + (ci * h + iy) * w;
                double* xgrow = xn->requires_grad ? xn->grad.data() + (ci * h + iy) * w : nullptr;
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                  const std::int64_t ix = ox * stride - padding + kx * dilation;
                  if (ix < 0 || ix >= w) continue;
                  const double g = grow[ox];
                  if (xgrow) xgrow[ix] += gs * g * kval;
                  kacc += g * xrow[ix];
                }
              }
              if (kn->requires_grad) kn->grad[kidx] += gs * kacc;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor upsample_nearest2(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("upsample_nearest2 expects rank-3 input, got " + shape_str(x.shape()));
  const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out(Shape{c, 2 * h, 2 * w});
  const auto& xv = x.data();
  auto& ov = out.mutable_data();
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (std::int64_t y = 0; y < 2 * h; ++y) {
      const double* src = xv.data() + (ci * h + y / 2) * w;
      double* dst = ov.data() + (ci * 2 * h + y) * 2 * w;
      for (std::int64_t xpos = 0; xpos < 2 * w; ++xpos) dst[xpos] = src[xpos / 2];
    }
  }
  if (tracking({&x})) {
    out.set_requires_grad(true);
    active_tape()->record("upsample_nearest2", [xn = x.node(), on = out.node(), c, h, w] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("upsample_nearest2");
      detail::ensure_grad(*xn);
      for (std::int64_t ci = 0; ci < c; ++ci) {
        for (std::int64_t y = 0; y < 2 * h; ++y) {
          const double* src = on->grad.data() + (ci * 2 * h + y) * 2 * w;
          double* dst = xn->grad.data() + (ci * h + y / 2) * w;
          for (std::int64_t xpos = 0; xpos < 2 * w; ++xpos) dst[xpos / 2] += gs * src[xpos];
        }
      }
    });
  }
  return out;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h,
                           std::int64_t max_probes) {
  if (!x.defined()) throw UsageError("grad_check: undefined probe tensor");
  x.set_requires_grad(true);
  x.zero_grad();

  std::vector<double> analytic;
  {
    ComputeTape tape;
    TapeScope scope(tape);
    Tensor loss = f(x);
    if (loss.numel() != 1) throw UsageError("grad_check: f must be scalar-valued");
    if (!std::isfinite(loss.value())) throw NumericError("grad_check: f is not finite at x");
    tape.backward(loss);
    analytic = x.has_grad() ? x.grad() : std::vector<double>(x.data().size(), 0.0);
  }

  auto eval = [&](std::int64_t element) {
    const Tensor r = f(x);
    if (r.numel() != 1) throw UsageError("grad_check: f must be scalar-valued");
    const double v = r.value();
    if (!std::isfinite(v)) {
      throw NumericError("grad_check: f evaluated to a non-finite value while perturbing element " +
                         std::to_string(element));
    }
    return v;
  };

  const std::int64_t n = x.numel();
  std::int64_t step = 1;
  if (max_probes > 0 && n > max_probes) step = n / max_probes;

  GradCheckReport report;
  auto& xv = x.mutable_data();
  for (std::int64_t i = 0; i < n; i += step) {
    const double saved = xv[static_cast<std::size_t>(i)];
    xv[static_cast<std::size_t>(i)] = saved + h;
    const double fp = eval(i);
    xv[static_cast<std::size_t>(i)] = saved - h;
    const double fm = eval(i);
    xv[static_cast<std::size_t>(i)] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[static_cast<std::size_t>(i)];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_index = i;
    }
  }
  return report;
}

}  // namespace agcm
