#include "agcm/nn.hpp"

#include <algorithm>
#include <cmath>

#include "agcm/error.hpp"

namespace agcm {

Tensor ParameterStore::param(const std::string& path, const Shape& shape, std::int64_t fan_in,
                             std::int64_t fan_out, bool is_bias) {
  auto it = entries_.find(path);
  if (it != entries_.end()) {
    if (it->second.tensor.shape() != shape) {
      throw ConfigError("parameter '" + path + "' redeclared with shape " + shape_str(shape) +
                        ", existing " + shape_str(it->second.tensor.shape()));
    }
    return it->second.tensor;
  }
  Entry e;
  e.tensor = Tensor(shape);
  e.tensor.set_requires_grad(true);
  e.fan_in = fan_in;
  e.fan_out = fan_out;
  e.is_bias = is_bias;
  entries_.emplace(path, e);
  return entries_.at(path).tensor;
}

bool ParameterStore::contains(const std::string& path) const { return entries_.count(path) > 0; }

Tensor ParameterStore::get(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw UsageError("unknown parameter '" + path + "'");
  return it->second.tensor;
}

std::vector<std::string> ParameterStore::paths() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [path, entry] : entries_) out.push_back(path);
  return out;
}

std::int64_t ParameterStore::total_params() const {
  std::int64_t n = 0;
  for (const auto& [path, entry] : entries_) n += entry.tensor.numel();
  return n;
}

void ParameterStore::zero_grads() {
  for (auto& [path, entry] : entries_) entry.tensor.zero_grad();
}

void init_params(ParameterStore& store, InitScheme scheme, std::uint64_t seed) {
  (void)scheme;  // single scheme for now
  if (store.initialized()) {
    throw UsageError("init_params: parameter store is already initialized");
  }
  Rng rng(seed);
  for (const auto& [path, entry] : store.entries()) {
    Tensor t = entry.tensor;
    if (entry.is_bias) {
      std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
      continue;
    }
    const double fan_sum = static_cast<double>(entry.fan_in + entry.fan_out);
    const double bound = std::sqrt(6.0 / fan_sum);
    for (auto& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  }
  store.mark_initialized();
}

void MhaSpec::validate() const {
  if (dim <= 0 || heads <= 0) throw ConfigError("attention dims and head count must be positive");
  if (dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

void declare_linear(ParameterStore& store, const std::string& prefix, std::int64_t out_dim,
                    std::int64_t in_dim) {
  store.param(prefix + ".weight", {out_dim, in_dim}, in_dim, out_dim, false);
  store.param(prefix + ".bias", {out_dim}, in_dim, out_dim, true);
}

Tensor linear_forward(const ParameterStore& store, const std::string& prefix, const Tensor& x) {
  Tensor w = store.get(prefix + ".weight");
  Tensor b = store.get(prefix + ".bias");
  const std::int64_t in_dim = w.dim(1);
  const bool vector_input = x.rank() == 1;
  Tensor rows = vector_input ? reshape(x, {1, in_dim}) : x;
  if (rows.rank() != 2 || rows.dim(1) != in_dim) {
    throw ShapeError("linear '" + prefix + "' expects trailing dim " + std::to_string(in_dim) +
                     ", got " + shape_str(x.shape()));
  }
  Tensor y = add_bcast1(matmul(rows, transpose(w)), b);
  return vector_input ? reshape(y, {w.dim(0)}) : y;
}

void declare_mlp(ParameterStore& store, const std::string& prefix, const MlpSpec& spec) {
  for (const auto w : spec.widths) {
    if (w <= 0) throw ConfigError("mlp widths must be positive");
  }
  for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
    declare_linear(store, prefix + "." + std::to_string(l), spec.widths[l + 1], spec.widths[l]);
  }
}

Tensor mlp_forward(const ParameterStore& store, const std::string& prefix, const MlpSpec& spec,
                   const Tensor& x) {
  if (spec.widths.size() < 2) return x;  // zero-depth: identity
  Tensor h = x;
  const std::size_t layers = spec.widths.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    h = linear_forward(store, prefix + "." + std::to_string(l), h);
    if (l + 1 < layers) h = relu(h);
  }
  return h;
}

namespace {

/// Sums in ascending value order: the result depends only on the multiset of
/// addends, not their arrangement, which keeps attention outputs bitwise
/// stable under token permutations.
double sorted_sum(std::vector<double>& buf) {
  std::sort(buf.begin(), buf.end());
  double s = 0.0;
  for (const double v : buf) s += v;
  return s;
}

/// Scaled dot-product self-attention over `heads` column blocks of Q/K/V
/// ([tokens x dim] each). One fused op: the forward uses order-canonical row
/// reductions, the backward applies the standard softmax-attention rules.
Tensor attention_heads(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t heads) {
  const std::int64_t tokens = q.dim(0), dim = q.dim(1);
  const std::int64_t head_dim = dim / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Tensor out(Shape{tokens, dim});

  auto attn = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(heads * tokens * tokens));
  {
    const auto& qv = q.data();
    const auto& kv = k.data();
    const auto& vv = v.data();
    auto& ov = out.mutable_data();
    std::vector<double> scores(static_cast<std::size_t>(tokens));
    std::vector<double> buf(static_cast<std::size_t>(tokens));
    for (std::int64_t h = 0; h < heads; ++h) {
      const std::int64_t off = h * head_dim;
      for (std::int64_t i = 0; i < tokens; ++i) {
        for (std::int64_t j = 0; j < tokens; ++j) {
          double dot = 0.0;
          for (std::int64_t c = 0; c < head_dim; ++c) {
            dot += qv[i * dim + off + c] * kv[j * dim + off + c];
          }
          scores[static_cast<std::size_t>(j)] = dot * inv_scale;
        }
        const double mx = *std::max_element(scores.begin(), scores.end());
        for (std::int64_t j = 0; j < tokens; ++j) {
          buf[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
        }
        std::vector<double> exps = buf;
        const double denom = sorted_sum(buf);
        double* arow = attn->data() + (h * tokens + i) * tokens;
        for (std::int64_t j = 0; j < tokens; ++j) arow[j] = exps[static_cast<std::size_t>(j)] / denom;
        for (std::int64_t c = 0; c < head_dim; ++c) {
          for (std::int64_t j = 0; j < tokens; ++j) {
            buf[static_cast<std::size_t>(j)] = arow[j] * vv[j * dim + off + c];
          }
          ov[i * dim + off + c] = sorted_sum(buf);
        }
      }
    }
  }

  if (active_tape() && (q.requires_grad() || k.requires_grad() || v.requires_grad())) {
    out.set_requires_grad(true);
    active_tape()->record("attention_heads", [qn = q.node(), kn = k.node(), vn = v.node(),
                                              on = out.node(), attn, heads, tokens, dim, head_dim,
                                              inv_scale] {
      if (on->grad.empty()) return;
      const double gs = detail::grad_scale("attention_heads");
      if (qn->requires_grad) detail::ensure_grad(*qn);
      if (kn->requires_grad) detail::ensure_grad(*kn);
      if (vn->requires_grad) detail::ensure_grad(*vn);
      std::vector<double> d_attn(static_cast<std::size_t>(tokens));
      for (std::int64_t h = 0; h < heads; ++h) {
        const std::int64_t off = h * head_dim;
        for (std::int64_t i = 0; i < tokens; ++i) {
          const double* arow = attn->data() + (h * tokens + i) * tokens;
          // dV and dA from dO.
          for (std::int64_t j = 0; j < tokens; ++j) {
            double acc = 0.0;
            for (std::int64_t c = 0; c < head_dim; ++c) {
              const double g = on->grad[i * dim + off + c];
              acc += g * vn->value[j * dim + off + c];
              if (vn->requires_grad) vn->grad[j * dim + off + c] += gs * arow[j] * g;
            }
            d_attn[static_cast<std::size_t>(j)] = acc;
          }
          // Softmax backward within the row, then into Q and K.
          double rowdot = 0.0;
          for (std::int64_t j = 0; j < tokens; ++j) {
            rowdot += d_attn[static_cast<std::size_t>(j)] * arow[j];
          }
          for (std::int64_t j = 0; j < tokens; ++j) {
            const double dz = arow[j] * (d_attn[static_cast<std::size_t>(j)] - rowdot) * inv_scale;
            if (dz == 0.0) continue;
            for (std::int64_t c = 0; c < head_dim; ++c) {
              if (qn->requires_grad) qn->grad[i * dim + off + c] += gs * dz * kn->value[j * dim + off + c];
              if (kn->requires_grad) kn->grad[j * dim + off + c] += gs * dz * qn->value[i * dim + off + c];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

void declare_mha(ParameterStore& store, const std::string& prefix, const MhaSpec& spec) {
  spec.validate();
  declare_linear(store, prefix + ".q", spec.dim, spec.dim);
  declare_linear(store, prefix + ".k", spec.dim, spec.dim);
  declare_linear(store, prefix + ".v", spec.dim, spec.dim);
  declare_linear(store, prefix + ".out", spec.dim, spec.dim);
}

Tensor mha_forward(const ParameterStore& store, const std::string& prefix, const MhaSpec& spec,
                   const Tensor& tokens) {
  spec.validate();
  if (tokens.rank() != 2 || tokens.dim(1) != spec.dim) {
    throw ShapeError("mha '" + prefix + "' expects [tokens x " + std::to_string(spec.dim) +
                     "], got " + shape_str(tokens.shape()));
  }
  Tensor q = linear_forward(store, prefix + ".q", tokens);
  Tensor k = linear_forward(store, prefix + ".k", tokens);
  Tensor v = linear_forward(store, prefix + ".v", tokens);
  Tensor mixed = attention_heads(q, k, v, spec.heads);
  return linear_forward(store, prefix + ".out", mixed);
}

void declare_conv(ParameterStore& store, const std::string& prefix, std::int64_t c_out,
                  std::int64_t c_in, std::int64_t kh, std::int64_t kw) {
  store.param(prefix + ".weight", {c_out, c_in, kh, kw}, c_in * kh * kw, c_out * kh * kw, false);
  store.param(prefix + ".bias", {c_out}, c_in * kh * kw, c_out * kh * kw, true);
}

Tensor conv_forward(const ParameterStore& store, const std::string& prefix, const Tensor& x,
                    std::int64_t stride, std::int64_t dilation, std::int64_t padding) {
  Tensor w = store.get(prefix + ".weight");
  Tensor b = store.get(prefix + ".bias");
  return add_bcast0(conv2d(x, w, stride, dilation, padding), b);
}

void declare_conv1x1(ParameterStore& store, const std::string& prefix, std::int64_t c_out,
                     std::int64_t c_in) {
  store.param(prefix + ".weight", {c_out, c_in}, c_in, c_out, false);
  store.param(prefix + ".bias", {c_out}, c_in, c_out, true);
}

Tensor conv1x1_forward(const ParameterStore& store, const std::string& prefix, const Tensor& x) {
  if (x.rank() != 3) {
    throw ShapeError("conv1x1 '" + prefix + "' expects rank-3 input, got " + shape_str(x.shape()));
  }
  Tensor w = store.get(prefix + ".weight");
  Tensor b = store.get(prefix + ".bias");
  if (w.dim(1) != x.dim(0)) {
    throw ShapeError("conv1x1 '" + prefix + "' channel mismatch: weight " + shape_str(w.shape()) +
                     " vs input " + shape_str(x.shape()));
  }
  const std::int64_t h = x.dim(1), wdt = x.dim(2);
  Tensor flat = reshape(x, {x.dim(0), h * wdt});
  Tensor y = add_bcast0(matmul(w, flat), b);
  return reshape(y, {w.dim(0), h, wdt});
}

}  // namespace agcm
