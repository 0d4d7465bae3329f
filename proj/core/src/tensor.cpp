#include "agcm/tensor.hpp"

#include <cmath>
#include <sstream>

#include "agcm/error.hpp"

namespace agcm {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (const auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  for (const auto d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) {
  validate_shape(shape);
  node_ = std::make_shared<Node>();
  node_->value.assign(static_cast<std::size_t>(numel_of(shape)), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  validate_shape(shape);
  if (numel_of(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw UsageError("operation on an undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(data().size()); }

const std::vector<double>& Tensor::data() const {
  if (!node_) throw UsageError("operation on an undefined tensor");
  return node_->value;
}

std::vector<double>& Tensor::mutable_data() {
  if (!node_) throw UsageError("operation on an undefined tensor");
  return node_->value;
}

double Tensor::value() const {
  if (numel() != 1) throw ShapeError("value() requires a one-element tensor, got " + shape_str(shape()));
  return data()[0];
}

double Tensor::at(std::int64_t i) const { return data().at(static_cast<std::size_t>(i)); }

double Tensor::at(std::int64_t i, std::int64_t j) const {
  if (rank() != 2) throw ShapeError("2-index access on " + shape_str(shape()));
  return data()[static_cast<std::size_t>(i * dim(1) + j)];
}

double Tensor::at(std::int64_t i, std::int64_t j, std::int64_t k) const {
  if (rank() != 3) throw ShapeError("3-index access on " + shape_str(shape()));
  return data()[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  if (!node_) throw UsageError("operation on an undefined tensor");
  node_->requires_grad = v;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw UsageError("tensor has no gradient; run backward first");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_) return;
  node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = shape();
  t.node_->value = data();
  return t;
}

bool Tensor::all_finite() const {
  for (const double v : data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::ensure_finite(const std::string& context) const {
  const auto& v = data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(context + ": non-finite value at element " + std::to_string(i));
    }
  }
}

// --- tape ---

namespace {
thread_local ComputeTape* t_active_tape = nullptr;

struct Corruption {
  std::string op;
  double factor = 1.0;
};
Corruption g_corruption;
}  // namespace

ComputeTape* active_tape() { return t_active_tape; }

TapeScope::TapeScope(ComputeTape& tape) : previous_(t_active_tape) { t_active_tape = &tape; }

TapeScope::~TapeScope() { t_active_tape = previous_; }

void ComputeTape::record(const char* op, std::function<void()> backward) {
  entries_.push_back(Entry{op, std::move(backward)});
}

void ComputeTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward requires a one-element loss tensor");
  }
  detail::ensure_grad(*loss.node());
  loss.node()->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->fn();
  }
}

namespace testing {

void corrupt_backward(const std::string& op, double factor) {
  g_corruption.op = op;
  g_corruption.factor = factor;
}

void reset_backward_corruption() {
  g_corruption.op.clear();
  g_corruption.factor = 1.0;
}

}  // namespace testing

namespace detail {

double grad_scale(const char* op) {
  if (g_corruption.op.empty()) return 1.0;
  return g_corruption.op == op ? g_corruption.factor : 1.0;
}

void ensure_grad(Tensor::Node& node) {
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
}

}  // namespace detail

}  // namespace agcm
