#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "agcm/rng.hpp"

namespace agcm {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of doubles. A Tensor is a cheap handle onto a
/// shared node holding the values and, when requested, a gradient buffer.
/// Values are treated as immutable once an op has consumed them; the grad
/// buffer is written only while a ComputeTape replays backward.
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
  };

  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
  static Tensor uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t dim(std::size_t axis) const;
  std::int64_t numel() const;

  const std::vector<double>& data() const;
  std::vector<double>& mutable_data();

  /// Value of a one-element tensor.
  double value() const;
  double at(std::int64_t i) const;
  double at(std::int64_t i, std::int64_t j) const;
  double at(std::int64_t i, std::int64_t j, std::int64_t k) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);
  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();

  /// Deep copy of the values; the copy does not require gradients.
  Tensor clone() const;

  bool all_finite() const;
  /// Throws NumericError naming `context` if any value is NaN or Inf.
  void ensure_finite(const std::string& context) const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Append-only record of backward rules for one forward pass. Replaying the
/// rules in reverse order populates gradients for every tensor that requires
/// them; fan-out accumulates additively. Confined to one thread.
class ComputeTape {
 public:
  void record(const char* op, std::function<void()> backward);
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays all recorded rules in reverse.
  /// `loss` must be a one-element tensor produced under this tape.
  void backward(const Tensor& loss);

 private:
  struct Entry {
    const char* op;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
};

/// Tape active on the current thread, or nullptr when recording is off.
ComputeTape* active_tape();

/// RAII activation of a tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(ComputeTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  ComputeTape* previous_;
};

namespace testing {
/// Test hook: scales the gradient contributions written by the named op's
/// backward rule. Used by negative-control tests of the gradient checker.
void corrupt_backward(const std::string& op, double factor);
void reset_backward_corruption();
}  // namespace testing

namespace detail {
double grad_scale(const char* op);
/// Allocates (zeroed) the node's grad buffer if absent.
void ensure_grad(Tensor::Node& node);
}  // namespace detail

}  // namespace agcm
