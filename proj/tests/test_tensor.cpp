#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "agcm/error.hpp"
#include "agcm/ops.hpp"
#include "agcm/tensor.hpp"
#include "test_util.hpp"

using namespace agcm;
using testutil::max_abs_diff;
using testutil::random_tensor;
using testutil::random_tensor_away_from;

namespace {

// Independent oracle: naive triple-loop matrix product.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const auto m = a.dim(0), n = a.dim(1), p = b.dim(1);
  Tensor out(Shape{m, p});
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < n; ++k) acc += a.at(i, k) * b.at(k, j);
      out.mutable_data()[static_cast<std::size_t>(i * p + j)] = acc;
    }
  }
  return out;
}

// Independent oracle: direct nested-loop cross-correlation.
Tensor naive_conv2d(const Tensor& x, const Tensor& k, std::int64_t stride, std::int64_t dilation,
                    std::int64_t padding) {
  const auto c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto c_out = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const auto oh = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
  const auto ow = (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
  Tensor out(Shape{c_out, oh, ow});
  auto& ov = out.mutable_data();
  for (std::int64_t co = 0; co < c_out; ++co) {
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::int64_t ci = 0; ci < c_in; ++ci) {
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const auto iy = oy * stride - padding + ky * dilation;
              const auto ix = ox * stride - padding + kx * dilation;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += x.at(ci, iy, ix) *
                     k.data()[static_cast<std::size_t>(((co * c_in + ci) * kh + ky) * kw + kx)];
            }
          }
        }
        ov[static_cast<std::size_t>((co * oh + oy) * ow + ox)] = acc;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("tensor construction and invariants") {
  Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 1.5);
  CHECK_THROWS_AS(Tensor(Shape{2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1.0}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2}).value(), ShapeError);

  Tensor nan_t(Shape{2}, std::vector<double>{1.0, std::nan("")});
  CHECK_FALSE(nan_t.all_finite());
  CHECK_THROWS_AS(nan_t.ensure_finite("test"), NumericError);
}

TEST_CASE("matmul identity and zero cases") {
  Tensor a(Shape{2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor eye(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor prod = matmul(a, eye);
  CHECK(max_abs_diff(prod, a) == 0.0);

  Rng rng(7);
  Tensor z = Tensor::zeros({3, 4});
  Tensor b = random_tensor({4, 2}, rng);
  Tensor zp = matmul(z, b);
  CHECK(zp.shape() == Shape{3, 2});
  for (double v : zp.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(11);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({3, 2}, rng);
  CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);
}

TEST_CASE("matmul associativity on random conforming triples") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor({4, 5}, rng);
    Tensor b = random_tensor({5, 3}, rng);
    Tensor c = random_tensor({3, 6}, rng);
    Tensor left = matmul(matmul(a, b), c);
    Tensor right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.data().size(); ++i) {
      const double denom = std::max(1.0, std::abs(left.data()[i]));
      CHECK(std::abs(left.data()[i] - right.data()[i]) / denom < 1e-9);
    }
  }
}

TEST_CASE("softmax basics") {
  SUBCASE("constant slice is uniform") {
    Tensor x = Tensor::full({5}, 3.7);
    Tensor y = softmax(x, 0);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
  }
  SUBCASE("direct exponential evaluation") {
    Tensor x(Shape{2}, std::vector<double>{0.0, std::log(2.0)});
    Tensor y = softmax(x, 0);
    CHECK(y.at(0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(y.at(1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("slices sum to one and shift invariance") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
      Tensor x = random_tensor({3, 7}, rng, -4.0, 4.0);
      Tensor y = softmax(x, 1);
      for (std::int64_t r = 0; r < 3; ++r) {
        double s = 0.0;
        for (std::int64_t c = 0; c < 7; ++c) s += y.at(r, c);
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
      Tensor shifted = softmax(add_scalar(x, 1.234), 1);
      CHECK(max_abs_diff(y, shifted) < 1e-12);
    }
  }
}

TEST_CASE("hadamard identity, zero, and broadcast oracle") {
  Rng rng(13);
  Tensor a = random_tensor({4, 3}, rng);
  CHECK(max_abs_diff(hadamard(a, Tensor::ones({4, 3})), a) == 0.0);
  const Tensor zeroed = hadamard(a, Tensor::zeros({4, 3}));
  for (double v : zeroed.data()) CHECK(v == 0.0);

  Tensor w = random_tensor({4}, rng);
  Tensor out = hadamard(a, w);
  for (std::int64_t i = 0; i < 4; ++i) {
    for (std::int64_t j = 0; j < 3; ++j) {
      CHECK(std::abs(out.at(i, j) - a.at(i, j) * w.at(i)) < 1e-15);
    }
  }
  CHECK_THROWS_AS(hadamard(a, Tensor::ones({3})), ShapeError);
}

TEST_CASE("conv2d identity and zero kernels") {
  Rng rng(17);
  Tensor x = random_tensor({1, 4, 5}, rng);
  Tensor k1(Shape{1, 1, 1, 1}, std::vector<double>{1.0});
  CHECK(max_abs_diff(conv2d(x, k1, 1, 1, 0), x) == 0.0);

  Tensor kz = Tensor::zeros({2, 1, 3, 3});
  const Tensor zero_out = conv2d(x, kz, 1, 1, 1);
  for (double v : zero_out.data()) CHECK(v == 0.0);
}

TEST_CASE("conv2d matches nested-loop oracle") {
  Rng rng(19);
  SUBCASE("3x3 kernel, 5x5 input, pad 1") {
    Tensor x = random_tensor({2, 5, 5}, rng);
    Tensor k = random_tensor({3, 2, 3, 3}, rng);
    CHECK(max_abs_diff(conv2d(x, k, 1, 1, 1), naive_conv2d(x, k, 1, 1, 1)) < 1e-12);
  }
  SUBCASE("strided and dilated variants") {
    Tensor x = random_tensor({2, 9, 8}, rng);
    Tensor k = random_tensor({2, 2, 3, 3}, rng);
    for (const auto& [s, d, p] : std::vector<std::array<std::int64_t, 3>>{
             {2, 1, 1}, {1, 2, 2}, {2, 2, 3}, {1, 1, 0}}) {
      CHECK(max_abs_diff(conv2d(x, k, s, d, p), naive_conv2d(x, k, s, d, p)) < 1e-12);
    }
  }
  SUBCASE("non-positive output dims rejected") {
    Tensor x = random_tensor({1, 2, 2}, rng);
    Tensor k = random_tensor({1, 1, 5, 5}, rng);
    CHECK_THROWS_AS(conv2d(x, k, 1, 1, 0), ShapeError);
  }
}

TEST_CASE("reductions and shape ops") {
  CHECK(sum(Tensor::ones({2, 3})).value() == 6.0);
  CHECK(relu(Tensor::full({3}, -2.0)).data() == std::vector<double>{0, 0, 0});

  Rng rng(23);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({2, 5}, rng);
  Tensor cat = concat({a, b}, 1);
  REQUIRE(cat.shape() == Shape{2, 8});
  for (std::int64_t r = 0; r < 2; ++r) {
    for (std::int64_t c = 0; c < 8; ++c) {
      const double expected = c < 3 ? a.at(r, c) : b.at(r, c - 3);
      CHECK(cat.at(r, c) == expected);
    }
  }

  Tensor s1 = sum(a, 1);
  REQUIRE(s1.shape() == Shape{2});
  CHECK(s1.at(0) == doctest::Approx(a.at(0, 0) + a.at(0, 1) + a.at(0, 2)));

  auto mx = max(a, 1);
  REQUIRE(mx.values.shape() == Shape{2});
  for (std::int64_t r = 0; r < 2; ++r) {
    double best = a.at(r, 0);
    for (std::int64_t c = 1; c < 3; ++c) best = std::max(best, a.at(r, c));
    CHECK(mx.values.at(r) == best);
  }

  SUBCASE("max tie-break takes the first index") {
    Tensor ties(Shape{1, 4}, std::vector<double>{2.0, 5.0, 5.0, 1.0});
    auto res = max(ties, 1);
    CHECK(res.argmax[0] == 1);
  }

  Tensor sl = slice(cat, 1, 3, 5);
  CHECK(max_abs_diff(sl, b) == 0.0);
  CHECK_THROWS_AS(slice(cat, 1, 6, 5), ShapeError);

  Tensor r = reshape(a, {3, 2});
  CHECK(r.at(2, 1) == a.at(1, 2));
  CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);

  Tensor tr = transpose(a);
  CHECK(tr.at(2, 1) == a.at(1, 2));

  Tensor g = gather_cols(a, {2, 0, 2});
  CHECK(g.shape() == Shape{2, 3});
  CHECK(g.at(0, 0) == a.at(0, 2));
  CHECK(g.at(1, 1) == a.at(1, 0));
  CHECK(g.at(0, 2) == a.at(0, 2));

  Tensor cg(Shape{1, 6}, std::vector<double>{3, 1, 4, 1, 5, 9});
  Tensor cgm = colgroup_max(cg, 2);
  CHECK(cgm.data() == std::vector<double>{3, 4, 9});
}

TEST_CASE("backward on simple graphs") {
  SUBCASE("loss = sum(x) gives unit gradient") {
    Tensor x = Tensor::full({2, 3}, 2.0);
    x.set_requires_grad(true);
    ComputeTape tape;
    TapeScope scope(tape);
    Tensor loss = sum(x);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("loss = sum(x*x) gives 2x") {
    Rng rng(29);
    Tensor x = random_tensor({4}, rng);
    x.set_requires_grad(true);
    ComputeTape tape;
    TapeScope scope(tape);
    Tensor loss = sum(hadamard(x, x));
    tape.backward(loss);
    for (std::int64_t i = 0; i < 4; ++i) {
      CHECK(x.grad()[static_cast<std::size_t>(i)] == doctest::Approx(2.0 * x.at(i)).epsilon(1e-12));
    }
  }
  SUBCASE("fan-out accumulates path gradients") {
    // y = sum(x) + sum(x*x); dy/dx = 1 + 2x, the symbolic sum of both paths.
    Tensor x(Shape{3}, std::vector<double>{0.5, -1.0, 2.0});
    x.set_requires_grad(true);
    ComputeTape tape;
    TapeScope scope(tape);
    Tensor loss = add(sum(x), sum(hadamard(x, x)));
    tape.backward(loss);
    for (std::int64_t i = 0; i < 3; ++i) {
      CHECK(x.grad()[static_cast<std::size_t>(i)] ==
            doctest::Approx(1.0 + 2.0 * x.at(i)).epsilon(1e-12));
    }
  }
  SUBCASE("non-scalar loss rejected") {
    Tensor x = Tensor::ones({2});
    ComputeTape tape;
    CHECK_THROWS_AS(tape.backward(x), UsageError);
  }
}

TEST_CASE("grad_check on closed-form cases") {
  SUBCASE("sum of squares is exact") {
    auto f = [](const Tensor& x) { return sum(hadamard(x, x)); };
    auto report = grad_check(f, Tensor::ones({3}));
    CHECK(report.max_rel_err < 1e-8);
  }
  SUBCASE("softmax then sum of squares") {
    Rng rng(31);
    auto f = [](const Tensor& x) { return sum(hadamard(softmax(x, 0), softmax(x, 0))); };
    auto report = grad_check(f, random_tensor({6}, rng, -2.0, 2.0));
    CHECK(report.max_rel_err < 1e-4);
  }
  SUBCASE("NaN during evaluation is reported") {
    auto f = [](const Tensor& x) { return log(x); };
    Tensor x = Tensor::full({1}, 1e-6);
    CHECK_THROWS_AS(grad_check(f, x, 1e-5), NumericError);
  }
}

TEST_CASE("random composite graph matches finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed + 100);
    Tensor m = random_tensor({4, 3}, rng);
    auto f = [&](const Tensor& x) {
      Tensor h1 = relu(matmul(m, reshape(x, {3, 2})));
      Tensor h2 = softmax(h1, 0);
      Tensor h3 = hadamard(h2, h2);
      return mean(add(sum(h3, 1), sigmoid(sum(h1, 1))));
    };
    auto report = grad_check(f, random_tensor_away_from({6}, rng, 0.05));
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("every op matches finite differences over 10 seeds") {
  struct Case {
    std::string name;
    Shape shape;
    std::function<Tensor(const Tensor&, Rng&)> f;
    bool away_from_zero = false;
    double lo = -1.0, hi = 1.0;
  };
  // Each case reduces the op output to a scalar through sum-of-squares so
  // the full Jacobian is exercised.
  auto sq = [](const Tensor& t) { return sum(hadamard(t, t)); };
  std::vector<Case> cases = {
      {"matmul_lhs", {3, 4}, [&](const Tensor& x, Rng& r) { return sq(matmul(x, random_tensor({4, 2}, r))); }},
      {"matmul_rhs", {4, 2}, [&](const Tensor& x, Rng& r) { return sq(matmul(random_tensor({3, 4}, r), x)); }},
      {"transpose", {3, 4}, [&](const Tensor& x, Rng&) { return sq(transpose(x)); }},
      {"reshape", {2, 6}, [&](const Tensor& x, Rng&) { return sq(reshape(x, {3, 4})); }},
      {"slice", {3, 5}, [&](const Tensor& x, Rng&) { return sq(slice(x, 1, 1, 3)); }},
      {"concat", {2, 3}, [&](const Tensor& x, Rng& r) { return sq(concat({x, random_tensor({2, 2}, r), x}, 1)); }},
      {"softmax", {3, 4}, [&](const Tensor& x, Rng&) { return sq(softmax(x, 1)); }},
      {"add", {2, 3}, [&](const Tensor& x, Rng& r) { return sq(add(x, random_tensor({2, 3}, r))); }},
      {"sub", {2, 3}, [&](const Tensor& x, Rng& r) { return sq(sub(random_tensor({2, 3}, r), x)); }},
      {"hadamard_same", {2, 3}, [&](const Tensor& x, Rng& r) { return sq(hadamard(x, random_tensor({2, 3}, r))); }},
      {"hadamard_bcast", {4}, [&](const Tensor& x, Rng& r) { return sq(hadamard(random_tensor({4, 3}, r), x)); }},
      {"add_bcast0", {3}, [&](const Tensor& x, Rng& r) { return sq(add_bcast0(random_tensor({3, 4}, r), x)); }},
      {"add_bcast1", {4}, [&](const Tensor& x, Rng& r) { return sq(add_bcast1(random_tensor({3, 4}, r), x)); }},
      {"add_scalar", {5}, [&](const Tensor& x, Rng&) { return sq(add_scalar(x, 0.7)); }},
      {"scale", {5}, [&](const Tensor& x, Rng&) { return sq(scale(x, -1.3)); }},
      {"relu", {8}, [&](const Tensor& x, Rng&) { return sq(relu(x)); }, true},
      {"sigmoid", {6}, [&](const Tensor& x, Rng&) { return sq(sigmoid(x)); }},
      {"exp", {6}, [&](const Tensor& x, Rng&) { return sq(agcm::exp(x)); }},
      {"log", {6}, [&](const Tensor& x, Rng&) { return sq(agcm::log(x)); }, false, 0.2, 2.0},
      {"sqrt", {6}, [&](const Tensor& x, Rng&) { return sq(agcm::sqrt(x)); }, false, 0.2, 2.0},
      {"reciprocal", {6}, [&](const Tensor& x, Rng&) { return sq(reciprocal(x)); }, false, 0.3, 1.5},
      {"clamp_min", {8}, [&](const Tensor& x, Rng&) { return sq(clamp_min(x, 0.0)); }, true},
      {"sum_all", {2, 3}, [&](const Tensor& x, Rng&) { return sq(sum(x)); }},
      {"sum_axis", {2, 3, 2}, [&](const Tensor& x, Rng&) { return sq(sum(x, 1)); }},
      {"mean_axis", {2, 4}, [&](const Tensor& x, Rng&) { return sq(mean(x, 0)); }},
      {"max_axis", {3, 4}, [&](const Tensor& x, Rng&) { return sq(max(x, 1).values); }, true},
      {"gather_cols", {2, 5}, [&](const Tensor& x, Rng&) { return sq(gather_cols(x, {0, 3, 3, 4})); }},
      {"colgroup_max", {2, 6}, [&](const Tensor& x, Rng&) { return sq(colgroup_max(x, 3)); }, true},
      {"conv2d_input", {2, 5, 5}, [&](const Tensor& x, Rng& r) { return sq(conv2d(x, random_tensor({2, 2, 3, 3}, r), 1, 1, 1)); }},
      {"conv2d_kernel", {2, 1, 3, 3}, [&](const Tensor& x, Rng& r) { return sq(conv2d(random_tensor({1, 5, 5}, r), x, 2, 1, 1)); }},
      {"upsample", {2, 3, 3}, [&](const Tensor& x, Rng&) { return sq(upsample_nearest2(x)); }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed * 37 + 5);
      Tensor x = c.away_from_zero ? random_tensor_away_from(c.shape, rng, 0.05)
                                  : random_tensor(c.shape, rng, c.lo, c.hi);
      Rng aux(seed * 53 + 9);
      auto f = [&](const Tensor& t) {
        Rng local = aux;  // same auxiliary tensors on every evaluation
        return c.f(t, local);
      };
      auto report = grad_check(f, x);
      CHECK_MESSAGE(report.max_rel_err < 1e-4,
                    c.name << " seed " << seed << " err " << report.max_rel_err);
    }
  }
}

TEST_CASE("gradient corruption hook is observable") {
  testing::corrupt_backward("matmul", 1.5);
  auto f = [](const Tensor& x) {
    Tensor w(Shape{2, 2}, std::vector<double>{0.3, -0.7, 1.1, 0.4});
    return sum(matmul(w, reshape(x, {2, 2})));
  };
  auto report = grad_check(f, Tensor::ones({4}));
  testing::reset_backward_corruption();
  CHECK(report.max_rel_err > 0.1);

  auto clean = grad_check(f, Tensor::ones({4}));
  CHECK(clean.max_rel_err < 1e-6);
}

TEST_CASE("tape is explicit and append-only per pass") {
  Tensor x = Tensor::ones({3});
  x.set_requires_grad(true);
  ComputeTape tape;
  {
    TapeScope scope(tape);
    sum(hadamard(x, x));
  }
  CHECK(tape.size() == 2);
  // No recording without an active scope.
  sum(hadamard(x, x));
  CHECK(tape.size() == 2);
  tape.clear();
  CHECK(tape.empty());
}
