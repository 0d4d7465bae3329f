#include "agcm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "agcm/error.hpp"

namespace agcm {

namespace {

struct MapView {
  const double* p = nullptr;
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::int64_t size() const { return h * w; }
  double at(std::int64_t y, std::int64_t x) const { return p[y * w + x]; }
};

MapView view_of(const Tensor& t, const char* role) {
  if (t.rank() == 2) return {t.data().data(), t.dim(0), t.dim(1)};
  if (t.rank() == 3 && t.dim(0) == 1) return {t.data().data(), t.dim(1), t.dim(2)};
  throw ShapeError(std::string(role) + " map must be [h x w] or [1 x h x w], got " +
                   shape_str(t.shape()));
}

std::pair<MapView, MapView> paired_views(const Tensor& pred, const Tensor& gt) {
  MapView p = view_of(pred, "prediction");
  MapView g = view_of(gt, "ground truth");
  if (p.h != g.h || p.w != g.w) {
    throw ShapeError("prediction " + shape_str(pred.shape()) + " and ground truth " +
                     shape_str(gt.shape()) + " disagree");
  }
  for (std::int64_t i = 0; i < p.size(); ++i) {
    if (!(p.p[i] >= 0.0 && p.p[i] <= 1.0)) {
      throw DataError("prediction value " + std::to_string(p.p[i]) + " outside [0, 1] at element " +
                      std::to_string(i));
    }
    if (g.p[i] != 0.0 && g.p[i] != 1.0) {
      throw DataError("ground truth value " + std::to_string(g.p[i]) + " is not binary at element " +
                      std::to_string(i));
    }
  }
  return {p, g};
}

double mean_of(const MapView& m) {
  double s = 0.0;
  for (std::int64_t i = 0; i < m.size(); ++i) s += m.p[i];
  return s / static_cast<double>(m.size());
}

}  // namespace

FMeasureResult f_measure(const Tensor& pred, const Tensor& gt, int thresholds) {
  if (thresholds < 1) throw UsageError("f_measure requires at least one threshold");
  const auto [p, g] = paired_views(pred, gt);
  const std::int64_t n = p.size();

  std::int64_t positives = 0;
  for (std::int64_t i = 0; i < n; ++i) positives += g.p[i] == 1.0 ? 1 : 0;
  if (positives == 0) return {0.0, true};

  // Bucket pixels by the largest k with value >= k/thresholds; suffix sums
  // then give the confusion counts for every threshold in one pass.
  const std::int64_t tn = thresholds;
  std::vector<std::int64_t> fg_hist(static_cast<std::size_t>(tn + 1), 0);
  std::vector<std::int64_t> bg_hist(static_cast<std::size_t>(tn + 1), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = p.p[i];
    std::int64_t k = static_cast<std::int64_t>(v * static_cast<double>(tn));
    k = std::clamp<std::int64_t>(k, 0, tn);
    while (k + 1 <= tn && v >= static_cast<double>(k + 1) / static_cast<double>(tn)) ++k;
    while (k >= 1 && v < static_cast<double>(k) / static_cast<double>(tn)) --k;
    (g.p[i] == 1.0 ? fg_hist : bg_hist)[static_cast<std::size_t>(k)] += 1;
  }

  const double beta2 = 0.3;
  double best = 0.0;
  std::int64_t tp = 0, fp = 0;
  for (std::int64_t k = tn; k >= 1; --k) {
    tp += fg_hist[static_cast<std::size_t>(k)];
    fp += bg_hist[static_cast<std::size_t>(k)];
    const double precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    if (precision == 0.0 && recall == 0.0) continue;
    const double f = (1.0 + beta2) * precision * recall / (beta2 * precision + recall);
    best = std::max(best, f);
  }
  return {best, false};
}

double mae(const Tensor& pred, const Tensor& gt) {
  const auto [p, g] = paired_views(pred, gt);
  double acc = 0.0;
  for (std::int64_t i = 0; i < p.size(); ++i) acc += std::abs(p.p[i] - g.p[i]);
  return acc / static_cast<double>(p.size());
}

double e_measure(const Tensor& pred, const Tensor& gt) {
  const auto [p, g] = paired_views(pred, gt);
  const std::int64_t n = p.size();

  const double threshold = std::min(2.0 * mean_of(p), 1.0);
  std::vector<double> fm(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) fm[static_cast<std::size_t>(i)] = p.p[i] >= threshold ? 1.0 : 0.0;

  const double gt_mean = mean_of(g);
  if (gt_mean == 0.0 || gt_mean == 1.0) {
    // Constant ground truth: the alignment degenerates to agreement.
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += std::abs(fm[static_cast<std::size_t>(i)] - g.p[i]);
    return 1.0 - acc / static_cast<double>(n);
  }

  double fm_mean = 0.0;
  for (const double v : fm) fm_mean += v;
  fm_mean /= static_cast<double>(n);

  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double a = g.p[i] - gt_mean;
    const double b = fm[static_cast<std::size_t>(i)] - fm_mean;
    const double denom = a * a + b * b;
    const double align = denom > 0.0 ? 2.0 * a * b / denom : 0.0;
    acc += (1.0 + align) * (1.0 + align) / 4.0;
  }
  return acc / static_cast<double>(n);
}

namespace {

/// 2x/(x^2 + 1 + sigma): high when the masked prediction is uniformly close
/// to 1 inside the region.
double object_score(const MapView& values, const MapView& region) {
  std::int64_t count = 0;
  double mean = 0.0;
  for (std::int64_t i = 0; i < values.size(); ++i) {
    if (region.p[i] == 1.0) {
      mean += values.p[i];
      ++count;
    }
  }
  if (count == 0) return 0.0;
  mean /= static_cast<double>(count);
  double var = 0.0;
  for (std::int64_t i = 0; i < values.size(); ++i) {
    if (region.p[i] == 1.0) var += (values.p[i] - mean) * (values.p[i] - mean);
  }
  const double sigma = count > 1 ? std::sqrt(var / static_cast<double>(count - 1)) : 0.0;
  return 2.0 * mean / (mean * mean + 1.0 + sigma + std::numeric_limits<double>::epsilon());
}

double s_object(const MapView& p, const MapView& g) {
  const double mu = mean_of(g);
  std::vector<double> inv_p(static_cast<std::size_t>(p.size()));
  std::vector<double> inv_g(static_cast<std::size_t>(g.size()));
  for (std::int64_t i = 0; i < p.size(); ++i) {
    inv_p[static_cast<std::size_t>(i)] = 1.0 - p.p[i];
    inv_g[static_cast<std::size_t>(i)] = 1.0 - g.p[i];
  }
  const MapView pv_inv{inv_p.data(), p.h, p.w};
  const MapView gv_inv{inv_g.data(), g.h, g.w};
  const double fg = object_score(p, g);
  const double bg = object_score(pv_inv, gv_inv);
  return mu * fg + (1.0 - mu) * bg;
}

struct Block {
  std::int64_t y0, y1, x0, x1;
  std::int64_t area() const { return (y1 - y0) * (x1 - x0); }
};

double block_ssim(const MapView& p, const MapView& g, const Block& b) {
  const std::int64_t n = b.area();
  if (n == 0) return 0.0;
  double pm = 0.0, gm = 0.0;
  for (std::int64_t y = b.y0; y < b.y1; ++y) {
    for (std::int64_t x = b.x0; x < b.x1; ++x) {
      pm += p.at(y, x);
      gm += g.at(y, x);
    }
  }
  pm /= static_cast<double>(n);
  gm /= static_cast<double>(n);
  double pv = 0.0, gv = 0.0, cov = 0.0;
  for (std::int64_t y = b.y0; y < b.y1; ++y) {
    for (std::int64_t x = b.x0; x < b.x1; ++x) {
      const double dp = p.at(y, x) - pm;
      const double dg = g.at(y, x) - gm;
      pv += dp * dp;
      gv += dg * dg;
      cov += dp * dg;
    }
  }
  if (n > 1) {
    pv /= static_cast<double>(n - 1);
    gv /= static_cast<double>(n - 1);
    cov /= static_cast<double>(n - 1);
  } else {
    pv = gv = cov = 0.0;
  }
  const double alpha = 4.0 * pm * gm * cov;
  const double beta = (pm * pm + gm * gm) * (pv + gv);
  if (beta > 0.0) return alpha / beta;
  return alpha == 0.0 ? 1.0 : 0.0;
}

double s_region(const MapView& p, const MapView& g) {
  // Centroid of the foreground, pushed into the first block.
  double row_sum = 0.0, col_sum = 0.0;
  std::int64_t count = 0;
  for (std::int64_t y = 0; y < g.h; ++y) {
    for (std::int64_t x = 0; x < g.w; ++x) {
      if (g.at(y, x) == 1.0) {
        row_sum += static_cast<double>(y);
        col_sum += static_cast<double>(x);
        ++count;
      }
    }
  }
  const std::int64_t cy = static_cast<std::int64_t>(row_sum / static_cast<double>(count)) + 1;
  const std::int64_t cx = static_cast<std::int64_t>(col_sum / static_cast<double>(count)) + 1;
  const Block blocks[4] = {
      {0, cy, 0, cx}, {0, cy, cx, g.w}, {cy, g.h, 0, cx}, {cy, g.h, cx, g.w}};
  const double total = static_cast<double>(g.size());
  double score = 0.0;
  for (const Block& b : blocks) {
    if (b.y1 <= b.y0 || b.x1 <= b.x0) continue;
    score += static_cast<double>(b.area()) / total * block_ssim(p, g, b);
  }
  return score;
}

}  // namespace

double s_measure(const Tensor& pred, const Tensor& gt) {
  const auto [p, g] = paired_views(pred, gt);
  const double mu = mean_of(g);
  if (mu == 0.0 || mu == 1.0) {
    // Constant ground truth: no centroid split exists; the object term
    // (which reduces to its one populated side) stands alone.
    return std::clamp(s_object(p, g), 0.0, 1.0);
  }
  const double score = 0.5 * s_object(p, g) + 0.5 * s_region(p, g);
  return std::clamp(score, 0.0, 1.0);
}

EvalReport evaluate(const Tensor& pred, const Tensor& gt) {
  EvalReport r;
  r.f_beta = f_measure(pred, gt).value;
  r.mae = mae(pred, gt);
  r.e_measure = e_measure(pred, gt);
  r.s_measure = s_measure(pred, gt);
  return r;
}

}  // namespace agcm
