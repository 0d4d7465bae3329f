#pragma once

#include "agcm/tensor.hpp"

namespace agcm {

// Saliency evaluation measures. Predictions are soft maps in [0, 1]; ground
// truth is strictly binary. Maps may be [h x w] or [1 x h x w]. All four
// measures return values in [0, 1].

struct FMeasureResult {
  double value = 0.0;
  bool degenerate_gt = false;  // empty ground truth: value defined as 0
};

/// Maximum F over `thresholds` evenly spaced cuts k/thresholds, k = 1..n,
/// with beta^2 = 0.3. Precision and recall of an empty binarization count
/// as 0. Threshold grids nest (510 refines 255), so refining the sweep
/// never lowers the maximum.
FMeasureResult f_measure(const Tensor& pred, const Tensor& gt, int thresholds = 255);

/// Mean absolute difference over pixels.
double mae(const Tensor& pred, const Tensor& gt);

/// Enhanced-alignment score: the prediction is binarized at twice its mean
/// (clamped to 1), both maps are mean-centered, and the per-pixel alignment
/// 2ab/(a^2+b^2) is enhanced by (1+phi)^2/4 and averaged. A constant ground
/// truth degenerates to 1 - mean|FM - GT|.
double e_measure(const Tensor& pred, const Tensor& gt);

/// Structural similarity: 0.5 * object term + 0.5 * region term. The object
/// term compares foreground/background means and spreads; the region term
/// runs an SSIM-style comparison on the four blocks split at the ground
/// truth centroid. A constant ground truth returns the object term alone.
double s_measure(const Tensor& pred, const Tensor& gt);

struct EvalReport {
  double f_beta = 0.0;
  double mae = 0.0;
  double e_measure = 0.0;
  double s_measure = 0.0;
};

EvalReport evaluate(const Tensor& pred, const Tensor& gt);

}  // namespace agcm
