#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "agcm/data.hpp"
#include "agcm/metrics.hpp"
#include "agcm/network.hpp"
#include "agcm/nn.hpp"

namespace agcm {

struct TrainConfig {
  std::int64_t epochs = 75;
  std::int64_t batch_size = 4;
  double lr_start = 1e-4;
  double lr_end = 1e-5;
  double flip_prob = 0.5;
  std::uint64_t seed = 42;
  std::int64_t max_steps = 0;    // cumulative step cap; 0 runs the epoch budget
  std::int64_t eval_every = 1;   // epochs between metric evaluations
  std::string resume;            // checkpoint path to continue from

  void validate() const;
};

/// Mean binary cross-entropy with logs clamped at 1e-12. Ground truth must
/// be strictly binary.
Tensor bce_loss(const Tensor& pred, const Tensor& gt);

/// Cosine annealing from lr_start (step 0) to lr_end (step = total_steps).
double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_start, double lr_end);

/// Mirrors image and mask along the width axis.
std::pair<Tensor, Tensor> hflip(const Tensor& image, const Tensor& mask);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected adaptive moment optimizer. Moment slots are keyed by
/// parameter path, one slot per parameter.
class AdamState {
 public:
  explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// One update over every store parameter; every parameter must carry a
  /// gradient from the preceding backward pass.
  void step(ParameterStore& store, double lr);

  std::int64_t steps_taken() const { return t_; }
  std::size_t slot_count() const { return slots_.size(); }
  const AdamConfig& config() const { return cfg_; }

  std::string serialize(const ParameterStore& store) const;
  void deserialize(const std::string& blob, const ParameterStore& store);

 private:
  struct Slot {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Slot> slots_;
};

struct EpochLogRow {
  std::int64_t epoch = 0;
  std::int64_t step = 0;  // cumulative optimizer steps at the end of the epoch
  double lr = 0.0;        // learning rate at the epoch's first step
  double loss = 0.0;      // mean batch loss over the epoch
  double f_beta = 0.0;
  double mae = 0.0;
  double e_measure = 0.0;
  double s_measure = 0.0;
  bool evaluated = false;  // metrics computed this epoch (else carried over)
};

struct TrainOptions {
  std::string out_dir;            // checkpoints written here when non-empty
  std::uint64_t config_hash = 0;  // architecture identity for checkpoints
};

struct TrainResult {
  std::vector<EpochLogRow> log;
  std::int64_t best_epoch = 0;
  double best_mae = 1.0;
  std::int64_t steps = 0;
};

/// Full optimization loop: seeded shuffling and flips, cosine-annealed
/// adaptive updates, per-epoch training-set metrics, final and best-mae
/// checkpoints, and deterministic resume from a saved epoch.
TrainResult train(const NetworkConfig& net_cfg, const TrainConfig& train_cfg,
                  const std::vector<Sample>& data, ParameterStore& store,
                  const TrainOptions& options = {});

/// Serializes per-epoch rows as CSV with six-decimal fixed formatting.
std::string epoch_log_csv(const std::vector<EpochLogRow>& rows);

}  // namespace agcm
