#include "agcm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "agcm/bytes.hpp"
#include "agcm/error.hpp"
#include "agcm/ops.hpp"

namespace agcm {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  if (!(lr_start > lr_end) || !(lr_end > 0.0)) {
    throw ConfigError("train: learning rates must satisfy lr_start > lr_end > 0");
  }
  if (flip_prob < 0.0 || flip_prob > 1.0) throw ConfigError("train: flip probability outside [0, 1]");
  if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
  if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
}

Tensor bce_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("bce_loss shapes disagree: " + shape_str(pred.shape()) + " vs " +
                     shape_str(gt.shape()));
  }
  for (std::size_t i = 0; i < gt.data().size(); ++i) {
    if (gt.data()[i] != 0.0 && gt.data()[i] != 1.0) {
      throw DataError("bce_loss ground truth not binary at element " + std::to_string(i));
    }
  }
  Tensor inv_gt = gt.clone();
  for (auto& v : inv_gt.mutable_data()) v = 1.0 - v;
  Tensor pos = hadamard(gt, log(clamp_min(pred, 1e-12)));
  Tensor neg = hadamard(inv_gt, log(clamp_min(add_scalar(scale(pred, -1.0), 1.0), 1e-12)));
  return scale(sum(add(pos, neg)), -1.0 / static_cast<double>(pred.numel()));
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_start, double lr_end) {
  if (total_steps < 1) throw UsageError("cosine_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps) {
    throw UsageError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                     std::to_string(total_steps) + "]");
  }
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(3.14159265358979323846 * t));
}

std::pair<Tensor, Tensor> hflip(const Tensor& image, const Tensor& mask) {
  if (image.rank() != 3 || mask.rank() != 3 || image.dim(1) != mask.dim(1) ||
      image.dim(2) != mask.dim(2)) {
    throw ShapeError("hflip expects rank-3 image and mask with equal spatial dims, got " +
                     shape_str(image.shape()) + " and " + shape_str(mask.shape()));
  }
  auto mirror = [](const Tensor& t) {
    const std::int64_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
    Tensor out(t.shape());
    const auto& src = t.data();
    auto& dst = out.mutable_data();
    for (std::int64_t ci = 0; ci < c; ++ci) {
      for (std::int64_t y = 0; y < h; ++y) {
        const double* row = src.data() + (ci * h + y) * w;
        double* orow = dst.data() + (ci * h + y) * w;
        for (std::int64_t x = 0; x < w; ++x) orow[x] = row[w - 1 - x];
      }
    }
    return out;
  };
  return {mirror(image), mirror(mask)};
}

void AdamState::step(ParameterStore& store, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [path, entry] : store.entries()) {
    Tensor param = entry.tensor;
    if (!param.has_grad()) {
      throw UsageError("adam step: missing gradient for parameter '" + path + "'");
    }
    const auto& g = param.grad();
    Slot& slot = slots_[path];
    if (slot.m.empty()) {
      slot.m.assign(g.size(), 0.0);
      slot.v.assign(g.size(), 0.0);
    }
    auto& value = param.mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g[i];
      slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double m_hat = slot.m[i] / bc1;
      const double v_hat = slot.v[i] / bc2;
      value[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

std::string AdamState::serialize(const ParameterStore& store) const {
  std::string out;
  bytes::put_u64(out, static_cast<std::uint64_t>(t_));
  bytes::put_f64(out, cfg_.beta1);
  bytes::put_f64(out, cfg_.beta2);
  bytes::put_f64(out, cfg_.eps);
  bytes::put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [path, entry] : store.entries()) {
    bytes::put_str(out, path);
    auto it = slots_.find(path);
    const std::size_t n = static_cast<std::size_t>(entry.tensor.numel());
    bytes::put_u64(out, n);
    if (it == slots_.end()) {
      for (std::size_t i = 0; i < 2 * n; ++i) bytes::put_f64(out, 0.0);
    } else {
      for (const double v : it->second.m) bytes::put_f64(out, v);
      for (const double v : it->second.v) bytes::put_f64(out, v);
    }
  }
  return out;
}

void AdamState::deserialize(const std::string& blob, const ParameterStore& store) {
  bytes::Reader r(blob, "optimizer state");
  AdamConfig cfg;
  const auto t = static_cast<std::int64_t>(r.u64());
  cfg.beta1 = r.f64();
  cfg.beta2 = r.f64();
  cfg.eps = r.f64();
  const std::uint32_t count = r.u32();
  if (count != store.size()) {
    throw IoError("optimizer state covers " + std::to_string(count) + " parameters, store has " +
                  std::to_string(store.size()));
  }
  std::map<std::string, Slot> slots;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string path = r.str();
    if (!store.contains(path)) throw IoError("optimizer state names unknown parameter '" + path + "'");
    const std::uint64_t n = r.u64();
    if (n != static_cast<std::uint64_t>(store.get(path).numel())) {
      throw IoError("optimizer state size mismatch for '" + path + "'");
    }
    Slot slot;
    slot.m.resize(n);
    slot.v.resize(n);
    for (auto& v : slot.m) v = r.f64();
    for (auto& v : slot.v) v = r.f64();
    slots.emplace(path, std::move(slot));
  }
  if (!r.at_end()) throw IoError("optimizer state has trailing bytes");
  cfg_ = cfg;
  t_ = t;
  slots_ = std::move(slots);
}

namespace {

EvalReport mean_report(const ParameterStore& store, const NetworkConfig& net_cfg,
                       const std::vector<Sample>& data) {
  EvalReport acc;
  for (const Sample& s : data) {
    const Tensor pred = model_forward(store, net_cfg, s.image);
    const EvalReport r = evaluate(pred, s.mask);
    acc.f_beta += r.f_beta;
    acc.mae += r.mae;
    acc.e_measure += r.e_measure;
    acc.s_measure += r.s_measure;
  }
  const double n = static_cast<double>(data.size());
  acc.f_beta /= n;
  acc.mae /= n;
  acc.e_measure /= n;
  acc.s_measure /= n;
  return acc;
}

}  // namespace

TrainResult train(const NetworkConfig& net_cfg, const TrainConfig& train_cfg,
                  const std::vector<Sample>& data, ParameterStore& store,
                  const TrainOptions& options) {
  net_cfg.validate();
  train_cfg.validate();
  if (data.empty()) throw DataError("train: dataset is empty");
  for (const Sample& s : data) {
    if (s.image.shape() != Shape{3, net_cfg.input_height, net_cfg.input_width}) {
      throw DataError("train: sample '" + s.id + "' has shape " + shape_str(s.image.shape()) +
                      ", config expects 3 x " + std::to_string(net_cfg.input_height) + " x " +
                      std::to_string(net_cfg.input_width));
    }
  }

  declare_model(store, net_cfg);
  AdamState adam;
  Rng rng(train_cfg.seed);
  std::int64_t start_epoch = 0;

  if (!train_cfg.resume.empty()) {
    const CheckpointExtras extras = load_checkpoint(train_cfg.resume, options.config_hash, store);
    adam.deserialize(extras.optimizer_state, store);
    rng = Rng::deserialize(extras.rng_state);
    start_epoch = extras.epoch;
  } else {
    init_params(store, InitScheme::XavierUniform, train_cfg.seed);
  }

  const auto n = static_cast<std::int64_t>(data.size());
  const std::int64_t steps_per_epoch = (n + train_cfg.batch_size - 1) / train_cfg.batch_size;
  // The annealing horizon always spans the full epoch budget; max_steps only
  // caps how far this invocation runs, so a stopped-and-resumed schedule
  // matches an uninterrupted one.
  const std::int64_t total_steps = train_cfg.epochs * steps_per_epoch;
  const std::int64_t stop_steps =
      train_cfg.max_steps > 0 ? std::min(train_cfg.max_steps, total_steps) : total_steps;

  TrainResult result;
  std::int64_t step = start_epoch * steps_per_epoch;
  EvalReport last_metrics;
  bool have_metrics = false;

  const std::string final_path = options.out_dir.empty() ? "" : options.out_dir + "/checkpoint_final.agcm";
  const std::string best_path = options.out_dir.empty() ? "" : options.out_dir + "/checkpoint_best.agcm";
  auto save_state = [&](const std::string& path, std::int64_t epoch) {
    if (path.empty()) return;
    CheckpointExtras extras;
    extras.optimizer_state = adam.serialize(store);
    extras.rng_state = rng.serialize();
    extras.epoch = static_cast<std::uint32_t>(epoch);
    save_checkpoint(path, options.config_hash, store, extras);
  };

  std::vector<std::int64_t> order(static_cast<std::size_t>(n));

  for (std::int64_t epoch = start_epoch + 1; epoch <= train_cfg.epochs && step < stop_steps;
       ++epoch) {
    // Each epoch's order is a function of the rng state alone, so a resumed
    // run shuffles identically to the uninterrupted one.
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::int64_t batches = 0;
    double first_lr = 0.0;

    for (std::int64_t batch_start = 0; batch_start < n && step < stop_steps;
         batch_start += train_cfg.batch_size) {
      const std::int64_t batch_end = std::min<std::int64_t>(batch_start + train_cfg.batch_size, n);
      const double lr = cosine_lr(step, total_steps, train_cfg.lr_start, train_cfg.lr_end);
      if (batches == 0) first_lr = lr;

      ComputeTape tape;
      Tensor batch_loss;
      try {
        TapeScope scope(tape);
        Tensor acc;
        for (std::int64_t bi = batch_start; bi < batch_end; ++bi) {
          const Sample& s = data[static_cast<std::size_t>(order[static_cast<std::size_t>(bi)])];
          Tensor image = s.image;
          Tensor mask = s.mask;
          if (rng.uniform() < train_cfg.flip_prob) {
            auto flipped = hflip(image, mask);
            image = flipped.first;
            mask = flipped.second;
          }
          Tensor loss = bce_loss(model_forward(store, net_cfg, image), mask);
          acc = acc.defined() ? add(acc, loss) : loss;
        }
        batch_loss = scale(acc, 1.0 / static_cast<double>(batch_end - batch_start));
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + ", batch " + std::to_string(batches) + ")");
      }
      const double loss_value = batch_loss.value();
      if (!std::isfinite(loss_value)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + ", batch " + std::to_string(batches));
      }
      tape.backward(batch_loss);
      adam.step(store, lr);
      store.zero_grads();
      tape.clear();

      epoch_loss += loss_value;
      ++batches;
      ++step;
    }

    EpochLogRow row;
    row.epoch = epoch;
    row.step = step;
    row.lr = first_lr;
    row.loss = batches > 0 ? epoch_loss / static_cast<double>(batches) : 0.0;
    const bool is_last = epoch == train_cfg.epochs || step >= stop_steps;
    if ((epoch - 1) % train_cfg.eval_every == 0 || is_last) {
      last_metrics = mean_report(store, net_cfg, data);
      have_metrics = true;
      row.evaluated = true;
      if (last_metrics.mae < result.best_mae) {
        result.best_mae = last_metrics.mae;
        result.best_epoch = epoch;
        save_state(best_path, epoch);
      }
    }
    if (have_metrics) {
      row.f_beta = last_metrics.f_beta;
      row.mae = last_metrics.mae;
      row.e_measure = last_metrics.e_measure;
      row.s_measure = last_metrics.s_measure;
    }
    result.log.push_back(row);
  }

  result.steps = step;
  save_state(final_path, result.log.empty() ? start_epoch : result.log.back().epoch);
  return result;
}

std::string epoch_log_csv(const std::vector<EpochLogRow>& rows) {
  std::string out = "epoch,step,lr,loss,f_beta,mae,e_measure,s_measure\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%lld,%lld,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                  static_cast<long long>(r.epoch), static_cast<long long>(r.step), r.lr, r.loss,
                  r.f_beta, r.mae, r.e_measure, r.s_measure);
    out += line;
  }
  return out;
}

}  // namespace agcm
