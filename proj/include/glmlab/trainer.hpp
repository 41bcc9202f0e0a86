#pragma once

#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "glmlab/corruption.hpp"
#include "glmlab/model.hpp"
#include "glmlab/tensor.hpp"

namespace glmlab {

struct LossScaleConfig {
  Real initial = 65536.0;
  int window = 2000;     // consecutive clean steps before the scale doubles
  int hysteresis = 2;    // overflows tolerated before halving begins
  Real min_scale = 1.0;
};

struct LossScaleState {
  Real scale = 65536.0;
  int good_steps = 0;
  int hysteresis_left = 2;

  static LossScaleState from(const LossScaleConfig& cfg) {
    return {cfg.initial, 0, cfg.hysteresis};
  }
};

// Overflow zeroes the clean-step window and consumes hysteresis; once the
// hysteresis budget is spent every further overflow halves the scale (down to
// min_scale). A full window of clean steps doubles the scale and restores the
// hysteresis budget.
void loss_scaler_update(LossScaleState& state, const LossScaleConfig& cfg, bool overflow);

struct TrainConfig {
  Real peak_lr = 8e-5;
  Real start_lr = 1e-7;
  Real min_lr = 8e-6;  // peak/10 by the schedule's construction
  Real lr_warmup_fraction = 0.005;
  Index cosine_horizon_steps = 0;  // 0 = decay across the whole run

  Index batch_start = 192;
  Index batch_end = 4224;
  Index batch_increment = 24;
  Real batch_ramp_fraction = 0.025;

  Real adam_beta1 = 0.9;
  Real adam_beta2 = 0.95;
  Real adam_eps = 1e-8;
  Real weight_decay = 0.1;
  Real clip_norm = 1.0;
  Real egs_alpha = 0.1;
  Real spike_factor = 3.0;  // group norm above this multiple of its trailing median
  int spike_window = 50;

  LossScaleConfig loss_scale;

  void validate() const;
};

// Linear warmup from start_lr to peak_lr over the warmup fraction, then
// cosine decay from peak_lr down to min_lr.
Real lr_at(Index step, const TrainConfig& cfg, Index total_steps);

// Linear ramp in batch_increment steps from batch_start to batch_end across
// the ramp fraction of total_samples, then constant.
Index batch_size_at(Index samples_seen, const TrainConfig& cfg, Index total_samples);

struct AdamState {
  std::vector<ArrX> m;
  std::vector<ArrX> v;
  long t = 0;

  static AdamState from(const std::vector<ParamRef>& params);
};

// Decoupled-weight-decay Adam with bias correction. Returns false (and leaves
// parameters and state untouched) when any gradient is non-finite.
bool adamw_step(const std::vector<ParamRef>& params, AdamState& state, Real lr,
                const TrainConfig& cfg);

// Scales all gradients by clip_norm/global when the global L2 norm exceeds
// clip_norm; returns the pre-clip global norm.
Real clip_gradients(const std::vector<ParamRef>& params, Real max_norm);

struct GradReport {
  std::vector<std::string> groups;  // "embedding", "layer0", ...
  std::vector<Real> norms;          // per-group L2 norms
  std::vector<bool> spikes;
  Real global_norm = 0.0;
};

// Tracks trailing per-group norms and flags a spike when a group norm exceeds
// spike_factor times its trailing median.
class GradNormMonitor {
public:
  GradNormMonitor(int window, Real spike_factor) : window_(window), factor_(spike_factor) {}

  GradReport report(const ModelParams& model);

private:
  int window_;
  Real factor_;
  std::vector<std::deque<Real>> history_;
};

struct StepMetrics {
  Index step = 0;
  Real loss = 0.0;
  Real lr = 0.0;
  Index batch = 0;
  Real scale = 1.0;
  Real global_norm = 0.0;
  std::vector<Real> group_norms;
  std::vector<bool> spikes;
  bool skipped = false;
};

std::string metrics_line(const StepMetrics& m, const std::vector<std::string>& groups);

struct TrainOptions {
  Index steps = 200;
  std::uint64_t seed = 0;
  PrecisionPolicy policy;
  int checkpoint_interval = 0;  // 0 disables periodic checkpoints
  std::filesystem::path checkpoint_dir;
  std::optional<Index> inject_overflow_at;  // test hook: poison one step's grads
  std::function<void(const StepMetrics&)> on_step;
};

struct TrainResult {
  std::vector<StepMetrics> steps;
  std::vector<std::string> lines;
  std::vector<std::string> groups;
};

// The full loop: corruption pipeline -> forward with EGS -> backward with the
// loss scale -> unscale, clip, monitor -> AdamW. Deterministic for a given
// (corpus, configs, seed).
TrainResult train(const std::vector<std::vector<int>>& corpus, ModelParams& model,
                  const TrainConfig& train_cfg, const CorruptionConfig& corruption_cfg,
                  const TrainOptions& opts);

}  // namespace glmlab
