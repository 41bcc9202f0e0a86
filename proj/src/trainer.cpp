#include "glmlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace glmlab {

namespace {

constexpr const char* kModule = "trainer";
constexpr Real kPi = 3.14159265358979323846;

std::string format_real(Real v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(start_lr < min_lr && min_lr < peak_lr)) {
    throw ContractError(kModule, "learning rates must satisfy start < min < peak");
  }
  const Real tenth = peak_lr / 10.0;
  if (std::abs(min_lr - tenth) > 1e-12 * peak_lr) {
    throw ContractError(kModule, "min_lr must equal peak_lr/10 (the 10x cosine schedule)");
  }
  if (!(egs_alpha > 0.0) || egs_alpha > 1.0) {
    throw ContractError(kModule, "egs_alpha must lie in (0, 1]");
  }
  if (batch_start < 1 || batch_end < batch_start || batch_increment < 1) {
    throw ContractError(kModule, "invalid batch ramp");
  }
  if ((batch_end - batch_start) % batch_increment != 0) {
    throw ContractError(kModule, "batch ramp span must be a multiple of the increment");
  }
  if (clip_norm <= 0.0) throw ContractError(kModule, "clip_norm must be positive");
}

void loss_scaler_update(LossScaleState& state, const LossScaleConfig& cfg, bool overflow) {
  if (overflow) {
    state.good_steps = 0;
    if (state.hysteresis_left > 1) {
      --state.hysteresis_left;
    } else {
      state.scale = std::max(state.scale / 2.0, cfg.min_scale);
    }
    return;
  }
  ++state.good_steps;
  if (state.good_steps >= cfg.window) {
    state.scale *= 2.0;
    state.good_steps = 0;
    state.hysteresis_left = cfg.hysteresis;
  }
}

Real lr_at(Index step, const TrainConfig& cfg, Index total_steps) {
  if (step < 0 || step > total_steps || total_steps < 1) {
    throw ContractError(kModule, "lr_at step outside [0, total_steps]");
  }
  Index warmup = static_cast<Index>(std::llround(cfg.lr_warmup_fraction *
                                                 static_cast<Real>(total_steps)));
  warmup = std::max<Index>(warmup, 1);
  if (step <= warmup) {
    const Real frac = static_cast<Real>(step) / static_cast<Real>(warmup);
    return cfg.start_lr + (cfg.peak_lr - cfg.start_lr) * frac;
  }
  const Index horizon = cfg.cosine_horizon_steps > 0 ? cfg.cosine_horizon_steps : total_steps;
  if (step >= horizon) return cfg.min_lr;
  const Real t = static_cast<Real>(step - warmup) / static_cast<Real>(horizon - warmup);
  return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(kPi * t));
}

Index batch_size_at(Index samples_seen, const TrainConfig& cfg, Index total_samples) {
  if (samples_seen < 0) throw ContractError(kModule, "samples_seen must be nonnegative");
  const Index span = cfg.batch_end - cfg.batch_start;
  if (span == 0) return cfg.batch_start;
  const Real ramp = cfg.batch_ramp_fraction * static_cast<Real>(total_samples);
  if (ramp <= 0.0 || static_cast<Real>(samples_seen) >= ramp) return cfg.batch_end;
  const Index increments = span / cfg.batch_increment;
  const auto taken = static_cast<Index>(std::floor(static_cast<Real>(samples_seen) /
                                                   ramp * static_cast<Real>(increments)));
  return cfg.batch_start + cfg.batch_increment * std::min(taken, increments);
}

AdamState AdamState::from(const std::vector<ParamRef>& params) {
  AdamState state;
  for (const ParamRef& ref : params) {
    state.m.push_back(ArrX::Zero(ref.tensor.size()));
    state.v.push_back(ArrX::Zero(ref.tensor.size()));
  }
  return state;
}

bool adamw_step(const std::vector<ParamRef>& params, AdamState& state, Real lr,
                const TrainConfig& cfg) {
  if (state.m.size() != params.size()) {
    throw ContractError(kModule, "optimizer state does not match the parameter list");
  }
  for (const ParamRef& ref : params) {
    if (!ref.tensor.has_grad()) continue;
    if (!ref.tensor.grad().isFinite().all()) return false;  // aborted, reported upstream
  }
  state.t += 1;
  const Real bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<Real>(state.t));
  const Real bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<Real>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    const ParamRef& ref = params[i];
    Tensor tensor = ref.tensor;
    const ArrX grad = tensor.has_grad() ? tensor.grad() : ArrX::Zero(tensor.size());
    ArrX& m = state.m[i];
    ArrX& v = state.v[i];
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad;
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad.square();
    const ArrX m_hat = m / bc1;
    const ArrX v_hat = v / bc2;
    ArrX update = lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps));
    if (ref.weight_decay && cfg.weight_decay != 0.0) {
      update += (lr * cfg.weight_decay) * tensor.values();
    }
    tensor.values() -= update;
  }
  return true;
}

Real clip_gradients(const std::vector<ParamRef>& params, Real max_norm) {
  Real sq = 0.0;
  for (const ParamRef& ref : params) {
    if (ref.tensor.has_grad()) sq += ref.tensor.grad().square().sum();
  }
  const Real global = std::sqrt(sq);
  if (global > max_norm && global > 0.0) {
    const Real factor = max_norm / global;
    for (const ParamRef& ref : params) {
      if (!ref.tensor.has_grad()) continue;
      Tensor t = ref.tensor;
      t.node()->grad *= factor;
    }
  }
  return global;
}

namespace {

std::vector<std::pair<std::string, std::vector<Tensor>>> norm_groups(const ModelParams& model) {
  std::vector<std::pair<std::string, std::vector<Tensor>>> groups;
  groups.push_back({"embedding", {model.embedding}});
  for (size_t l = 0; l < model.layers.size(); ++l) {
    const LayerParams& layer = model.layers[l];
    groups.push_back({"layer" + std::to_string(l),
                      {layer.qkv, layer.out_proj, layer.ffn_w1, layer.ffn_v, layer.ffn_w2,
                       layer.ln1_gain, layer.ln1_bias, layer.ln2_gain, layer.ln2_bias}});
  }
  return groups;
}

Real median_of(std::deque<Real> values) {
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

GradReport GradNormMonitor::report(const ModelParams& model) {
  const auto groups = norm_groups(model);
  if (history_.empty()) history_.resize(groups.size());
  GradReport report;
  Real total_sq = 0.0;
  for (size_t g = 0; g < groups.size(); ++g) {
    Real sq = 0.0;
    for (const Tensor& t : groups[g].second) {
      if (t.has_grad()) sq += t.grad().square().sum();
    }
    const Real norm = std::sqrt(sq);
    total_sq += sq;
    bool spike = false;
    // The detector needs some history before a median is meaningful.
    if (history_[g].size() >= 8) {
      const Real med = median_of(history_[g]);
      spike = med > 0.0 && norm > factor_ * med;
    }
    history_[g].push_back(norm);
    while (static_cast<int>(history_[g].size()) > window_) history_[g].pop_front();
    report.groups.push_back(groups[g].first);
    report.norms.push_back(norm);
    report.spikes.push_back(spike);
  }
  report.global_norm = std::sqrt(total_sq);
  return report;
}

std::string metrics_line(const StepMetrics& m, const std::vector<std::string>& groups) {
  std::string line = "step=" + std::to_string(m.step);
  line += " loss=" + format_real(m.loss);
  line += " lr=" + format_real(m.lr);
  line += " batch=" + std::to_string(m.batch);
  line += " scale=" + format_real(m.scale);
  line += " global_norm=" + format_real(m.global_norm);
  for (size_t g = 0; g < groups.size() && g < m.group_norms.size(); ++g) {
    line += " norm[" + groups[g] + "]=" + format_real(m.group_norms[g]);
  }
  std::string spikes;
  for (size_t g = 0; g < m.spikes.size(); ++g) {
    if (m.spikes[g]) {
      if (!spikes.empty()) spikes += ",";
      spikes += groups[g];
    }
  }
  line += " spikes=" + (spikes.empty() ? "-" : spikes);
  line += std::string(" skipped=") + (m.skipped ? "1" : "0");
  return line;
}

TrainResult train(const std::vector<std::vector<int>>& corpus, ModelParams& model,
                  const TrainConfig& train_cfg, const CorruptionConfig& corruption_cfg,
                  const TrainOptions& opts) {
  train_cfg.validate();
  corruption_cfg.validate();
  if (opts.steps < 1) throw ContractError(kModule, "train needs at least one step");

  Rng root(opts.seed);
  SampleStream stream(corpus, corruption_cfg, root.fork(1));
  Rng dropout_rng = root.fork(2);

  const std::vector<ParamRef> params = model.parameters();
  AdamState adam = AdamState::from(params);
  LossScaleState scale_state = LossScaleState::from(train_cfg.loss_scale);
  GradNormMonitor monitor(train_cfg.spike_window, train_cfg.spike_factor);
  const bool half = opts.policy.half();

  TrainResult result;
  for (const auto& group : norm_groups(model)) result.groups.push_back(group.first);

  const Index total_samples = opts.steps * train_cfg.batch_end;
  Index samples_seen = 0;

  for (Index step = 0; step < opts.steps; ++step) {
    const Real lr = lr_at(step, train_cfg, opts.steps);
    const Index batch = batch_size_at(samples_seen, train_cfg, total_samples);
    const Real scale = half ? scale_state.scale : 1.0;

    for (const ParamRef& ref : params) {
      Tensor t = ref.tensor;
      t.zero_grad();
    }

    Real loss_sum = 0.0;
    for (Index b = 0; b < batch; ++b) {
      CorruptedSample sample = stream.next();
      ForwardOptions fwd;
      fwd.policy = opts.policy;
      fwd.egs_alpha = train_cfg.egs_alpha;
      fwd.dropout_rng = &dropout_rng;
      Tensor logits = forward(model, sample, fwd);
      Tensor loss = loss_blank_infilling(logits, sample);
      loss_sum += loss.item();
      backward(loss, scale / static_cast<Real>(batch));
    }
    const Real mean_loss = loss_sum / static_cast<Real>(batch);

    if (opts.inject_overflow_at && *opts.inject_overflow_at == step) {
      Tensor emb = model.embedding;
      emb.node()->grad_buffer()[0] = std::numeric_limits<Real>::infinity();
    }

    bool overflow = !std::isfinite(mean_loss);
    for (const ParamRef& ref : params) {
      if (ref.tensor.has_grad() && !ref.tensor.grad().isFinite().all()) overflow = true;
    }

    StepMetrics metrics;
    metrics.step = step;
    metrics.loss = mean_loss;
    metrics.lr = lr;
    metrics.batch = batch;
    metrics.scale = scale;

    if (overflow) {
      if (!half) {
        throw ContractError(kModule, "non-finite loss or gradient in wide mode at step " +
                                         std::to_string(step));
      }
      // Skip the step: parameters and optimizer state stay untouched.
      loss_scaler_update(scale_state, train_cfg.loss_scale, true);
      metrics.skipped = true;
      metrics.group_norms.assign(result.groups.size(), 0.0);
      metrics.spikes.assign(result.groups.size(), false);
    } else {
      if (half) {
        loss_scaler_update(scale_state, train_cfg.loss_scale, false);
        if (scale != 1.0) {
          for (const ParamRef& ref : params) {
            if (!ref.tensor.has_grad()) continue;
            Tensor t = ref.tensor;
            t.node()->grad /= scale;
          }
        }
      }
      GradReport report = monitor.report(model);
      metrics.global_norm = report.global_norm;
      metrics.group_norms = report.norms;
      metrics.spikes.assign(report.spikes.begin(), report.spikes.end());
      clip_gradients(params, train_cfg.clip_norm);
      if (!adamw_step(params, adam, lr, train_cfg)) {
        throw ContractError(kModule, "optimizer aborted on non-finite gradients at step " +
                                         std::to_string(step));
      }
    }

    samples_seen += batch;
    result.lines.push_back(metrics_line(metrics, result.groups));
    result.steps.push_back(metrics);
    if (opts.on_step) opts.on_step(metrics);

    if (opts.checkpoint_interval > 0 && !opts.checkpoint_dir.empty() &&
        (step + 1) % opts.checkpoint_interval == 0) {
      save_checkpoint(opts.checkpoint_dir / ("step" + std::to_string(step + 1)), model);
    }
  }
  return result;
}

}  // namespace glmlab
