#include "glmlab/pipeplan.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace glmlab {

namespace {

constexpr const char* kModule = "pipeplan";

std::string format_real(Real v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void ClusterSpec::validate() const {
  if (nodes < 1 || gpus_per_node < 1) {
    throw ContractError(kModule, "cluster needs at least one node and one GPU");
  }
  if (t_f <= 0.0 || t_b <= 0.0) {
    throw ContractError(kModule, "per-microbatch times must be positive");
  }
  if (tensor_parallel_limit < 1) {
    throw ContractError(kModule, "tensor_parallel_limit must be >= 1");
  }
}

Real bubble_ratio(int p, int m) {
  if (p < 1 || m < 1) throw ContractError(kModule, "bubble_ratio requires p >= 1 and m >= 1");
  return static_cast<Real>(p - 1) / static_cast<Real>(m + p - 1);
}

Real bubble_ratio_tp(int n, int t, int m) {
  if (t < 1 || n < 1 || m < 1) {
    throw ContractError(kModule, "bubble_ratio_tp requires positive arguments");
  }
  if (n % t != 0) {
    throw ContractError(kModule, std::to_string(t) + " does not divide the group size " +
                                     std::to_string(n));
  }
  return bubble_ratio(n / t, m);
}

std::vector<int> balance_layers(int k, int p) {
  if (k < 2 || p < 2) throw ContractError(kModule, "balance_layers requires k >= 2 and p >= 2");
  std::vector<int> layers(static_cast<size_t>(p), k);
  layers.front() = k - 1;
  layers.back() = k - 1;
  return layers;
}

std::vector<ParallelPlan> enumerate_plans(const ClusterSpec& cluster, const ModelShape& model,
                                          long global_batch, int micro_batch) {
  cluster.validate();
  if (global_batch < 1 || micro_batch < 1) {
    throw ContractError(kModule, "batch sizes must be positive");
  }
  const int gpus = cluster.total_gpus();
  std::vector<ParallelPlan> plans;
  for (int t = 1; t <= std::max(cluster.tensor_parallel_limit, cluster.gpus_per_node); ++t) {
    if (t > cluster.tensor_parallel_limit) continue;
    // Tensor groups tile nodes: either several groups per node or several
    // whole nodes per group.
    const bool within_node = t <= cluster.gpus_per_node && cluster.gpus_per_node % t == 0;
    const bool cross_node = t > cluster.gpus_per_node && t % cluster.gpus_per_node == 0;
    if (!within_node && !cross_node) continue;
    if (gpus % t != 0) continue;
    const int rest = gpus / t;
    for (int p = 1; p <= rest; ++p) {
      if (rest % p != 0) continue;
      std::vector<int> layers;
      if (p == 1) {
        layers = {model.num_layers};
      } else {
        if ((model.num_layers + 2) % p != 0) continue;
        const int k = (model.num_layers + 2) / p;
        if (k < 2) continue;
        if (model.max_layers_per_stage > 0 && k > model.max_layers_per_stage) continue;
        layers = balance_layers(k, p);
      }
      if (p == 1 && model.max_layers_per_stage > 0 &&
          model.num_layers > model.max_layers_per_stage) {
        continue;
      }
      const int d = rest / p;
      const long denom = static_cast<long>(d) * micro_batch;
      if (global_batch % denom != 0) continue;
      const long m = global_batch / denom;
      if (m < 1 || m > static_cast<long>(1) << 30) continue;
      ParallelPlan plan;
      plan.t = t;
      plan.p = p;
      plan.d = d;
      plan.m = static_cast<int>(m);
      plan.layers_per_stage = std::move(layers);
      plan.cross_node_tensor = cross_node;
      plan.bubble = bubble_ratio(p, plan.m);
      plans.push_back(std::move(plan));
    }
  }
  std::sort(plans.begin(), plans.end(), [](const ParallelPlan& a, const ParallelPlan& b) {
    if (a.bubble != b.bubble) return a.bubble < b.bubble;
    if (a.cross_node_tensor != b.cross_node_tensor) return !a.cross_node_tensor;
    if (a.d != b.d) return a.d > b.d;
    if (a.t != b.t) return a.t < b.t;
    return a.p < b.p;
  });
  return plans;
}

const char* to_string(PipelinePolicy policy) {
  switch (policy) {
    case PipelinePolicy::kNaive:
      return "naive";
    case PipelinePolicy::kGPipe:
      return "gpipe";
    default:
      return "pipedream-flush";
  }
}

PipelinePolicy pipeline_policy_from(const std::string& name) {
  if (name == "naive") return PipelinePolicy::kNaive;
  if (name == "gpipe") return PipelinePolicy::kGPipe;
  if (name == "pipedream-flush" || name == "1f1b") return PipelinePolicy::kPipeDreamFlush;
  throw ContractError(kModule, "unknown pipeline policy '" + name + "'");
}

namespace {

struct WorkItem {
  char phase;  // 'F' or 'B'
  int micro_batch;
};

// The per-stage issue order fully determines each policy; timing then follows
// from the dependency rules alone.
std::vector<WorkItem> stage_order(PipelinePolicy policy, int stage, int stages, int m) {
  std::vector<WorkItem> order;
  switch (policy) {
    case PipelinePolicy::kNaive:
      for (int i = 0; i < m; ++i) {
        order.push_back({'F', i});
        order.push_back({'B', i});
      }
      break;
    case PipelinePolicy::kGPipe:
      for (int i = 0; i < m; ++i) order.push_back({'F', i});
      for (int i = 0; i < m; ++i) order.push_back({'B', i});
      break;
    case PipelinePolicy::kPipeDreamFlush: {
      const int warmup = std::min(m, stages - stage);
      int next_f = 0, next_b = 0;
      for (; next_f < warmup; ++next_f) order.push_back({'F', next_f});
      while (next_f < m || next_b < m) {
        if (next_b < m) order.push_back({'B', next_b++});
        if (next_f < m) order.push_back({'F', next_f++});
      }
      break;
    }
  }
  return order;
}

}  // namespace

PipelineSchedule simulate_schedule(int stages, int micro_batches, const ClusterSpec& cluster,
                                   PipelinePolicy policy) {
  cluster.validate();
  if (stages < 1 || micro_batches < 1) {
    throw ContractError(kModule, "simulate_schedule requires stages >= 1 and micro-batches >= 1");
  }
  const int p = stages, m = micro_batches;
  const Real tf = cluster.t_f, tb = cluster.t_b;

  std::vector<std::vector<WorkItem>> orders;
  for (int s = 0; s < p; ++s) orders.push_back(stage_order(policy, s, p, m));

  const Real unknown = -1.0;
  std::vector<std::vector<Real>> fend(static_cast<size_t>(m), std::vector<Real>(p, unknown));
  std::vector<std::vector<Real>> bend(static_cast<size_t>(m), std::vector<Real>(p, unknown));
  std::vector<Real> stage_free(static_cast<size_t>(p), 0.0);
  std::vector<size_t> cursor(static_cast<size_t>(p), 0);

  PipelineSchedule schedule;
  schedule.stages = p;
  schedule.micro_batches = m;
  schedule.t_f = tf;
  schedule.t_b = tb;

  size_t remaining = 0;
  for (const auto& order : orders) remaining += order.size();
  while (remaining > 0) {
    bool advanced = false;
    for (int s = 0; s < p; ++s) {
      while (cursor[static_cast<size_t>(s)] < orders[static_cast<size_t>(s)].size()) {
        const WorkItem item = orders[static_cast<size_t>(s)][cursor[static_cast<size_t>(s)]];
        const int i = item.micro_batch;
        Real dep = 0.0;
        if (item.phase == 'F') {
          if (s > 0) {
            dep = fend[static_cast<size_t>(i)][static_cast<size_t>(s - 1)];
            if (dep == unknown) break;
          }
        } else {
          const Real own_f = fend[static_cast<size_t>(i)][static_cast<size_t>(s)];
          if (own_f == unknown) break;
          dep = own_f;
          if (s < p - 1) {
            const Real downstream = bend[static_cast<size_t>(i)][static_cast<size_t>(s + 1)];
            if (downstream == unknown) break;
            dep = std::max(dep, downstream);
          }
        }
        const Real start = std::max(stage_free[static_cast<size_t>(s)], dep);
        const Real end = start + (item.phase == 'F' ? tf : tb);
        schedule.events.push_back({s, i, item.phase, start, end});
        if (item.phase == 'F') {
          fend[static_cast<size_t>(i)][static_cast<size_t>(s)] = end;
        } else {
          bend[static_cast<size_t>(i)][static_cast<size_t>(s)] = end;
        }
        stage_free[static_cast<size_t>(s)] = end;
        ++cursor[static_cast<size_t>(s)];
        --remaining;
        advanced = true;
      }
    }
    if (!advanced) {
      throw ContractError(kModule, "schedule deadlocked; inconsistent issue order");
    }
  }

  Real makespan = 0.0;
  for (const ScheduleEvent& e : schedule.events) makespan = std::max(makespan, e.end);
  schedule.makespan = makespan;
  for (int s = 0; s < p; ++s) {
    schedule.events.push_back({s, -1, 'U', makespan, makespan});  // flush barrier
  }

  Real busy = 0.0;
  for (const ScheduleEvent& e : schedule.events) busy += e.end - e.start;
  schedule.bubble_fraction = (static_cast<Real>(p) * makespan - busy) /
                             (static_cast<Real>(p) * makespan);

  // Forward activations alive per stage: allocated when F starts, released
  // when the matching B ends; releases at an instant precede allocations.
  schedule.peak_inflight.assign(static_cast<size_t>(p), 0);
  for (int s = 0; s < p; ++s) {
    struct Edge {
      Real time;
      int delta;
    };
    std::vector<Edge> edges;
    for (const ScheduleEvent& e : schedule.events) {
      if (e.stage != s || e.micro_batch < 0) continue;
      if (e.phase == 'F') edges.push_back({e.start, +1});
      if (e.phase == 'B') edges.push_back({e.end, -1});
    }
    std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
      if (a.time != b.time) return a.time < b.time;
      return a.delta < b.delta;
    });
    int alive = 0, peak = 0;
    for (const Edge& e : edges) {
      alive += e.delta;
      peak = std::max(peak, alive);
    }
    schedule.peak_inflight[static_cast<size_t>(s)] = peak;
  }
  return schedule;
}

void validate_schedule(const PipelineSchedule& schedule) {
  const int p = schedule.stages, m = schedule.micro_batches;
  std::vector<std::vector<const ScheduleEvent*>> by_stage(static_cast<size_t>(p));
  std::vector<std::vector<Real>> fend(static_cast<size_t>(m), std::vector<Real>(p, -1.0));
  std::vector<std::vector<Real>> bstart(static_cast<size_t>(m), std::vector<Real>(p, -1.0));
  std::vector<std::vector<Real>> bend(static_cast<size_t>(m), std::vector<Real>(p, -1.0));
  std::vector<std::vector<Real>> fstart(static_cast<size_t>(m), std::vector<Real>(p, -1.0));
  for (const ScheduleEvent& e : schedule.events) {
    if (e.stage < 0 || e.stage >= p) throw ContractError(kModule, "event stage out of range");
    if (e.micro_batch == -1) continue;
    if (e.micro_batch < 0 || e.micro_batch >= m) {
      throw ContractError(kModule, "event micro-batch out of range");
    }
    by_stage[static_cast<size_t>(e.stage)].push_back(&e);
    auto& fs = e.phase == 'F' ? fstart : bstart;
    auto& fe = e.phase == 'F' ? fend : bend;
    fs[static_cast<size_t>(e.micro_batch)][static_cast<size_t>(e.stage)] = e.start;
    fe[static_cast<size_t>(e.micro_batch)][static_cast<size_t>(e.stage)] = e.end;
  }
  for (auto& events : by_stage) {
    std::sort(events.begin(), events.end(),
              [](const ScheduleEvent* a, const ScheduleEvent* b) { return a->start < b->start; });
    for (size_t i = 1; i < events.size(); ++i) {
      if (events[i]->start < events[i - 1]->end) {
        throw ContractError(kModule, "overlapping events on one stage");
      }
    }
  }
  for (int i = 0; i < m; ++i) {
    for (int s = 0; s < p; ++s) {
      if (fend[static_cast<size_t>(i)][static_cast<size_t>(s)] < 0.0 ||
          bend[static_cast<size_t>(i)][static_cast<size_t>(s)] < 0.0) {
        throw ContractError(kModule, "missing forward or backward event");
      }
      if (s > 0 && fstart[static_cast<size_t>(i)][static_cast<size_t>(s)] <
                       fend[static_cast<size_t>(i)][static_cast<size_t>(s - 1)]) {
        throw ContractError(kModule, "forward started before the upstream stage finished");
      }
      if (bstart[static_cast<size_t>(i)][static_cast<size_t>(s)] <
          fend[static_cast<size_t>(i)][static_cast<size_t>(s)]) {
        throw ContractError(kModule, "backward started before its forward finished");
      }
      if (s < p - 1 && bstart[static_cast<size_t>(i)][static_cast<size_t>(s)] <
                           bend[static_cast<size_t>(i)][static_cast<size_t>(s + 1)]) {
        throw ContractError(kModule, "backward started before the downstream backward finished");
      }
    }
  }
}

StageMemory memory_estimate(const ParallelPlan& plan, const ModelShape& model,
                            PipelinePolicy policy) {
  StageMemory memory;
  const int p = plan.p;
  if (static_cast<int>(plan.layers_per_stage.size()) != p) {
    throw ContractError(kModule, "plan layer map does not match stage count");
  }
  for (int s = 0; s < p; ++s) {
    const Real layers = static_cast<Real>(plan.layers_per_stage[static_cast<size_t>(s)]);
    Real params = layers * model.layer_params;
    if (s == 0 || s == p - 1) params += model.embedding_params;  // word embeddings at both ends
    int inflight = 1;
    switch (policy) {
      case PipelinePolicy::kNaive:
        inflight = 1;
        break;
      case PipelinePolicy::kGPipe:
        inflight = plan.m;
        break;
      case PipelinePolicy::kPipeDreamFlush:
        inflight = std::min(plan.m, p - s);
        break;
    }
    memory.parameter_count.push_back(params);
    memory.activation_count.push_back(static_cast<Real>(inflight) * layers *
                                      model.activation_per_layer);
  }
  return memory;
}

Real carbon_estimate(Real energy_mwh, Real grid_kg_per_kwh) {
  if (energy_mwh < 0.0 || grid_kg_per_kwh < 0.0) {
    throw ContractError(kModule, "carbon_estimate requires nonnegative inputs");
  }
  // MWh -> kWh is *1000, kg -> metric tons is /1000.
  return energy_mwh * 1000.0 * grid_kg_per_kwh / 1000.0;
}

std::string schedule_trace_table(const PipelineSchedule& schedule) {
  std::ostringstream os;
  os << "stage\tphase\tmb\tstart\tend\n";
  for (const ScheduleEvent& e : schedule.events) {
    os << e.stage << "\t" << e.phase << "\t" << e.micro_batch << "\t" << format_real(e.start)
       << "\t" << format_real(e.end) << "\n";
  }
  return os.str();
}

std::string plan_table(const std::vector<ParallelPlan>& plans) {
  std::ostringstream os;
  os << "rank\tt\tp\td\tm\tbubble\tcross_node_t\tlayers_per_stage\n";
  for (size_t i = 0; i < plans.size(); ++i) {
    const ParallelPlan& plan = plans[i];
    os << i << "\t" << plan.t << "\t" << plan.p << "\t" << plan.d << "\t" << plan.m << "\t"
       << format_real(plan.bubble) << "\t" << (plan.cross_node_tensor ? 1 : 0) << "\t";
    for (size_t s = 0; s < plan.layers_per_stage.size(); ++s) {
      if (s) os << ",";
      os << plan.layers_per_stage[s];
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace glmlab
