#pragma once

#include <string>
#include <vector>

#include "glmlab/common.hpp"

namespace glmlab {

struct ClusterSpec {
  int nodes = 1;
  int gpus_per_node = 1;
  Real gpu_memory_gb = 40.0;  // informational
  Real t_f = 1.0;             // per-microbatch forward time (abstract units)
  Real t_b = 1.0;             // per-microbatch backward time
  // Widest tensor-parallel split that still scales on this hardware; the
  // DGX-A100 measurement is 4 (8-way was measured slower there).
  int tensor_parallel_limit = 4;
  // Per-hop latency knob; no anchored default, unused by the v1 closed forms.
  Real per_hop_latency = 0.0;

  int total_gpus() const { return nodes * gpus_per_node; }
  void validate() const;
};

struct ModelShape {
  int num_layers = 70;
  // Deepest stage that fits one GPU (memory-derived); 0 disables the cap.
  int max_layers_per_stage = 9;
  // Optional counts for memory_estimate.
  Real layer_params = 0.0;
  Real embedding_params = 0.0;
  Real activation_per_layer = 0.0;
};

struct ParallelPlan {
  int t = 1;  // tensor
  int p = 1;  // pipeline
  int d = 1;  // data
  int m = 1;  // micro-batches per pipeline group
  std::vector<int> layers_per_stage;
  bool cross_node_tensor = false;
  Real bubble = 0.0;
};

// (p - 1) / (m + p - 1)
Real bubble_ratio(int p, int m);

// (n/t - 1) / (m + n/t - 1) for a model-parallel group of n GPUs; t must
// divide n. Strictly decreasing in t at fixed n, m.
Real bubble_ratio_tp(int n, int t, int m);

// [k-1, k, ..., k, k-1]; both embedding-bearing end stages give up one layer,
// totalling k*p - 2.
std::vector<int> balance_layers(int k, int p);

// All feasible (t, p, d, m) splits of the cluster for the given global batch,
// ranked by bubble ratio, then within-node tensor parallelism before
// cross-node, then larger data parallelism, then smaller t and p.
std::vector<ParallelPlan> enumerate_plans(const ClusterSpec& cluster, const ModelShape& model,
                                          long global_batch, int micro_batch);

enum class PipelinePolicy { kNaive, kGPipe, kPipeDreamFlush };

const char* to_string(PipelinePolicy policy);
PipelinePolicy pipeline_policy_from(const std::string& name);

struct ScheduleEvent {
  int stage = 0;
  int micro_batch = 0;  // -1 for the optimizer barrier
  char phase = 'F';     // F, B, or U
  Real start = 0.0;
  Real end = 0.0;
};

struct PipelineSchedule {
  int stages = 1;
  int micro_batches = 1;
  Real t_f = 1.0, t_b = 1.0;
  std::vector<ScheduleEvent> events;
  Real makespan = 0.0;
  Real bubble_fraction = 0.0;
  std::vector<int> peak_inflight;  // forward activations alive, per stage
};

// Event-accurate timeline for the chosen policy under uniform per-microbatch
// times. The optimizer phase is a zero-duration barrier at flush.
PipelineSchedule simulate_schedule(int stages, int micro_batches, const ClusterSpec& cluster,
                                   PipelinePolicy policy);

// Independent dependency validator: per-stage non-overlap, forward chaining,
// backward chaining, and backward-after-forward. Throws ContractError.
void validate_schedule(const PipelineSchedule& schedule);

struct StageMemory {
  std::vector<Real> parameter_count;
  std::vector<Real> activation_count;
};

// End stages carry the embedding parameters; activations scale with the
// policy's peak in-flight micro-batch count.
StageMemory memory_estimate(const ParallelPlan& plan, const ModelShape& model,
                            PipelinePolicy policy);

// energy [MWh] * grid carbon intensity [kg CO2 / kWh] -> metric tons CO2.
Real carbon_estimate(Real energy_mwh, Real grid_kg_per_kwh);

// "stage\tphase\tmb\tstart\tend" lines, Gantt-ready.
std::string schedule_trace_table(const PipelineSchedule& schedule);
std::string plan_table(const std::vector<ParallelPlan>& plans);

}  // namespace glmlab
