// glmlab command-line harness: corruption sampling, toy training, weight
// quantization and diagnostics, parallel planning and pipeline simulation.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "glmlab/corruption.hpp"
#include "glmlab/model.hpp"
#include "glmlab/pipeplan.hpp"
#include "glmlab/quant.hpp"
#include "glmlab/tensor_io.hpp"
#include "glmlab/trainer.hpp"

namespace fs = std::filesystem;
using namespace glmlab;

namespace {

std::string fmt(Real v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct EmitFilter {
  std::vector<std::string> selected;  // empty = everything

  bool wants(const std::string& artifact) const {
    if (selected.empty()) return true;
    for (const std::string& s : selected) {
      if (s == "all" || s == artifact) return true;
    }
    return false;
  }
};

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << content;
  if (!out) throw ContractError("climodule", "cannot write " + path.string());
}

// Effective configuration (defaults < config file < command line) is part of
// the artifact so runs can be audited and replayed.
void emit_effective_config(CLI::App* sub, const fs::path& out_dir) {
  const std::string ini = sub->config_to_str(true, false);
  write_file(out_dir / "effective_config.ini", ini);
  std::cout << "[" << sub->get_name() << "] effective configuration\n" << ini;
}

std::uint64_t resolve_seed(const CLI::Option* opt, std::uint64_t value) {
  if (opt->count() > 0) return value;
  if (const char* env = std::getenv("GLMLAB_SEED")) {
    return std::strtoull(env, nullptr, 10);
  }
  throw CLI::RequiredError("--seed (or the GLMLAB_SEED environment variable)");
}

// --- sample-corpus -----------------------------------------------------------

struct SampleArgs {
  std::string corpus;
  std::string out = "out-sample-corpus";
  std::uint64_t seed = 0;
  int samples = 100;
  CorruptionConfig cfg;
  EmitFilter emit;
};

void add_corruption_flags(CLI::App* sub, CorruptionConfig& cfg) {
  sub->add_option("--mask-prob", cfg.mask_prob, "Masked token fraction under [MASK]")
      ->capture_default_str();
  sub->add_option("--avg-block-length", cfg.average_block_length, "Poisson mean span length")
      ->capture_default_str();
  sub->add_option("--gmask-prob", cfg.gmask_prob, "Fraction of [gMASK] samples")
      ->capture_default_str();
  sub->add_option("--min-gmask-ratio", cfg.min_gmask_ratio, "Minimum masked suffix fraction")
      ->capture_default_str();
  sub->add_option("--aggregated", cfg.aggregated_samples_per_sequence,
                  "Samples packed per sequence")
      ->capture_default_str();
  sub->add_option("--short-window", cfg.short_window, "Per-sample window under [MASK]")
      ->capture_default_str();
  sub->add_option("--seq-length", cfg.seq_length, "Full packed window")->capture_default_str();
  sub->add_option("--short-seq-prob", cfg.short_seq_prob, "Shorter-window switch probability")
      ->capture_default_str();
  sub->add_option("--single-span-prob", cfg.single_span_prob,
                  "Single-span switch probability")
      ->capture_default_str();
}

void run_sample_corpus(const SampleArgs& args, CLI::App* sub) {
  auto docs = SampleStream::load_corpus(args.corpus);
  SampleStream stream(docs, args.cfg, Rng(args.seed));

  std::string records;
  long gmask = 0;
  long masked_tokens = 0, original_tokens = 0, spans = 0;
  for (int i = 0; i < args.samples; ++i) {
    CorruptedSample sample = stream.next();
    records += sample_record(sample) + "\n";
    if (sample.kind == SampleKind::kGMask) ++gmask;
    masked_tokens += sample.spans.total_masked();
    spans += static_cast<long>(sample.spans.spans.size());
    original_tokens += static_cast<long>(sample.original.size());
  }

  fs::create_directories(args.out);
  emit_effective_config(sub, args.out);
  if (args.emit.wants("records")) write_file(fs::path(args.out) / "samples.txt", records);
  if (args.emit.wants("stats")) {
    std::string stats;
    stats += "samples=" + std::to_string(args.samples) + "\n";
    stats += "gmask_share=" + fmt(static_cast<Real>(gmask) / args.samples) + "\n";
    if (original_tokens > 0) {
      stats += "masked_fraction=" +
               fmt(static_cast<Real>(masked_tokens) / static_cast<Real>(original_tokens)) + "\n";
    }
    if (spans > 0) {
      stats += "mean_span_length=" +
               fmt(static_cast<Real>(masked_tokens) / static_cast<Real>(spans)) + "\n";
    }
    write_file(fs::path(args.out) / "stats.txt", stats);
  }
  std::cout << "wrote " << args.samples << " samples to " << args.out << "\n";
}

// --- train-toy -----------------------------------------------------------------

struct TrainArgs {
  std::string corpus;
  std::string out = "out-train-toy";
  std::uint64_t seed = 0;
  Index steps = 200;
  GLMConfig model;
  CorruptionConfig corruption;
  TrainConfig train;
  std::string precision = "wide";
  int checkpoint_interval = 0;
  EmitFilter emit;
};

TrainArgs default_train_args() {
  TrainArgs args;
  // Desk-scale defaults: the full-size schedule shape scaled to a 200-step run.
  args.model.num_layers = 2;
  args.model.hidden = 64;
  args.model.num_heads = 4;
  args.model.vocab = 256;
  args.model.dropout = 0.1;
  args.corruption.aggregated_samples_per_sequence = 4;
  args.corruption.short_window = 16;
  args.corruption.seq_length = 64;
  args.train.peak_lr = 3e-3;
  args.train.min_lr = 3e-4;
  args.train.start_lr = 3e-5;
  args.train.lr_warmup_fraction = 0.05;
  args.train.batch_start = 4;
  args.train.batch_end = 8;
  args.train.batch_increment = 2;
  args.train.batch_ramp_fraction = 0.25;
  return args;
}

void run_train_toy(TrainArgs& args, CLI::App* sub) {
  args.model.validate();
  args.corruption.validate();
  args.train.validate();

  PrecisionPolicy policy;
  if (args.precision == "half") {
    policy.storage = PrecisionPolicy::Storage::kHalfEmulated;
  } else if (args.precision != "wide") {
    throw ContractError("climodule", "precision must be 'wide' or 'half'");
  }

  auto docs = SampleStream::load_corpus(args.corpus);
  Rng init_rng = Rng(args.seed).fork(0);
  ModelParams model = init_parameters(args.model, init_rng);

  TrainOptions opts;
  opts.steps = args.steps;
  opts.seed = args.seed;
  opts.policy = policy;
  opts.checkpoint_interval = args.checkpoint_interval;
  opts.checkpoint_dir = fs::path(args.out) / "checkpoints";

  TrainResult result = train(docs, model, args.train, args.corruption, opts);

  fs::create_directories(args.out);
  emit_effective_config(sub, args.out);
  if (args.emit.wants("metrics")) {
    std::string metrics;
    for (const std::string& line : result.lines) metrics += line + "\n";
    write_file(fs::path(args.out) / "metrics.txt", metrics);
  }
  if (args.emit.wants("checkpoint")) {
    save_checkpoint(fs::path(args.out) / "checkpoints" / "final", model);
  }
  std::cout << "step0 " << result.lines.front() << "\n";
  std::cout << "final " << result.lines.back() << "\n";
}

// --- quantize --------------------------------------------------------------------

struct QuantizeArgs {
  std::string checkpoint;
  std::string out = "out-quantize";
  int bits = 8;
  std::string scheme = "absmax";
  std::string axis = "row";
  EmitFilter emit;
};

void run_quantize(const QuantizeArgs& args, CLI::App* sub) {
  ModelParams params = load_checkpoint(args.checkpoint);
  QuantPolicy policy;
  policy.bits = args.bits;
  policy.scheme = quant_scheme_from(args.scheme);
  policy.axis = group_axis_from(args.axis);
  QuantizedModel qm = quantize_model(params, policy);

  fs::create_directories(args.out);
  emit_effective_config(sub, args.out);
  if (args.emit.wants("model")) {
    save_quantized_model(fs::path(args.out) / "quantized", qm);
  }
  if (args.emit.wants("report")) {
    std::string report = "name\tbits\tscheme\taxis\trows\tcols\tgroups\tmse\tmax_err\tpayload_bytes\n";
    ModelParams rebuilt = dequantize_model(qm);
    auto orig = params.parameters();
    auto back = rebuilt.parameters();
    for (size_t l = 0; l < qm.layers.size(); ++l) {
      const std::string prefix = "layer" + std::to_string(l) + ".";
      const QuantizedLayer& layer = qm.layers[l];
      for (const auto& [suffix, q] :
           std::initializer_list<std::pair<const char*, const QuantizedMatrix*>>{
               {"qkv", &layer.qkv},
               {"out_proj", &layer.out_proj},
               {"ffn_w1", &layer.ffn_w1},
               {"ffn_v", &layer.ffn_v},
               {"ffn_w2", &layer.ffn_w2}}) {
        const std::string name = prefix + suffix;
        Real err = 0.0, worst = 0.0;
        for (size_t i = 0; i < orig.size(); ++i) {
          if (orig[i].name != name) continue;
          const ArrX diff = (orig[i].tensor.values() - back[i].tensor.values()).abs();
          err = diff.square().mean();
          worst = diff.maxCoeff();
        }
        report += name + "\t" + std::to_string(q->bits) + "\t" + to_string(q->scheme) + "\t" +
                  to_string(q->axis) + "\t" + std::to_string(q->rows) + "\t" +
                  std::to_string(q->cols) + "\t" + std::to_string(q->group_count()) + "\t" +
                  fmt(err) + "\t" + fmt(worst) + "\t" + std::to_string(q->payload_bytes()) + "\n";
      }
    }
    const MemoryAccounting acc = memory_accounting(qm);
    report += "# linear elements " + std::to_string(acc.element_count) + ", quant payload " +
              std::to_string(acc.quant_payload_bytes) + " B, scales " +
              std::to_string(acc.scale_bytes) + " B, half baseline " +
              std::to_string(acc.half_baseline_bytes) + " B\n";
    write_file(fs::path(args.out) / "report.txt", report);
    std::cout << report;
  }
}

// --- analyze-weights ---------------------------------------------------------------

struct AnalyzeArgs {
  std::string checkpoint;
  std::string tensor;
  std::string out = "out-analyze-weights";
  int bins = 64;
  Real outlier_k = 6.0;
  EmitFilter emit;
};

void run_analyze(const AnalyzeArgs& args, CLI::App* sub) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  if (!args.tensor.empty()) {
    tensors.emplace_back(fs::path(args.tensor).stem().string(), read_tensor(args.tensor));
  } else if (!args.checkpoint.empty()) {
    ModelParams params = load_checkpoint(args.checkpoint);
    for (const ParamRef& ref : params.parameters()) {
      if (ref.tensor.shape().size() == 2) tensors.emplace_back(ref.name, ref.tensor);
    }
  } else {
    throw CLI::RequiredError("--checkpoint or --tensor");
  }

  fs::create_directories(args.out);
  emit_effective_config(sub, args.out);
  std::string moments = "name\tcount\tmin\tmax\tmean\tvariance\tskewness\tkurtosis\toutlier_share\n";
  for (const auto& [name, tensor] : tensors) {
    DistributionReport report =
        weight_distribution_report(tensor.matrix(), args.bins, args.outlier_k);
    moments += name + "\t" + std::to_string(report.count) + "\t" + fmt(report.min) + "\t" +
               fmt(report.max) + "\t" + fmt(report.mean) + "\t" + fmt(report.variance) + "\t" +
               fmt(report.skewness) + "\t" + fmt(report.kurtosis) + "\t" +
               fmt(report.outlier_share) + "\n";
    if (args.emit.wants("histograms")) {
      write_file(fs::path(args.out) / (name + ".hist.tsv"), histogram_table(report));
    }
  }
  if (args.emit.wants("moments")) {
    write_file(fs::path(args.out) / "moments.tsv", moments);
  }
  std::cout << moments;
}

// --- plan-parallel -------------------------------------------------------------------

struct PlanArgs {
  ClusterSpec cluster;
  ModelShape model;
  long global_batch = 4224;
  int micro_batch = 1;
  int top = 10;
  std::string out;
};

void run_plan(const PlanArgs& args, CLI::App* sub) {
  auto plans = enumerate_plans(args.cluster, args.model, args.global_batch, args.micro_batch);
  if (plans.empty()) {
    std::cout << "no feasible plan: check divisibility of GPUs, batch, and layer balance\n";
    throw ContractError("pipeplan", "no feasible plan for the given cluster and batch");
  }
  std::vector<ParallelPlan> shown(plans.begin(),
                                  plans.begin() + std::min<size_t>(plans.size(),
                                                                   static_cast<size_t>(args.top)));
  const std::string table = plan_table(shown);
  std::cout << table;
  const ParallelPlan& top = plans.front();
  char line[160];
  std::snprintf(line, sizeof(line), "top plan: t=%d p=%d d=%d m=%d bubble=%.1f%%\n", top.t, top.p,
                top.d, top.m, 100.0 * top.bubble);
  std::cout << line;
  if (!args.out.empty()) {
    fs::create_directories(args.out);
    emit_effective_config(sub, args.out);
    write_file(fs::path(args.out) / "plans.tsv", plan_table(plans));
  }
}

// --- simulate-pipeline ------------------------------------------------------------------

struct SimArgs {
  int stages = 8;
  int micro_batches = 16;
  std::string policy = "pipedream-flush";
  ClusterSpec cluster;
  std::string out;
};

void run_simulate(const SimArgs& args, CLI::App* sub) {
  PipelineSchedule schedule =
      simulate_schedule(args.stages, args.micro_batches, args.cluster,
                        pipeline_policy_from(args.policy));
  validate_schedule(schedule);
  std::cout << "policy=" << args.policy << " stages=" << schedule.stages
            << " micro_batches=" << schedule.micro_batches << "\n";
  std::cout << "makespan=" << fmt(schedule.makespan)
            << " bubble_fraction=" << fmt(schedule.bubble_fraction) << "\n";
  std::cout << "peak_inflight=";
  for (size_t s = 0; s < schedule.peak_inflight.size(); ++s) {
    if (s) std::cout << ",";
    std::cout << schedule.peak_inflight[s];
  }
  std::cout << "\n";
  if (!args.out.empty()) {
    fs::create_directories(args.out);
    emit_effective_config(sub, args.out);
    write_file(fs::path(args.out) / "trace.tsv", schedule_trace_table(schedule));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"glmlab: a desk-scale laboratory for blank-infilling language-model training,\n"
               "quantization, and pipeline planning"};
  app.require_subcommand(1);

  // sample-corpus
  SampleArgs sample_args;
  CLI::App* sample = app.add_subcommand("sample-corpus", "Corrupt a corpus into training samples");
  sample->set_config("--config");
  sample->add_option("--corpus", sample_args.corpus, "Corpus file, one document per line")
      ->required();
  sample->add_option("--out", sample_args.out, "Output directory")->capture_default_str();
  CLI::Option* sample_seed = sample->add_option("--seed", sample_args.seed, "Generator seed");
  sample->add_option("--samples", sample_args.samples, "Number of samples")
      ->capture_default_str();
  sample->add_option("--emit", sample_args.emit.selected,
                     "Artifacts to write (records, stats; default all)")
      ->delimiter(',');
  add_corruption_flags(sample, sample_args.cfg);
  sample->callback([&]() {
    sample_args.seed = resolve_seed(sample_seed, sample_args.seed);
    sample_args.cfg.validate();
    run_sample_corpus(sample_args, sample);
  });

  // train-toy
  TrainArgs train_args = default_train_args();
  CLI::App* traincmd = app.add_subcommand("train-toy", "Train a toy model on a corpus");
  traincmd->set_config("--config");
  traincmd->add_option("--corpus", train_args.corpus, "Corpus file")->required();
  traincmd->add_option("--out", train_args.out, "Output directory")->capture_default_str();
  CLI::Option* train_seed = traincmd->add_option("--seed", train_args.seed, "Run seed");
  traincmd->add_option("--steps", train_args.steps, "Training steps")->capture_default_str();
  traincmd->add_option("--layers", train_args.model.num_layers, "Transformer layers")
      ->capture_default_str();
  traincmd->add_option("--hidden", train_args.model.hidden, "Hidden width")
      ->capture_default_str();
  traincmd->add_option("--heads", train_args.model.num_heads, "Attention heads")
      ->capture_default_str();
  traincmd->add_option("--ffn-hidden", train_args.model.ffn_hidden,
                       "Feed-forward width (0 = 8/3 sizing)")
      ->capture_default_str();
  traincmd->add_option("--vocab", train_args.model.vocab, "Vocabulary size")
      ->capture_default_str();
  traincmd->add_option("--dropout", train_args.model.dropout, "Dropout rate")
      ->capture_default_str();
  traincmd
      ->add_option("--variant", [&train_args](const std::vector<std::string>& vals) {
        if (vals.empty()) return false;
        if (vals[0] == "unidirectional") {
          train_args.model.variant = AttentionVariant::kUnidirectional;
          return true;
        }
        if (vals[0] == "bidirectional-glm") {
          train_args.model.variant = AttentionVariant::kBidirectionalGlm;
          return true;
        }
        return false;
      },
      "Attention variant: bidirectional-glm or unidirectional")
      ->expected(1);
  add_corruption_flags(traincmd, train_args.corruption);
  traincmd->add_option("--peak-lr", train_args.train.peak_lr, "Peak learning rate")
      ->capture_default_str();
  traincmd->add_option("--start-lr", train_args.train.start_lr, "Warmup start learning rate")
      ->capture_default_str();
  traincmd->add_option("--min-lr", train_args.train.min_lr, "Cosine floor (peak/10)")
      ->capture_default_str();
  traincmd->add_option("--warmup-fraction", train_args.train.lr_warmup_fraction,
                       "Warmup fraction of the run")
      ->capture_default_str();
  traincmd->add_option("--batch-start", train_args.train.batch_start, "Initial batch size")
      ->capture_default_str();
  traincmd->add_option("--batch-end", train_args.train.batch_end, "Final batch size")
      ->capture_default_str();
  traincmd->add_option("--batch-increment", train_args.train.batch_increment, "Ramp increment")
      ->capture_default_str();
  traincmd->add_option("--batch-ramp-fraction", train_args.train.batch_ramp_fraction,
                       "Ramp fraction of total samples")
      ->capture_default_str();
  traincmd->add_option("--weight-decay", train_args.train.weight_decay, "Decoupled weight decay")
      ->capture_default_str();
  traincmd->add_option("--clip-norm", train_args.train.clip_norm, "Gradient clipping value")
      ->capture_default_str();
  traincmd->add_option("--egs-alpha", train_args.train.egs_alpha,
                       "Embedding gradient shrink factor")
      ->capture_default_str();
  traincmd->add_option("--precision", train_args.precision, "wide or half")
      ->capture_default_str();
  traincmd->add_option("--loss-scale-init", train_args.train.loss_scale.initial,
                       "Initial loss scale (half mode)")
      ->capture_default_str();
  traincmd->add_option("--loss-scale-window", train_args.train.loss_scale.window,
                       "Clean steps before the scale doubles")
      ->capture_default_str();
  traincmd->add_option("--loss-scale-hysteresis", train_args.train.loss_scale.hysteresis,
                       "Tolerated overflows before halving")
      ->capture_default_str();
  traincmd->add_option("--loss-scale-min", train_args.train.loss_scale.min_scale,
                       "Loss scale floor")
      ->capture_default_str();
  traincmd->add_option("--checkpoint-interval", train_args.checkpoint_interval,
                       "Checkpoint every N steps (0 = final only)")
      ->capture_default_str();
  traincmd->add_option("--emit", train_args.emit.selected,
                       "Artifacts to write (metrics, checkpoint; default all)")
      ->delimiter(',');
  traincmd->callback([&]() {
    train_args.seed = resolve_seed(train_seed, train_args.seed);
    run_train_toy(train_args, traincmd);
  });

  // quantize
  QuantizeArgs quant_args;
  CLI::App* quant = app.add_subcommand("quantize", "Post-training weight quantization");
  quant->set_config("--config");
  quant->add_option("--checkpoint", quant_args.checkpoint, "Model checkpoint directory")
      ->required();
  quant->add_option("--out", quant_args.out, "Output directory")->capture_default_str();
  quant->add_option("--bits", quant_args.bits, "4 or 8")->capture_default_str();
  quant->add_option("--scheme", quant_args.scheme, "absmax or zeropoint")->capture_default_str();
  quant->add_option("--axis", quant_args.axis, "row, column, or whole")->capture_default_str();
  quant->add_option("--emit", quant_args.emit.selected,
                    "Artifacts to write (model, report; default all)")
      ->delimiter(',');
  quant->callback([&]() { run_quantize(quant_args, quant); });

  // analyze-weights
  AnalyzeArgs analyze_args;
  CLI::App* analyze = app.add_subcommand("analyze-weights", "Weight distribution diagnostics");
  analyze->set_config("--config");
  analyze->add_option("--checkpoint", analyze_args.checkpoint, "Model checkpoint directory");
  analyze->add_option("--tensor", analyze_args.tensor, "Single GLMT tensor file");
  analyze->add_option("--out", analyze_args.out, "Output directory")->capture_default_str();
  analyze->add_option("--bins", analyze_args.bins, "Histogram bins")->capture_default_str();
  analyze->add_option("--outlier-k", analyze_args.outlier_k,
                      "Outlier threshold in standard deviations")
      ->capture_default_str();
  analyze->add_option("--emit", analyze_args.emit.selected,
                      "Artifacts to write (moments, histograms; default all)")
      ->delimiter(',');
  analyze->callback([&]() { run_analyze(analyze_args, analyze); });

  // plan-parallel
  PlanArgs plan_args;
  CLI::App* plan = app.add_subcommand("plan-parallel", "Enumerate and rank 3D-parallel plans");
  plan->set_config("--config");
  plan->add_option("--nodes", plan_args.cluster.nodes, "Node count")->required();
  plan->add_option("--gpus-per-node", plan_args.cluster.gpus_per_node, "GPUs per node")
      ->required();
  plan->add_option("--global-batch", plan_args.global_batch, "Global batch size")->required();
  plan->add_option("--micro-batch", plan_args.micro_batch, "Micro-batch size")->required();
  plan->add_option("--layers", plan_args.model.num_layers, "Transformer layers")
      ->capture_default_str();
  plan->add_option("--max-layers-per-stage", plan_args.model.max_layers_per_stage,
                   "Memory-derived stage depth cap (0 = unlimited)")
      ->capture_default_str();
  plan->add_option("--max-tp", plan_args.cluster.tensor_parallel_limit,
                   "Widest tensor-parallel split that still scales")
      ->capture_default_str();
  plan->add_option("--gpu-memory", plan_args.cluster.gpu_memory_gb, "GPU memory in GB")
      ->capture_default_str();
  plan->add_option("--top", plan_args.top, "Rows to print")->capture_default_str();
  plan->add_option("--out", plan_args.out, "Optional output directory for the full table");
  plan->callback([&]() { run_plan(plan_args, plan); });

  // simulate-pipeline
  SimArgs sim_args;
  CLI::App* sim = app.add_subcommand("simulate-pipeline", "Simulate a pipeline schedule");
  sim->set_config("--config");
  sim->add_option("--stages", sim_args.stages, "Pipeline stages")->required();
  sim->add_option("--micro-batches", sim_args.micro_batches, "Micro-batches per group")
      ->required();
  sim->add_option("--policy", sim_args.policy, "naive, gpipe, or pipedream-flush")
      ->capture_default_str();
  sim->add_option("--tf", sim_args.cluster.t_f, "Forward time per micro-batch")
      ->capture_default_str();
  sim->add_option("--tb", sim_args.cluster.t_b, "Backward time per micro-batch")
      ->capture_default_str();
  sim->add_option("--out", sim_args.out, "Optional output directory for the trace table");
  sim->callback([&]() { run_simulate(sim_args, sim); });

  // carbon
  Real mwh = 0.0, grid = 0.0;
  CLI::App* carbon = app.add_subcommand("carbon", "Training carbon estimate");
  carbon->add_option("--mwh", mwh, "Energy consumed in MWh")->required();
  carbon->add_option("--grid", grid, "Grid carbon intensity in kg CO2 per kWh")->required();
  carbon->callback([&]() {
    const Real tons = carbon_estimate(mwh, grid);
    char line[96];
    std::snprintf(line, sizeof(line), "%.2f metric tons CO2 (carbon_tons=%.17g)\n", tons, tons);
    std::cout << line;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad flags are a usage error
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "[climodule] " << e.what() << "\n";
    return 1;
  }
  return 0;
}
