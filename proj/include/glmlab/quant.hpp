#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "glmlab/model.hpp"

namespace glmlab {

enum class QuantScheme { kAbsmax, kZeropoint };
enum class GroupAxis { kRow, kColumn, kWhole };

const char* to_string(QuantScheme scheme);
const char* to_string(GroupAxis axis);
QuantScheme quant_scheme_from(const std::string& name);
GroupAxis group_axis_from(const std::string& name);

// Grouped low-bit integer weights. Codes live in the symmetric range
// [-(2^(b-1)-1), 2^(b-1)-1]; INT4 codes are packed two per byte (even index
// in the low nibble). Degenerate groups follow the conventions below:
//   absmax, all-zero group:    s = 0, codes 0, dequantizes to 0
//   zeropoint, constant group: s = 0, codes 0, z carries the constant; flagged
struct QuantizedMatrix {
  int bits = 8;
  QuantScheme scheme = QuantScheme::kAbsmax;
  GroupAxis axis = GroupAxis::kRow;
  Index rows = 0;
  Index cols = 0;
  std::vector<std::int8_t> payload;      // packed (INT4) or plain (INT8) codes
  std::vector<Real> scales;              // one per group
  std::vector<Real> zero_points;         // one per group, zeropoint scheme only
  std::vector<std::uint8_t> constant_group;  // degenerate-group flags (zeropoint)

  Index code_count() const { return rows * cols; }
  Index group_count() const;
  Index group_size() const;
  Index payload_bytes() const { return static_cast<Index>(payload.size()); }
  std::vector<std::int8_t> codes() const;  // unpacked
};

QuantizedMatrix quantize_absmax(const Eigen::Ref<const Mat>& w, int bits, GroupAxis axis);
QuantizedMatrix quantize_zeropoint(const Eigen::Ref<const Mat>& w, int bits, GroupAxis axis);
Mat dequantize(const QuantizedMatrix& q);

// Two INT4 codes per byte; an odd count is padded with a zero code that the
// recorded length strips again on the way out.
std::vector<std::int8_t> pack_int4(std::span<const std::int8_t> codes);
std::vector<std::int8_t> unpack_int4(std::span<const std::int8_t> packed, Index count);

struct QuantPolicy {
  int bits = 8;
  QuantScheme scheme = QuantScheme::kAbsmax;
  GroupAxis axis = GroupAxis::kRow;  // row-wise is the house default
  bool quantize_linear = true;       // false leaves the model byte-identical
};

// Linear-layer weights are quantized; embedding and layer norms pass through
// untouched (the model has no other bias terms).
struct QuantizedLayer {
  QuantizedMatrix qkv, out_proj, ffn_w1, ffn_v, ffn_w2;
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

struct QuantizedModel {
  GLMConfig config;
  QuantPolicy policy;
  Tensor embedding;
  std::vector<QuantizedLayer> layers;
  std::vector<LayerParams> raw_layers;  // kept when the policy excludes quantization
};

QuantizedModel quantize_model(const ModelParams& params, const QuantPolicy& policy);
// Reconstructs wide parameters (dequantizing per matrix) for inference.
ModelParams dequantize_model(const QuantizedModel& model);

void save_quantized_model(const std::filesystem::path& dir, const QuantizedModel& model);
QuantizedModel load_quantized_model(const std::filesystem::path& dir);

// Byte accounting for the linear-layer payloads. The baseline for the
// "saves 75%" arithmetic is the 2-byte half-precision inference format.
struct MemoryAccounting {
  Index element_count = 0;
  Index quant_payload_bytes = 0;
  Index scale_bytes = 0;
  Index half_baseline_bytes = 0;  // 2 bytes per element
  Index wide_baseline_bytes = 0;  // 8 bytes per element
};
MemoryAccounting memory_accounting(const QuantizedModel& model);

struct HistogramBin {
  Real left = 0.0;
  Real right = 0.0;
  Index count = 0;
};

struct DistributionReport {
  std::vector<HistogramBin> bins;
  Real min = 0.0, max = 0.0;
  Real mean = 0.0, variance = 0.0, skewness = 0.0, kurtosis = 0.0;
  Real outlier_share = 0.0;  // fraction beyond outlier_k standard deviations
  Index count = 0;
};

DistributionReport weight_distribution_report(const Eigen::Ref<const Mat>& w, int bins,
                                              Real outlier_k);

// "bin_left\tbin_right\tcount" lines, plot-ready.
std::string histogram_table(const DistributionReport& report);

// Fraction of hidden dimensions (columns) whose peak |activation| exceeds the
// threshold.
Real activation_outlier_scan(const Eigen::Ref<const Mat>& activations, Real threshold);

}  // namespace glmlab
