#include "glmlab/quant.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "glmlab/tensor_io.hpp"

namespace glmlab {

namespace {

constexpr const char* kModule = "quantlab";

int max_code(int bits) { return (1 << (bits - 1)) - 1; }  // 127 or 7, never -128/-8

void check_bits(int bits) {
  if (bits != 4 && bits != 8) {
    throw ContractError(kModule, "bit width must be 4 or 8, got " + std::to_string(bits));
  }
}

std::int8_t round_code(Real x, int bits) {
  const Real r = std::nearbyint(x);  // round-half-to-even
  const Real cap = static_cast<Real>(max_code(bits));
  return static_cast<std::int8_t>(std::clamp(r, -cap, cap));
}

struct GroupView {
  Index count;  // number of groups
  Index size;   // elements per group
};

GroupView group_view(Index rows, Index cols, GroupAxis axis) {
  switch (axis) {
    case GroupAxis::kRow:
      return {rows, cols};
    case GroupAxis::kColumn:
      return {cols, rows};
    case GroupAxis::kWhole:
      return {1, rows * cols};
  }
  throw ContractError(kModule, "unknown group axis");
}

Real group_entry(const Eigen::Ref<const Mat>& w, GroupAxis axis, Index group, Index k) {
  switch (axis) {
    case GroupAxis::kRow:
      return w(group, k);
    case GroupAxis::kColumn:
      return w(k, group);
    default:
      return w(k / w.cols(), k % w.cols());
  }
}

void check_finite(const Eigen::Ref<const Mat>& w) {
  if (!w.array().isFinite().all()) {
    throw ContractError(kModule, "quantization requires finite inputs");
  }
}

void store_codes(QuantizedMatrix& q, const std::vector<std::int8_t>& codes) {
  if (q.bits == 4) {
    q.payload = pack_int4(codes);
  } else {
    q.payload = codes;
  }
}

}  // namespace

const char* to_string(QuantScheme scheme) {
  return scheme == QuantScheme::kAbsmax ? "absmax" : "zeropoint";
}

const char* to_string(GroupAxis axis) {
  switch (axis) {
    case GroupAxis::kRow:
      return "row";
    case GroupAxis::kColumn:
      return "column";
    default:
      return "whole";
  }
}

QuantScheme quant_scheme_from(const std::string& name) {
  if (name == "absmax") return QuantScheme::kAbsmax;
  if (name == "zeropoint") return QuantScheme::kZeropoint;
  throw ContractError(kModule, "unknown quantization scheme '" + name + "'");
}

GroupAxis group_axis_from(const std::string& name) {
  if (name == "row") return GroupAxis::kRow;
  if (name == "column") return GroupAxis::kColumn;
  if (name == "whole") return GroupAxis::kWhole;
  throw ContractError(kModule, "unknown group axis '" + name + "'");
}

Index QuantizedMatrix::group_count() const { return group_view(rows, cols, axis).count; }
Index QuantizedMatrix::group_size() const { return group_view(rows, cols, axis).size; }

std::vector<std::int8_t> QuantizedMatrix::codes() const {
  if (bits == 4) return unpack_int4(payload, code_count());
  return payload;
}

QuantizedMatrix quantize_absmax(const Eigen::Ref<const Mat>& w, int bits, GroupAxis axis) {
  check_bits(bits);
  check_finite(w);
  QuantizedMatrix q;
  q.bits = bits;
  q.scheme = QuantScheme::kAbsmax;
  q.axis = axis;
  q.rows = w.rows();
  q.cols = w.cols();
  const GroupView view = group_view(q.rows, q.cols, axis);
  const Real cap = static_cast<Real>(max_code(bits));
  std::vector<std::int8_t> codes(static_cast<size_t>(q.code_count()), 0);
  q.scales.assign(static_cast<size_t>(view.count), 0.0);
  for (Index g = 0; g < view.count; ++g) {
    Real absmax = 0.0;
    for (Index k = 0; k < view.size; ++k) {
      absmax = std::max(absmax, std::fabs(group_entry(w, axis, g, k)));
    }
    const Real s = absmax / cap;
    q.scales[static_cast<size_t>(g)] = s;
    if (s == 0.0) continue;  // all-zero group round-trips exactly by convention
    for (Index k = 0; k < view.size; ++k) {
      const Index flat = axis == GroupAxis::kColumn ? k * q.cols + g
                         : axis == GroupAxis::kRow  ? g * q.cols + k
                                                    : k;
      codes[static_cast<size_t>(flat)] = round_code(group_entry(w, axis, g, k) / s, bits);
    }
  }
  store_codes(q, codes);
  return q;
}

QuantizedMatrix quantize_zeropoint(const Eigen::Ref<const Mat>& w, int bits, GroupAxis axis) {
  check_bits(bits);
  check_finite(w);
  QuantizedMatrix q;
  q.bits = bits;
  q.scheme = QuantScheme::kZeropoint;
  q.axis = axis;
  q.rows = w.rows();
  q.cols = w.cols();
  const GroupView view = group_view(q.rows, q.cols, axis);
  std::vector<std::int8_t> codes(static_cast<size_t>(q.code_count()), 0);
  q.scales.assign(static_cast<size_t>(view.count), 0.0);
  q.zero_points.assign(static_cast<size_t>(view.count), 0.0);
  q.constant_group.assign(static_cast<size_t>(view.count), 0);
  for (Index g = 0; g < view.count; ++g) {
    Real lo = group_entry(w, axis, g, 0), hi = lo;
    for (Index k = 1; k < view.size; ++k) {
      const Real v = group_entry(w, axis, g, k);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi == lo) {
      // Constant group: the zero point carries the constant.
      q.zero_points[static_cast<size_t>(g)] = lo;
      q.constant_group[static_cast<size_t>(g)] = 1;
      continue;
    }
    const Real s = (hi - lo) / static_cast<Real>((1 << bits) - 2);
    const Real z = std::nearbyint(lo / s) + static_cast<Real>(max_code(bits));
    q.scales[static_cast<size_t>(g)] = s;
    q.zero_points[static_cast<size_t>(g)] = z;
    for (Index k = 0; k < view.size; ++k) {
      const Index flat = axis == GroupAxis::kColumn ? k * q.cols + g
                         : axis == GroupAxis::kRow  ? g * q.cols + k
                                                    : k;
      codes[static_cast<size_t>(flat)] =
          round_code(std::nearbyint(group_entry(w, axis, g, k) / s) - z, bits);
    }
  }
  store_codes(q, codes);
  return q;
}

Mat dequantize(const QuantizedMatrix& q) {
  if (q.rows < 0 || q.cols < 0 ||
      (q.bits != 4 && q.bits != 8)) {
    throw FormatError(kModule, "corrupt quantized matrix header");
  }
  const Index expected = q.bits == 4 ? (q.code_count() + 1) / 2 : q.code_count();
  if (q.payload_bytes() != expected) {
    throw FormatError(kModule, "payload length " + std::to_string(q.payload_bytes()) +
                                   " does not match " + std::to_string(expected));
  }
  const std::vector<std::int8_t> codes = q.codes();
  const GroupView view = group_view(q.rows, q.cols, q.axis);
  Mat out(q.rows, q.cols);
  for (Index g = 0; g < view.count; ++g) {
    const Real s = q.scales[static_cast<size_t>(g)];
    const Real z = q.scheme == QuantScheme::kZeropoint ? q.zero_points[static_cast<size_t>(g)] : 0.0;
    for (Index k = 0; k < view.size; ++k) {
      const Index flat = q.axis == GroupAxis::kColumn ? k * q.cols + g
                         : q.axis == GroupAxis::kRow  ? g * q.cols + k
                                                      : k;
      const Real code = static_cast<Real>(codes[static_cast<size_t>(flat)]);
      Real value;
      if (q.scheme == QuantScheme::kAbsmax) {
        value = s * code;
      } else if (s == 0.0) {
        value = z;  // constant-group convention
      } else {
        value = s * (code + z);
      }
      out(flat / q.cols, flat % q.cols) = value;
    }
  }
  return out;
}

std::vector<std::int8_t> pack_int4(std::span<const std::int8_t> codes) {
  for (std::int8_t c : codes) {
    if (c < -7 || c > 7) {
      throw ContractError(kModule, "INT4 code " + std::to_string(c) + " outside [-7, 7]");
    }
  }
  std::vector<std::int8_t> packed((codes.size() + 1) / 2, 0);
  for (size_t i = 0; i < codes.size(); ++i) {
    const std::uint8_t nibble = static_cast<std::uint8_t>(codes[i]) & 0x0f;
    if (i % 2 == 0) {
      packed[i / 2] = static_cast<std::int8_t>(nibble);
    } else {
      packed[i / 2] = static_cast<std::int8_t>(static_cast<std::uint8_t>(packed[i / 2]) |
                                               static_cast<std::uint8_t>(nibble << 4));
    }
  }
  return packed;
}

std::vector<std::int8_t> unpack_int4(std::span<const std::int8_t> packed, Index count) {
  if (count < 0 || static_cast<Index>(packed.size()) != (count + 1) / 2) {
    throw FormatError(kModule, "packed INT4 length does not match the recorded count");
  }
  std::vector<std::int8_t> codes(static_cast<size_t>(count), 0);
  for (Index i = 0; i < count; ++i) {
    const std::uint8_t byte = static_cast<std::uint8_t>(packed[static_cast<size_t>(i / 2)]);
    std::uint8_t nibble = (i % 2 == 0) ? (byte & 0x0f) : (byte >> 4);
    int v = nibble;
    if (v >= 8) v -= 16;
    codes[static_cast<size_t>(i)] = static_cast<std::int8_t>(v);
  }
  return codes;
}

// --- whole-model quantization ---------------------------------------------------

namespace {

QuantizedMatrix quantize_with(const Tensor& t, const QuantPolicy& policy) {
  const ConstMatMap m = t.matrix();
  return policy.scheme == QuantScheme::kAbsmax
             ? quantize_absmax(m, policy.bits, policy.axis)
             : quantize_zeropoint(m, policy.bits, policy.axis);
}

Tensor copy_tensor(const Tensor& t, bool requires_grad = false) {
  return Tensor::from_values(t.shape(),
                             std::vector<Real>(t.values().data(), t.values().data() + t.size()),
                             requires_grad);
}

Tensor tensor_from_mat(const Mat& m, std::vector<Index> shape, bool requires_grad) {
  std::vector<Real> values(static_cast<size_t>(m.size()));
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) values[static_cast<size_t>(r * m.cols() + c)] = m(r, c);
  }
  return Tensor::from_values(std::move(shape), std::move(values), requires_grad);
}

}  // namespace

QuantizedModel quantize_model(const ModelParams& params, const QuantPolicy& policy) {
  check_bits(policy.bits);
  QuantizedModel out;
  out.config = params.config;
  out.policy = policy;
  out.embedding = copy_tensor(params.embedding);
  for (const LayerParams& layer : params.layers) {
    QuantizedLayer ql;
    if (policy.quantize_linear) {
      ql.qkv = quantize_with(layer.qkv, policy);
      ql.out_proj = quantize_with(layer.out_proj, policy);
      ql.ffn_w1 = quantize_with(layer.ffn_w1, policy);
      ql.ffn_v = quantize_with(layer.ffn_v, policy);
      ql.ffn_w2 = quantize_with(layer.ffn_w2, policy);
    }
    ql.ln1_gain = copy_tensor(layer.ln1_gain);
    ql.ln1_bias = copy_tensor(layer.ln1_bias);
    ql.ln2_gain = copy_tensor(layer.ln2_gain);
    ql.ln2_bias = copy_tensor(layer.ln2_bias);
    out.layers.push_back(std::move(ql));
  }
  if (!policy.quantize_linear) {
    // Nothing was quantized; keep the raw linears so the model stays
    // byte-identical through a round trip.
    out.raw_layers = params.layers;
  }
  return out;
}

ModelParams dequantize_model(const QuantizedModel& model) {
  ModelParams out;
  out.config = model.config;
  out.embedding = copy_tensor(model.embedding, true);
  for (size_t l = 0; l < model.layers.size(); ++l) {
    const QuantizedLayer& ql = model.layers[l];
    LayerParams layer;
    if (model.policy.quantize_linear) {
      const Index d = model.config.hidden;
      const Index f = model.config.effective_ffn_hidden();
      layer.qkv = tensor_from_mat(dequantize(ql.qkv), {d, 3 * d}, true);
      layer.out_proj = tensor_from_mat(dequantize(ql.out_proj), {d, d}, true);
      layer.ffn_w1 = tensor_from_mat(dequantize(ql.ffn_w1), {d, f}, true);
      layer.ffn_v = tensor_from_mat(dequantize(ql.ffn_v), {d, f}, true);
      layer.ffn_w2 = tensor_from_mat(dequantize(ql.ffn_w2), {f, d}, true);
    } else {
      layer.qkv = copy_tensor(model.raw_layers[l].qkv, true);
      layer.out_proj = copy_tensor(model.raw_layers[l].out_proj, true);
      layer.ffn_w1 = copy_tensor(model.raw_layers[l].ffn_w1, true);
      layer.ffn_v = copy_tensor(model.raw_layers[l].ffn_v, true);
      layer.ffn_w2 = copy_tensor(model.raw_layers[l].ffn_w2, true);
    }
    layer.ln1_gain = copy_tensor(ql.ln1_gain, true);
    layer.ln1_bias = copy_tensor(ql.ln1_bias, true);
    layer.ln2_gain = copy_tensor(ql.ln2_gain, true);
    layer.ln2_bias = copy_tensor(ql.ln2_bias, true);
    out.layers.push_back(std::move(layer));
  }
  return out;
}

MemoryAccounting memory_accounting(const QuantizedModel& model) {
  MemoryAccounting acc;
  for (const QuantizedLayer& layer : model.layers) {
    for (const QuantizedMatrix* q :
         {&layer.qkv, &layer.out_proj, &layer.ffn_w1, &layer.ffn_v, &layer.ffn_w2}) {
      acc.element_count += q->code_count();
      acc.quant_payload_bytes += q->payload_bytes();
      acc.scale_bytes += static_cast<Index>((q->scales.size() + q->zero_points.size()) *
                                            sizeof(Real));
    }
  }
  acc.half_baseline_bytes = 2 * acc.element_count;
  acc.wide_baseline_bytes = 8 * acc.element_count;
  return acc;
}

// --- serialization ---------------------------------------------------------------

namespace {

void write_quantized_matrix(const std::filesystem::path& dir, const std::string& name,
                            const QuantizedMatrix& q, nlohmann::json& entry) {
  entry["name"] = name;
  entry["bits"] = q.bits;
  entry["scheme"] = to_string(q.scheme);
  entry["axis"] = to_string(q.axis);
  entry["rows"] = q.rows;
  entry["cols"] = q.cols;
  write_i8(dir / (name + ".codes.glmt"), q.payload,
           {static_cast<std::uint64_t>(q.payload.size())});
  GlmtTensor scales;
  scales.dtype = GlmtDtype::kF64;
  scales.dims = {static_cast<std::uint64_t>(q.scales.size())};
  scales.f64 = q.scales;
  write_glmt(dir / (name + ".scales.glmt"), scales);
  if (q.scheme == QuantScheme::kZeropoint) {
    GlmtTensor zeros;
    zeros.dtype = GlmtDtype::kF64;
    zeros.dims = {static_cast<std::uint64_t>(q.zero_points.size())};
    zeros.f64 = q.zero_points;
    write_glmt(dir / (name + ".zeros.glmt"), zeros);
    entry["constant_groups"] = q.constant_group;
  }
}

QuantizedMatrix read_quantized_matrix(const std::filesystem::path& dir,
                                      const nlohmann::json& entry) {
  QuantizedMatrix q;
  const std::string name = entry.at("name").get<std::string>();
  q.bits = entry.at("bits").get<int>();
  q.scheme = quant_scheme_from(entry.at("scheme").get<std::string>());
  q.axis = group_axis_from(entry.at("axis").get<std::string>());
  q.rows = entry.at("rows").get<Index>();
  q.cols = entry.at("cols").get<Index>();
  q.payload = read_i8(dir / (name + ".codes.glmt"));
  q.scales = read_glmt(dir / (name + ".scales.glmt")).f64;
  if (q.scheme == QuantScheme::kZeropoint) {
    q.zero_points = read_glmt(dir / (name + ".zeros.glmt")).f64;
    q.constant_group = entry.at("constant_groups").get<std::vector<std::uint8_t>>();
  }
  return q;
}

}  // namespace

void save_quantized_model(const std::filesystem::path& dir, const QuantizedModel& model) {
  if (!model.policy.quantize_linear) {
    throw ContractError(kModule, "refusing to serialize a pass-through quantized model");
  }
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["config"] = {
      {"num_layers", model.config.num_layers},   {"hidden", model.config.hidden},
      {"num_heads", model.config.num_heads},     {"ffn_hidden", model.config.effective_ffn_hidden()},
      {"vocab", model.config.vocab},             {"dropout", model.config.dropout},
      {"init_method_std", model.config.init_method_std},
      {"layernorm_eps", model.config.layernorm_eps},
      {"deepnorm_alpha", model.config.effective_deepnorm_alpha()},
  };
  manifest["policy"] = {{"bits", model.policy.bits},
                        {"scheme", to_string(model.policy.scheme)},
                        {"axis", to_string(model.policy.axis)}};
  write_tensor(dir / "embedding.glmt", model.embedding);
  nlohmann::json matrices = nlohmann::json::array();
  for (size_t l = 0; l < model.layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const QuantizedLayer& layer = model.layers[l];
    for (const auto& [suffix, q] : std::initializer_list<std::pair<const char*, const QuantizedMatrix*>>{
             {"qkv", &layer.qkv},
             {"out_proj", &layer.out_proj},
             {"ffn_w1", &layer.ffn_w1},
             {"ffn_v", &layer.ffn_v},
             {"ffn_w2", &layer.ffn_w2}}) {
      nlohmann::json entry;
      write_quantized_matrix(dir, p + suffix, *q, entry);
      matrices.push_back(entry);
    }
    write_tensor(dir / (p + "ln1_gain.glmt"), layer.ln1_gain);
    write_tensor(dir / (p + "ln1_bias.glmt"), layer.ln1_bias);
    write_tensor(dir / (p + "ln2_gain.glmt"), layer.ln2_gain);
    write_tensor(dir / (p + "ln2_bias.glmt"), layer.ln2_bias);
  }
  manifest["matrices"] = matrices;
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw FormatError(kModule, "cannot write quantized manifest");
}

QuantizedModel load_quantized_model(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError(kModule, "missing manifest.json in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  QuantizedModel model;
  const auto& jc = manifest.at("config");
  model.config.num_layers = jc.at("num_layers").get<int>();
  model.config.hidden = jc.at("hidden").get<int>();
  model.config.num_heads = jc.at("num_heads").get<int>();
  model.config.ffn_hidden = jc.at("ffn_hidden").get<int>();
  model.config.vocab = jc.at("vocab").get<int>();
  model.config.dropout = jc.at("dropout").get<Real>();
  model.config.init_method_std = jc.at("init_method_std").get<Real>();
  model.config.layernorm_eps = jc.at("layernorm_eps").get<Real>();
  model.config.deepnorm_alpha = jc.at("deepnorm_alpha").get<Real>();
  model.policy.bits = manifest.at("policy").at("bits").get<int>();
  model.policy.scheme = quant_scheme_from(manifest.at("policy").at("scheme").get<std::string>());
  model.policy.axis = group_axis_from(manifest.at("policy").at("axis").get<std::string>());
  model.embedding = read_tensor(dir / "embedding.glmt");

  std::map<std::string, nlohmann::json> by_name;
  for (const auto& entry : manifest.at("matrices")) {
    by_name[entry.at("name").get<std::string>()] = entry;
  }
  for (int l = 0; l < model.config.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    QuantizedLayer layer;
    layer.qkv = read_quantized_matrix(dir, by_name.at(p + "qkv"));
    layer.out_proj = read_quantized_matrix(dir, by_name.at(p + "out_proj"));
    layer.ffn_w1 = read_quantized_matrix(dir, by_name.at(p + "ffn_w1"));
    layer.ffn_v = read_quantized_matrix(dir, by_name.at(p + "ffn_v"));
    layer.ffn_w2 = read_quantized_matrix(dir, by_name.at(p + "ffn_w2"));
    layer.ln1_gain = read_tensor(dir / (p + "ln1_gain.glmt"));
    layer.ln1_bias = read_tensor(dir / (p + "ln1_bias.glmt"));
    layer.ln2_gain = read_tensor(dir / (p + "ln2_gain.glmt"));
    layer.ln2_bias = read_tensor(dir / (p + "ln2_bias.glmt"));
    model.layers.push_back(std::move(layer));
  }
  return model;
}

// --- distribution diagnostics ------------------------------------------------------

DistributionReport weight_distribution_report(const Eigen::Ref<const Mat>& w, int bins,
                                              Real outlier_k) {
  if (bins < 1) throw ContractError(kModule, "histogram needs at least one bin");
  DistributionReport report;
  report.count = w.size();
  if (report.count == 0) return report;
  report.min = w.minCoeff();
  report.max = w.maxCoeff();
  report.mean = w.mean();
  Real m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) {
      const Real d = w(r, c) - report.mean;
      m2 += d * d;
      m3 += d * d * d;
      m4 += d * d * d * d;
    }
  }
  const Real n = static_cast<Real>(report.count);
  m2 /= n;
  m3 /= n;
  m4 /= n;
  report.variance = m2;
  report.skewness = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
  report.kurtosis = m2 > 0.0 ? m4 / (m2 * m2) : 0.0;

  const Real sigma = std::sqrt(m2);
  Index outliers = 0;
  if (sigma > 0.0) {
    for (Index r = 0; r < w.rows(); ++r) {
      for (Index c = 0; c < w.cols(); ++c) {
        if (std::fabs(w(r, c) - report.mean) > outlier_k * sigma) ++outliers;
      }
    }
  }
  report.outlier_share = static_cast<Real>(outliers) / n;

  const Real span = report.max - report.min;
  report.bins.resize(static_cast<size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    report.bins[static_cast<size_t>(b)].left = report.min + span * b / bins;
    report.bins[static_cast<size_t>(b)].right = report.min + span * (b + 1) / bins;
  }
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) {
      int b = span > 0.0
                  ? static_cast<int>((w(r, c) - report.min) / span * static_cast<Real>(bins))
                  : 0;
      b = std::clamp(b, 0, bins - 1);
      ++report.bins[static_cast<size_t>(b)].count;
    }
  }
  return report;
}

std::string histogram_table(const DistributionReport& report) {
  std::ostringstream os;
  os.precision(17);
  os << "bin_left\tbin_right\tcount\n";
  for (const HistogramBin& bin : report.bins) {
    os << bin.left << "\t" << bin.right << "\t" << bin.count << "\n";
  }
  return os.str();
}

Real activation_outlier_scan(const Eigen::Ref<const Mat>& activations, Real threshold) {
  if (activations.cols() == 0) return 0.0;
  Index outlier_dims = 0;
  for (Index c = 0; c < activations.cols(); ++c) {
    if (activations.col(c).cwiseAbs().maxCoeff() > threshold) ++outlier_dims;
  }
  return static_cast<Real>(outlier_dims) / static_cast<Real>(activations.cols());
}

}  // namespace glmlab
