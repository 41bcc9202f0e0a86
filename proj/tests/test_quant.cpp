#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "glmlab/quant.hpp"

using namespace glmlab;

namespace {

Mat random_matrix(Index rows, Index cols, Rng& rng, Real scale = 1.0) {
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = rng.normal(0.0, scale);
  }
  return m;
}

Real mse(const Mat& a, const Mat& b) { return (a - b).array().square().mean(); }

Real max_scale(const QuantizedMatrix& q) {
  Real s = 0.0;
  for (Real v : q.scales) s = std::max(s, v);
  return s;
}

GLMConfig tiny_model_config() {
  GLMConfig cfg;
  cfg.num_layers = 2;
  cfg.hidden = 12;
  cfg.num_heads = 2;
  cfg.vocab = 17;
  return cfg;
}

}  // namespace

TEST_CASE("absmax quantization on the worked row") {
  Mat row(1, 3);
  row << 1.0, -2.0, 0.5;
  QuantizedMatrix q = quantize_absmax(row, 8, GroupAxis::kRow);
  CHECK(q.scales[0] == doctest::Approx(2.0 / 127.0).epsilon(1e-15));
  auto codes = q.codes();
  CHECK(codes[0] == 64);  // 63.5 rounds half-to-even up to 64
  CHECK(codes[1] == -127);
  CHECK(codes[2] == 32);  // 31.75 rounds to 32
  Mat back = dequantize(q);
  CHECK(back(0, 0) == doctest::Approx(1.007874).epsilon(1e-6));
  CHECK(back(0, 1) == doctest::Approx(-2.0).epsilon(1e-12));
  CHECK(back(0, 2) == doctest::Approx(0.503937).epsilon(1e-6));
}

TEST_CASE("absmax degenerate and fixed-point cases") {
  Mat zero = Mat::Zero(3, 4);
  QuantizedMatrix qz = quantize_absmax(zero, 8, GroupAxis::kRow);
  CHECK(dequantize(qz) == zero);
  for (Real s : qz.scales) CHECK(s == 0.0);

  // A matrix already on the s * integer grid round-trips exactly.
  Mat grid(2, 3);
  const Real s = 0.03125;
  grid << 4 * s, -127 * s, 10 * s, 127 * s, 0.0, -77 * s;
  QuantizedMatrix qg = quantize_absmax(grid, 8, GroupAxis::kWhole);
  Mat back = dequantize(qg);
  for (Index r = 0; r < 2; ++r) {
    for (Index c = 0; c < 3; ++c) CHECK(back(r, c) == doctest::Approx(grid(r, c)).epsilon(1e-15));
  }

  Mat bad(1, 2);
  bad << 1.0, std::numeric_limits<Real>::infinity();
  CHECK_THROWS_AS(quantize_absmax(bad, 8, GroupAxis::kRow), ContractError);
  CHECK_THROWS_AS(quantize_absmax(grid, 5, GroupAxis::kRow), ContractError);
}

TEST_CASE("zeropoint quantization on the worked row") {
  Mat row(1, 3);
  row << 0.0, 0.5, 1.0;
  QuantizedMatrix q = quantize_zeropoint(row, 8, GroupAxis::kRow);
  CHECK(q.scales[0] == doctest::Approx(1.0 / 254.0).epsilon(1e-15));
  CHECK(q.zero_points[0] == 127.0);
  auto codes = q.codes();
  CHECK(codes[0] == -127);
  CHECK(codes[1] == 0);
  CHECK(codes[2] == 127);
  Mat back = dequantize(q);
  for (Index c = 0; c < 3; ++c) CHECK(back(0, c) == doctest::Approx(row(0, c)).epsilon(1e-12));
}

TEST_CASE("zeropoint handles symmetric and constant groups") {
  Rng rng(5);
  Mat sym = random_matrix(6, 8, rng);
  sym = (sym - Mat::Constant(6, 8, sym.mean())).eval();  // roughly centered
  QuantizedMatrix qa = quantize_absmax(sym, 8, GroupAxis::kRow);
  QuantizedMatrix qz = quantize_zeropoint(sym, 8, GroupAxis::kRow);
  Mat da = dequantize(qa);
  Mat dz = dequantize(qz);
  // On near-symmetric data the two schemes agree to within one quantum.
  for (Index r = 0; r < 6; ++r) {
    for (Index c = 0; c < 8; ++c) {
      CHECK(std::fabs(da(r, c) - dz(r, c)) <
            qa.scales[static_cast<size_t>(r)] + qz.scales[static_cast<size_t>(r)]);
    }
  }

  Mat constant = Mat::Constant(2, 5, -3.75);
  QuantizedMatrix qc = quantize_zeropoint(constant, 4, GroupAxis::kRow);
  CHECK(qc.constant_group[0] == 1);
  Mat back = dequantize(qc);
  for (Index r = 0; r < 2; ++r) {
    for (Index c = 0; c < 5; ++c) CHECK(back(r, c) == -3.75);
  }
}

TEST_CASE("absmax round-trip bound holds per group for both widths and axes") {
  Rng rng(31);
  for (int trial = 0; trial < 250; ++trial) {
    const Index rows = 1 + rng.uniform_int(0, 7);
    const Index cols = 1 + rng.uniform_int(0, 7);
    Mat w = random_matrix(rows, cols, rng, std::pow(10.0, rng.uniform_int(-3, 2)));
    for (int bits : {4, 8}) {
      for (GroupAxis axis : {GroupAxis::kRow, GroupAxis::kColumn, GroupAxis::kWhole}) {
        QuantizedMatrix q = quantize_absmax(w, bits, axis);
        Mat back = dequantize(q);
        for (Index r = 0; r < rows; ++r) {
          for (Index c = 0; c < cols; ++c) {
            Index group = axis == GroupAxis::kRow ? r : axis == GroupAxis::kColumn ? c : 0;
            const Real bound = q.scales[static_cast<size_t>(group)] / 2.0 + 1e-12;
            CHECK(std::fabs(back(r, c) - w(r, c)) <= bound);
          }
        }
        // Quantizing the dequantized matrix is a fixed point.
        QuantizedMatrix q2 = quantize_absmax(back, bits, axis);
        CHECK(q2.codes() == q.codes());
      }
    }
  }
}

TEST_CASE("INT4 carries at least the INT8 error; heavy tails at least Gaussian") {
  Rng rng(67);
  int heavy_wins = 0;
  const int trials = 40;
  for (int trial = 0; trial < trials; ++trial) {
    Mat gauss = random_matrix(24, 24, rng);
    QuantizedMatrix q4 = quantize_absmax(gauss, 4, GroupAxis::kRow);
    QuantizedMatrix q8 = quantize_absmax(gauss, 8, GroupAxis::kRow);
    CHECK(mse(dequantize(q4), gauss) >= mse(dequantize(q8), gauss));

    // Laplace draws rescaled to unit variance: same variance, higher kurtosis,
    // hence wider tails and a larger absmax quantization error.
    Mat heavy(24, 24);
    for (Index r = 0; r < 24; ++r) {
      for (Index c = 0; c < 24; ++c) {
        const Real u = rng.uniform() - 0.5;
        const Real laplace = (u < 0 ? 1.0 : -1.0) * std::log(1.0 - 2.0 * std::fabs(u));
        heavy(r, c) = laplace / std::sqrt(2.0);  // unit variance
      }
    }
    Mat gauss_unit = random_matrix(24, 24, rng);
    QuantizedMatrix hq = quantize_absmax(heavy, 4, GroupAxis::kWhole);
    QuantizedMatrix gq = quantize_absmax(gauss_unit, 4, GroupAxis::kWhole);
    if (mse(dequantize(hq), heavy) >= mse(dequantize(gq), gauss_unit)) ++heavy_wins;

    // Wider distribution, larger bins: scaling the data scales the step.
    Mat wide = 3.0 * gauss;
    CHECK(max_scale(quantize_absmax(wide, 4, GroupAxis::kRow)) >
          max_scale(quantize_absmax(gauss, 4, GroupAxis::kRow)));
  }
  CHECK(heavy_wins >= trials * 9 / 10);
}

TEST_CASE("grouped quantization never loses to whole-matrix quantization") {
  Rng rng(71);
  for (int trial = 0; trial < 60; ++trial) {
    Mat w = random_matrix(4 + rng.uniform_int(0, 4), 4 + rng.uniform_int(0, 4), rng);
    // Scale one row up to create an outlier group.
    w.row(0) *= std::pow(4.0, rng.uniform_int(0, 3));
    for (int bits : {4, 8}) {
      const Real grouped = mse(dequantize(quantize_absmax(w, bits, GroupAxis::kRow)), w);
      const Real whole = mse(dequantize(quantize_absmax(w, bits, GroupAxis::kWhole)), w);
      CHECK(grouped <= whole + 1e-15);
    }
  }
}

TEST_CASE("int4 packing: round trip, payload size, contract") {
  // Exhaustive over short lengths and all values per position.
  for (int a = -7; a <= 7; ++a) {
    std::vector<std::int8_t> one = {static_cast<std::int8_t>(a)};
    CHECK(unpack_int4(pack_int4(one), 1) == one);
    for (int b = -7; b <= 7; ++b) {
      std::vector<std::int8_t> two = {static_cast<std::int8_t>(a), static_cast<std::int8_t>(b)};
      CHECK(unpack_int4(pack_int4(two), 2) == two);
    }
  }
  // Random vectors across all lengths up to 16.
  Rng rng(81);
  for (Index len = 0; len <= 16; ++len) {
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<std::int8_t> codes(static_cast<size_t>(len));
      for (auto& c : codes) c = static_cast<std::int8_t>(rng.uniform_int(-7, 7));
      auto packed = pack_int4(codes);
      CHECK(static_cast<Index>(packed.size()) == (len + 1) / 2);
      CHECK(unpack_int4(packed, len) == codes);
    }
  }
  CHECK(pack_int4(std::vector<std::int8_t>{}).empty());

  std::vector<std::int8_t> bad = {8};
  CHECK_THROWS_AS(pack_int4(bad), ContractError);
  std::vector<std::int8_t> minus_eight = {-8};
  CHECK_THROWS_AS(pack_int4(minus_eight), ContractError);
}

TEST_CASE("quantize_model leaves embeddings and layer norms untouched") {
  GLMConfig cfg = tiny_model_config();
  Rng rng(99);
  ModelParams params = init_parameters(cfg, rng);

  QuantPolicy policy;
  policy.bits = 8;
  QuantizedModel qm = quantize_model(params, policy);

  auto bytes_equal = [](const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) return false;
    return std::memcmp(a.values().data(), b.values().data(),
                       static_cast<size_t>(a.size()) * sizeof(Real)) == 0;
  };
  CHECK(bytes_equal(qm.embedding, params.embedding));
  for (size_t l = 0; l < qm.layers.size(); ++l) {
    CHECK(bytes_equal(qm.layers[l].ln1_gain, params.layers[l].ln1_gain));
    CHECK(bytes_equal(qm.layers[l].ln1_bias, params.layers[l].ln1_bias));
    CHECK(bytes_equal(qm.layers[l].ln2_gain, params.layers[l].ln2_gain));
    CHECK(bytes_equal(qm.layers[l].ln2_bias, params.layers[l].ln2_bias));
  }

  // A policy that excludes everything round-trips byte-identically.
  QuantPolicy off;
  off.quantize_linear = false;
  ModelParams same = dequantize_model(quantize_model(params, off));
  auto orig = params.parameters();
  auto back = same.parameters();
  for (size_t i = 0; i < orig.size(); ++i) {
    CHECK(bytes_equal(orig[i].tensor, back[i].tensor));
  }
}

TEST_CASE("quantized forward deviation shrinks with more bits") {
  GLMConfig cfg = tiny_model_config();
  Rng rng(111);
  ModelParams params = init_parameters(cfg, rng);
  std::vector<int> tokens = {5, 6, 7, 8, 9, 10, 11, 12};
  SpanSet set;
  set.spans = {{2, 2}};
  set.permutation = {0};
  CorruptedSample sample = corrupt_mask(tokens, set);

  Tensor reference = forward(params, sample);
  Real deviation[2] = {0.0, 0.0};
  int slot = 0;
  for (int bits : {4, 8}) {
    QuantPolicy policy;
    policy.bits = bits;
    ModelParams rebuilt = dequantize_model(quantize_model(params, policy));
    Tensor logits = forward(rebuilt, sample);
    deviation[slot++] = (logits.values() - reference.values()).abs().maxCoeff();
  }
  CHECK(deviation[1] <= deviation[0]);  // non-increasing in bits
  CHECK(deviation[1] < 1.0);
}

TEST_CASE("memory accounting: INT4 payload is a quarter of the half baseline") {
  GLMConfig cfg = tiny_model_config();
  Rng rng(121);
  ModelParams params = init_parameters(cfg, rng);
  QuantPolicy policy;
  policy.bits = 4;
  MemoryAccounting acc = memory_accounting(quantize_model(params, policy));
  CHECK(acc.quant_payload_bytes * 4 == acc.half_baseline_bytes);
  CHECK(acc.scale_bytes > 0);

  policy.bits = 8;
  MemoryAccounting acc8 = memory_accounting(quantize_model(params, policy));
  CHECK(acc8.quant_payload_bytes * 2 == acc8.half_baseline_bytes);
}

TEST_CASE("quantized models serialize and reload") {
  GLMConfig cfg = tiny_model_config();
  Rng rng(131);
  ModelParams params = init_parameters(cfg, rng);
  QuantPolicy policy;
  policy.bits = 4;
  QuantizedModel qm = quantize_model(params, policy);

  const auto dir = std::filesystem::temp_directory_path() / "glmlab_quant_test";
  std::filesystem::remove_all(dir);
  save_quantized_model(dir, qm);
  QuantizedModel back = load_quantized_model(dir);

  REQUIRE(back.layers.size() == qm.layers.size());
  for (size_t l = 0; l < qm.layers.size(); ++l) {
    CHECK(back.layers[l].qkv.payload == qm.layers[l].qkv.payload);
    CHECK(back.layers[l].qkv.scales == qm.layers[l].qkv.scales);
    CHECK(back.layers[l].ffn_w2.payload == qm.layers[l].ffn_w2.payload);
  }
  Mat a = dequantize(qm.layers[0].out_proj);
  Mat b = dequantize(back.layers[0].out_proj);
  CHECK(a == b);
  std::filesystem::remove_all(dir);
}

TEST_CASE("distribution report: moments, outliers, histogram") {
  Rng rng(141);
  Mat normal(1000, 1000);
  for (Index r = 0; r < normal.rows(); ++r) {
    for (Index c = 0; c < normal.cols(); ++c) normal(r, c) = rng.normal(0.0, 1.0);
  }
  DistributionReport report = weight_distribution_report(normal, 64, 6.0);
  CHECK(std::fabs(report.skewness) < 0.01);
  CHECK(report.kurtosis == doctest::Approx(3.0).epsilon(0.02));
  CHECK(report.variance == doctest::Approx(1.0).epsilon(0.01));
  Index total = 0;
  for (const HistogramBin& bin : report.bins) total += bin.count;
  CHECK(total == report.count);

  Mat constant = Mat::Constant(10, 10, 2.5);
  DistributionReport flat = weight_distribution_report(constant, 8, 6.0);
  CHECK(flat.variance == 0.0);
  CHECK(flat.outlier_share == 0.0);

  const std::string table = histogram_table(report);
  CHECK(table.find("bin_left\tbin_right\tcount") == 0);
}

TEST_CASE("activation outlier scan") {
  Mat quiet = Mat::Constant(6, 10, 0.5);
  CHECK(activation_outlier_scan(quiet, 6.0) == 0.0);
  CHECK(activation_outlier_scan(quiet, 0.0) == 1.0);

  // Three of ten hidden dimensions spiked to |100| cross the threshold 6.
  Mat spiked = Mat::Constant(8, 10, 0.5);
  spiked(3, 1) = 100.0;
  spiked(5, 4) = -100.0;
  spiked(0, 7) = 100.0;
  CHECK(activation_outlier_scan(spiked, 6.0) == doctest::Approx(0.3));
}
