#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "glmlab/corruption.hpp"
#include "support/span_enum.hpp"

using namespace glmlab;

namespace {

std::vector<int> bytes(std::initializer_list<int> raw) {
  std::vector<int> out;
  for (int r : raw) out.push_back(Tokenizer::kByteOffset + r);
  return out;
}

CorruptionConfig toy_config() {
  CorruptionConfig cfg;
  cfg.aggregated_samples_per_sequence = 2;
  cfg.short_window = 32;
  cfg.seq_length = 64;
  return cfg;
}

}  // namespace

TEST_CASE("tokenizer round-trips text and reserves control ids") {
  const std::string text = "hello, \xF0\x9F\x8C\x8D!";
  auto tokens = Tokenizer::encode(text);
  for (int t : tokens) CHECK(t >= Tokenizer::kByteOffset);
  CHECK(Tokenizer::decode(tokens) == text);
}

TEST_CASE("sample_spans hits the budget and stays valid") {
  CorruptionConfig cfg;
  Rng rng(101);
  const int trials = 10000;
  const int length = 100;
  double masked_total = 0.0;
  double span_total = 0.0;
  long span_count = 0;
  for (int i = 0; i < trials; ++i) {
    Rng local = rng.fork(static_cast<std::uint64_t>(i));
    SpanSet spans = sample_spans(length, cfg, local);
    int prev_end = -2;
    for (const Span& s : spans.spans) {
      CHECK(s.length >= 1);
      CHECK(s.start > prev_end + 1);  // non-overlapping and non-adjacent
      prev_end = s.start + s.length - 1;
      CHECK(prev_end < length);
      span_total += s.length;
      ++span_count;
    }
    masked_total += spans.total_masked();
    // Permutation really is a permutation.
    std::vector<int> sorted = spans.permutation;
    std::sort(sorted.begin(), sorted.end());
    for (size_t k = 0; k < sorted.size(); ++k) CHECK(sorted[k] == static_cast<int>(k));
  }
  const double masked_fraction = masked_total / (trials * static_cast<double>(length));
  CHECK(masked_fraction == doctest::Approx(0.15).epsilon(0.0667));  // 0.15 +- 0.01
  // Zero-truncated Poisson(3) mean: 3 / (1 - e^-3).
  const double expected_mean = 3.0 / (1.0 - std::exp(-3.0));
  CHECK(std::fabs(span_total / span_count - expected_mean) < 0.1);
}

TEST_CASE("sample_spans with zero budget is empty") {
  CorruptionConfig cfg;
  cfg.mask_prob = 0.0;  // constructed directly; validate() would reject it
  Rng rng(7);
  SpanSet spans = sample_spans(100, cfg, rng);
  CHECK(spans.spans.empty());
  CHECK(spans.permutation.empty());
}

TEST_CASE("sample_spans rejects pathologically short input") {
  CorruptionConfig cfg;
  Rng rng(7);
  CHECK_THROWS_AS(sample_spans(7, cfg, rng), ContractError);
}

TEST_CASE("sample_spans falls back to a flagged single span when nothing fits") {
  // Spans drawn much longer than the sequence can never be placed; the
  // degenerate fallback produces one flagged span instead of nothing.
  CorruptionConfig cfg;
  cfg.average_block_length = 60.0;
  Rng rng(13);
  SpanSet spans = sample_spans(8, cfg, rng);
  REQUIRE(spans.spans.size() == 1);
  CHECK(spans.degenerate_fallback);
  CHECK(spans.spans[0].length >= 1);
  CHECK(spans.spans[0].length < 8);
}

TEST_CASE("corrupt_mask on the worked example") {
  // tokens [a,b,c,d,e], span (1,2): x_corrupt = [a, M, d, e], appended
  // [S, b, c] predicting [b, c, E].
  auto tokens = bytes({'a', 'b', 'c', 'd', 'e'});
  SpanSet spans;
  spans.spans = {{1, 2}};
  spans.permutation = {0};
  CorruptedSample sample = corrupt_mask(tokens, spans);

  REQUIRE(sample.length() == 7);
  CHECK(sample.context_length == 4);
  CHECK(sample.input_tokens[0] == tokens[0]);
  CHECK(sample.input_tokens[1] == Tokenizer::kMask);
  CHECK(sample.input_tokens[2] == tokens[3]);
  CHECK(sample.input_tokens[3] == tokens[4]);
  CHECK(sample.input_tokens[4] == Tokenizer::kSpanStart);
  CHECK(sample.input_tokens[5] == tokens[1]);
  CHECK(sample.input_tokens[6] == tokens[2]);

  CHECK(sample.targets[3] == -1);
  CHECK(sample.targets[4] == tokens[1]);
  CHECK(sample.targets[5] == tokens[2]);
  CHECK(sample.targets[6] == Tokenizer::kSpanEnd);

  // All span inputs carry the placeholder's position (index 1 in x_corrupt).
  CHECK(sample.positions[4] == 1);
  CHECK(sample.positions[5] == 1);
  CHECK(sample.positions[6] == 1);

  CHECK(reconstruct_original(sample) == tokens);
}

TEST_CASE("corrupt_mask: zero spans and permutation ordering") {
  auto tokens = bytes({1, 2, 3, 4, 5, 6, 7, 8});
  SpanSet none;
  CorruptedSample empty = corrupt_mask(tokens, none);
  CHECK(empty.target_count() == 0);
  CHECK(empty.length() == 8);
  for (size_t i = 0; i < 8; ++i) CHECK(empty.positions[i] == static_cast<int>(i));

  SpanSet two;
  two.spans = {{1, 2}, {5, 1}};
  two.permutation = {1, 0};  // span 1 is generated first
  CorruptedSample sample = corrupt_mask(tokens, two);
  // First appended block belongs to span index 1.
  CHECK(sample.span_id[sample.context_length] == 1);
  CHECK(sample.span_id[sample.context_length + 2] == 0);
  CHECK(reconstruct_original(sample) == tokens);

  SpanSet overlapping;
  overlapping.spans = {{1, 3}, {3, 2}};
  overlapping.permutation = {0, 1};
  CHECK_THROWS_AS(corrupt_mask(tokens, overlapping), ContractError);
}

TEST_CASE("reconstruction holds for random corruption") {
  CorruptionConfig cfg;
  Rng rng(5150);
  for (int trial = 0; trial < 200; ++trial) {
    Rng local = rng.fork(static_cast<std::uint64_t>(trial));
    const int length = 8 + local.uniform_int(0, 120);
    std::vector<int> tokens;
    for (int i = 0; i < length; ++i) {
      tokens.push_back(Tokenizer::kByteOffset + local.uniform_int(0, 255));
    }
    SpanSet spans = sample_spans(length, cfg, local);
    CorruptedSample sample = corrupt_mask(tokens, spans);
    CHECK(reconstruct_original(sample) == tokens);
    CHECK(assign_position_ids(sample) == sample.positions);

    CorruptedSample gsample = corrupt_gmask(tokens, cfg, local);
    CHECK(reconstruct_original(gsample) == tokens);
    CHECK(assign_position_ids(gsample) == gsample.positions);
  }
}

TEST_CASE("corrupt_gmask: smallest case and position prolongation") {
  CorruptionConfig cfg;
  Rng rng(99);
  auto two = bytes({7, 8});
  CorruptedSample sample = corrupt_gmask(two, cfg, rng);
  // L=2: masked length is forced to 1, prefix keeps one token.
  CHECK(sample.spans.spans[0].start == 1);
  CHECK(sample.spans.spans[0].length == 1);
  CHECK(sample.input_tokens[0] == two[0]);
  CHECK(sample.input_tokens[1] == Tokenizer::kGMask);
  CHECK(sample.input_tokens[2] == Tokenizer::kSpanStart);
  CHECK(sample.input_tokens[3] == two[1]);
  CHECK(sample.targets[2] == two[1]);
  CHECK(sample.targets[3] == Tokenizer::kSpanEnd);

  // Prefix length 5: generated tokens carry positions 5, 6, 7, ...
  auto ten = bytes({0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  for (int trial = 0; trial < 50; ++trial) {
    Rng local = rng.fork(static_cast<std::uint64_t>(trial));
    CorruptedSample g = corrupt_gmask(ten, cfg, local);
    const int prefix = g.spans.spans[0].start;
    if (prefix != 5) continue;
    for (size_t i = 0; i < g.input_tokens.size(); ++i) {
      if (g.span_id[i] == 0 && g.span_offset[i] >= 1) {
        CHECK(g.positions[i] == 5 + g.span_offset[i] - 1);
      }
    }
  }
}

TEST_CASE("corrupt_gmask masked length is uniform over its range") {
  // L=10, min ratio 0.2: masked length ranges over {2..9}; chi-square over
  // 10k draws against the uniform distribution, p > 0.01.
  CorruptionConfig cfg;
  Rng rng(2024);
  const int trials = 10000;
  auto ten = bytes({0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  std::map<int, int> counts;
  for (int i = 0; i < trials; ++i) {
    Rng local = rng.fork(static_cast<std::uint64_t>(i));
    CorruptedSample g = corrupt_gmask(ten, cfg, local);
    counts[g.spans.spans[0].length]++;
  }
  REQUIRE(counts.size() == 8);
  for (const auto& [len, n] : counts) {
    CHECK(len >= 2);
    CHECK(len <= 9);
    (void)n;
  }
  const double expected = trials / 8.0;
  double chi2 = 0.0;
  for (const auto& [len, n] : counts) {
    (void)len;
    chi2 += (n - expected) * (n - expected) / expected;
  }
  // 7 degrees of freedom; the 0.01 critical value is 18.475.
  CHECK(chi2 < 18.475);
}

TEST_CASE("pack_samples isolates sub-samples and pads to the window") {
  CorruptionConfig cfg = toy_config();
  Rng rng(11);
  std::vector<CorruptedSample> parts;
  for (int k = 0; k < 2; ++k) {
    Rng local = rng.fork(static_cast<std::uint64_t>(k));
    std::vector<int> tokens;
    for (int i = 0; i < 20; ++i) {
      tokens.push_back(Tokenizer::kByteOffset + local.uniform_int(0, 200));
    }
    parts.push_back(corrupt_mask(tokens, sample_spans(20, cfg, local)));
  }
  CorruptedSample packed = pack_samples(parts, cfg);
  CHECK(packed.length() == cfg.seq_length);

  BoolMat mask = build_attention_mask(packed);
  // Brute-force scan: no visibility across segments, pads self-only.
  for (int i = 0; i < packed.length(); ++i) {
    for (int j = 0; j < packed.length(); ++j) {
      if (packed.segment[static_cast<size_t>(i)] != packed.segment[static_cast<size_t>(j)]) {
        CHECK_FALSE(mask(i, j));
      }
      CHECK(mask(i, j) == brute_force_visibility(packed, i, j));
    }
  }

  // Identity packing: aggregation 1 keeps the sample, padded.
  CorruptionConfig solo;
  solo.aggregated_samples_per_sequence = 1;
  solo.short_window = 64;
  solo.seq_length = 64;
  CorruptedSample alone = pack_samples({parts[0]}, solo);
  for (int i = 0; i < parts[0].length(); ++i) {
    CHECK(alone.input_tokens[static_cast<size_t>(i)] ==
          parts[0].input_tokens[static_cast<size_t>(i)]);
    CHECK(alone.positions[static_cast<size_t>(i)] == parts[0].positions[static_cast<size_t>(i)]);
  }

  // Overflowing the short window is a contract error.
  CorruptionConfig tight = toy_config();
  tight.short_window = 8;
  tight.seq_length = 16;
  CHECK_THROWS_AS(pack_samples(parts, tight), ContractError);
}

TEST_CASE("attention mask equals the brute-force oracle exhaustively") {
  // Shortened sweep (full-size sweep runs in the acceptance suite).
  long checked = span_enum::sweep_mask_samples(8, 2, [](const CorruptedSample& sample) {
    const BoolMat mask = build_attention_mask(sample);
    for (int i = 0; i < sample.length(); ++i) {
      for (int j = 0; j < sample.length(); ++j) {
        REQUIRE(mask(i, j) == brute_force_visibility(sample, i, j));
      }
    }
  });
  CHECK(checked > 500);
}

TEST_CASE("brute-force oracle spot values") {
  auto tokens = bytes({1, 2, 3, 4, 5, 6, 7, 8});
  SpanSet spans;
  spans.spans = {{1, 2}, {5, 2}};
  spans.permutation = {0, 1};  // span 0 generated first
  CorruptedSample s = corrupt_mask(tokens, spans);

  // Context <-> context.
  CHECK(brute_force_visibility(s, 0, 3));
  CHECK(brute_force_visibility(s, 3, 0));
  // Token attends itself.
  for (int i = 0; i < s.length(); ++i) CHECK(brute_force_visibility(s, i, i));
  // Span-0 query cannot see span-1 tokens under z = (0, 1).
  int span0_query = -1, span1_key = -1;
  for (int i = 0; i < s.length(); ++i) {
    if (s.span_id[static_cast<size_t>(i)] == 0) span0_query = i;
    if (s.span_id[static_cast<size_t>(i)] == 1 && span1_key < 0) span1_key = i;
  }
  REQUIRE(span0_query >= 0);
  REQUIRE(span1_key >= 0);
  CHECK_FALSE(brute_force_visibility(s, span0_query, span1_key));
  CHECK(brute_force_visibility(s, span1_key, span0_query));
  // Context never sees span tokens.
  CHECK_FALSE(brute_force_visibility(s, 0, span0_query));
}

TEST_CASE("gmask mask: bidirectional prefix, causal suffix") {
  CorruptionConfig cfg;
  Rng rng(404);
  auto tokens = bytes({0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  CorruptedSample g = corrupt_gmask(tokens, cfg, rng);
  BoolMat mask = build_attention_mask(g);
  const int ctx = g.context_length;
  for (int i = 0; i < ctx; ++i) {
    for (int j = 0; j < ctx; ++j) CHECK(mask(i, j));          // prefix block fully true
    for (int j = ctx; j < g.length(); ++j) CHECK_FALSE(mask(i, j));
  }
  for (int i = ctx; i < g.length(); ++i) {
    for (int j = 0; j < g.length(); ++j) {
      const bool expected = j < ctx || j <= i;  // strictly causal over the suffix
      CHECK(mask(i, j) == expected);
    }
  }
}

TEST_CASE("sample stream is deterministic and mixes kinds at gmask_prob") {
  CorruptionConfig cfg = toy_config();
  std::vector<std::vector<int>> docs;
  Rng seedgen(1);
  for (int d = 0; d < 50; ++d) {
    std::vector<int> doc;
    const int len = 12 + seedgen.uniform_int(0, 40);
    for (int i = 0; i < len; ++i) doc.push_back(Tokenizer::kByteOffset + seedgen.uniform_int(32, 126));
    docs.push_back(doc);
  }

  SampleStream a(docs, cfg, Rng(77));
  SampleStream b(docs, cfg, Rng(77));
  int gmask_count = 0;
  const int n = 2000;
  for (int i = 0; i < n; ++i) {
    CorruptedSample sa = a.next();
    CorruptedSample sb = b.next();
    CHECK(sample_record(sa) == sample_record(sb));  // bitwise-identical stream
    if (sa.kind == SampleKind::kGMask) ++gmask_count;
    if (sa.kind == SampleKind::kShortMask) CHECK(sa.length() == cfg.seq_length);
  }
  const double share = static_cast<double>(gmask_count) / n;
  CHECK(std::fabs(share - cfg.gmask_prob) < 0.03);
}

TEST_CASE("config invariants are enforced") {
  CorruptionConfig cfg;
  cfg.aggregated_samples_per_sequence = 3;  // 3 * 512 != 2048
  CHECK_THROWS_AS(cfg.validate(), ContractError);

  CorruptionConfig bad;
  bad.mask_prob = 1.5;
  CHECK_THROWS_AS(bad.validate(), ContractError);

  CorruptionConfig ok;
  ok.validate();
}
