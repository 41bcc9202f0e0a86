#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "glmlab/common.hpp"
#include "glmlab/rng.hpp"

namespace glmlab {

// Byte-level toy tokenizer with reserved control ids. One document per line,
// UTF-8; every byte maps to one token.
struct Tokenizer {
  static constexpr int kPad = 0;
  static constexpr int kMask = 1;        // [MASK] placeholder (short spans)
  static constexpr int kGMask = 2;       // [gMASK] placeholder (masked suffix)
  static constexpr int kSpanStart = 3;   // start-of-span marker
  static constexpr int kSpanEnd = 4;     // end-of-span marker (loss target)
  static constexpr int kByteOffset = 6;

  static constexpr int vocab_size() { return kByteOffset + 256; }

  static std::vector<int> encode(std::string_view text);
  static std::string decode(const std::vector<int>& tokens);
};

struct CorruptionConfig {
  Real mask_prob = 0.15;               // fraction of tokens masked under [MASK]
  Real average_block_length = 3.0;     // Poisson mean for span lengths
  Real gmask_prob = 0.7;               // fraction of samples using [gMASK]
  Real min_gmask_ratio = 0.2;          // minimum masked suffix fraction
  int aggregated_samples_per_sequence = 4;
  int short_window = 512;              // per-sample window under [MASK]
  int seq_length = 2048;               // full packed window
  Real short_seq_prob = 0.02;
  Real single_span_prob = 0.02;

  void validate() const;
};

struct Span {
  int start = 0;
  int length = 0;
};

struct SpanSet {
  std::vector<Span> spans;       // disjoint, sorted by start
  std::vector<int> permutation;  // visibility order over span indices
  bool degenerate_fallback = false;

  int total_masked() const {
    int n = 0;
    for (const Span& s : spans) n += s.length;
    return n;
  }
};

enum class SampleKind { kShortMask, kGMask };

// A corrupted sequence ready for the model: the context part (x_corrupt)
// followed by, per span in permutation order, a start marker and the span
// tokens. `targets` is aligned with `input_tokens`; -1 marks positions that
// carry no loss.
struct CorruptedSample {
  SampleKind kind = SampleKind::kShortMask;
  std::vector<int> input_tokens;
  std::vector<int> positions;
  std::vector<int> targets;
  std::vector<int> span_id;      // -1 context, -2 padding, else span index
  std::vector<int> span_offset;  // within-span input offset (0 = start marker)
  std::vector<int> segment;      // packed sub-sample index; all 0 when unpacked
  std::vector<int> span_rank;    // permutation rank per span index
  SpanSet spans;
  std::vector<int> original;     // uncorrupted token sequence (empty when packed)
  int context_length = 0;        // length of the x_corrupt part

  int length() const { return static_cast<int>(input_tokens.size()); }
  int target_count() const;
};

// Draws a span set for a sequence of `length` tokens: lengths are
// Poisson(average_block_length) conditioned >= 1, placements uniform among
// the remaining non-overlapping, non-adjacent slots, permutation uniform.
// The final span is kept only if it lands the masked total closer to the
// mask_prob budget than stopping short would.
SpanSet sample_spans(int length, const CorruptionConfig& cfg, Rng& rng);

CorruptedSample corrupt_mask(const std::vector<int>& tokens, const SpanSet& spans);

CorruptedSample corrupt_gmask(const std::vector<int>& tokens, const CorruptionConfig& cfg,
                              Rng& rng);

// Concatenates aggregated_samples_per_sequence short-window samples into one
// seq_length window with block-diagonal attention isolation, padding the tail.
CorruptedSample pack_samples(const std::vector<CorruptedSample>& samples,
                             const CorruptionConfig& cfg);

// Fast mask construction from the sample structure. Row = query, col = key.
BoolMat build_attention_mask(const CorruptedSample& sample);

// Literal transcription of the conditioning set: when predicting at input
// position i, which input tokens are known? Enumerates the set token by token
// with no mask-matrix shortcuts; the oracle for build_attention_mask.
bool brute_force_visibility(const CorruptedSample& sample, int i, int j);

// Recomputes positional ids from the sample structure. Context tokens count
// 0..s-1; short-span tokens all carry their placeholder's index in x_corrupt;
// gmask generation continues s, s+1, ... from the last context token.
std::vector<int> assign_position_ids(const CorruptedSample& sample);

// Splices the span targets back into the original slots; used by the
// reconstruction invariant.
std::vector<int> reconstruct_original(const CorruptedSample& sample);

// One line per sample: kind, spans, permutation, positions, targets, tokens.
std::string sample_record(const CorruptedSample& sample);

// Streams corrupted training windows from a corpus (one document per line).
// [MASK]-mode windows are packed aggregated_samples_per_sequence at a time;
// [gMASK] windows span the full sequence length. Deterministic for a given
// (corpus, config, rng) triple.
class SampleStream {
public:
  SampleStream(std::vector<std::vector<int>> documents, CorruptionConfig cfg, Rng rng);

  CorruptedSample next();

  static std::vector<std::vector<int>> load_corpus(const std::string& path);

private:
  std::vector<int> next_document(int min_tokens, int max_tokens);

  std::vector<std::vector<int>> documents_;
  CorruptionConfig cfg_;
  Rng rng_;
  size_t cursor_ = 0;
};

}  // namespace glmlab
