#include "glmlab/corruption.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace glmlab {

namespace {

constexpr const char* kModule = "corruption";

std::vector<int> ranks_of(const std::vector<int>& permutation) {
  std::vector<int> rank(permutation.size());
  for (size_t k = 0; k < permutation.size(); ++k) {
    rank[static_cast<size_t>(permutation[k])] = static_cast<int>(k);
  }
  return rank;
}

void check_spans(const std::vector<int>& tokens, const SpanSet& spans) {
  const int n = static_cast<int>(tokens.size());
  int prev_end = -1;
  for (const Span& s : spans.spans) {
    if (s.length < 1 || s.start < 0 || s.start + s.length > n) {
      throw ContractError(kModule, "span (" + std::to_string(s.start) + ", " +
                                       std::to_string(s.length) + ") outside sequence of length " +
                                       std::to_string(n));
    }
    if (s.start <= prev_end) {
      throw ContractError(kModule, "spans overlap or are unsorted");
    }
    prev_end = s.start + s.length - 1;
  }
  if (spans.permutation.size() != spans.spans.size()) {
    throw ContractError(kModule, "permutation size does not match span count");
  }
  std::vector<int> sorted = spans.permutation;
  std::sort(sorted.begin(), sorted.end());
  for (size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != static_cast<int>(i)) {
      throw ContractError(kModule, "permutation is not a permutation of 0..m-1");
    }
  }
}

// Index of span i's placeholder inside x_corrupt: every earlier span
// collapses length_j tokens into one placeholder.
int placeholder_index(const SpanSet& spans, size_t i) {
  int shift = 0;
  for (size_t j = 0; j < i; ++j) shift += spans.spans[j].length - 1;
  return spans.spans[i].start - shift;
}

}  // namespace

// --- tokenizer ----------------------------------------------------------------

std::vector<int> Tokenizer::encode(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(kByteOffset + static_cast<int>(c));
  return out;
}

std::string Tokenizer::decode(const std::vector<int>& tokens) {
  std::string out;
  for (int t : tokens) {
    if (t >= kByteOffset && t < kByteOffset + 256) {
      out.push_back(static_cast<char>(t - kByteOffset));
    }
  }
  return out;
}

// --- config -------------------------------------------------------------------

void CorruptionConfig::validate() const {
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) {
    throw ContractError(kModule, "mask_prob must lie in (0, 1)");
  }
  if (!(min_gmask_ratio > 0.0 && min_gmask_ratio < 1.0)) {
    throw ContractError(kModule, "min_gmask_ratio must lie in (0, 1)");
  }
  if (gmask_prob < 0.0 || gmask_prob > 1.0) {
    throw ContractError(kModule, "gmask_prob must lie in [0, 1]");
  }
  if (average_block_length <= 0.0) {
    throw ContractError(kModule, "average_block_length must be positive");
  }
  if (aggregated_samples_per_sequence < 1 || short_window < 1 ||
      aggregated_samples_per_sequence * short_window != seq_length) {
    throw ContractError(kModule,
                        "aggregated_samples_per_sequence * short_window must equal seq_length");
  }
}

int CorruptedSample::target_count() const {
  int n = 0;
  for (int t : targets) n += (t >= 0) ? 1 : 0;
  return n;
}

// --- span sampling ------------------------------------------------------------

namespace {

// Positions where a new span may start are those whose whole extent is
// neither occupied nor adjacent to an existing span.
struct Placement {
  explicit Placement(int length) : blocked(static_cast<size_t>(length), false) {}

  bool place(int length_needed, Rng& rng, Span* out) {
    const int n = static_cast<int>(blocked.size());
    std::vector<int> starts;
    int run = 0;
    for (int q = 0; q < n; ++q) {
      run = blocked[static_cast<size_t>(q)] ? 0 : run + 1;
      if (run >= length_needed) starts.push_back(q - length_needed + 1);
    }
    if (starts.empty()) return false;
    const int pick = starts[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(starts.size()) - 1))];
    for (int q = std::max(0, pick - 1); q <= std::min(n - 1, pick + length_needed); ++q) {
      blocked[static_cast<size_t>(q)] = true;
    }
    *out = Span{pick, length_needed};
    return true;
  }

  std::vector<bool> blocked;
};

}  // namespace

SpanSet sample_spans(int length, const CorruptionConfig& cfg, Rng& rng) {
  if (length < 8) {
    throw ContractError(kModule, "sample_spans requires length >= 8, got " +
                                     std::to_string(length));
  }
  SpanSet result;
  const Real budget = cfg.mask_prob * static_cast<Real>(length);
  if (budget <= 0.0) return result;

  Placement placement(length);
  const bool single_span = rng.bernoulli(cfg.single_span_prob);
  int total = 0;
  if (single_span) {
    const int len = std::min(rng.poisson_positive(cfg.average_block_length), length - 1);
    Span s;
    if (placement.place(len, rng, &s)) {
      result.spans.push_back(s);
      total = len;
    }
  } else {
    while (static_cast<Real>(total) < budget) {
      const int len = rng.poisson_positive(cfg.average_block_length);
      const bool crosses = static_cast<Real>(total + len) >= budget;
      // The crossing span is kept only when that leaves the total closer to
      // the budget than stopping short would; spans stay Poisson either way.
      if (crosses && (static_cast<Real>(total + len) - budget) > (budget - static_cast<Real>(total))) {
        break;
      }
      Span s;
      if (!placement.place(len, rng, &s)) break;
      result.spans.push_back(s);
      total += len;
      if (crosses) break;
    }
  }

  if (result.spans.empty()) {
    // Pathologically constrained input: fall back to one flagged span.
    const int len = std::max(1, std::min(static_cast<int>(std::floor(budget)), length - 1));
    result.spans.push_back(Span{(length - len) / 2, len});
    result.degenerate_fallback = true;
  }

  std::sort(result.spans.begin(), result.spans.end(),
            [](const Span& a, const Span& b) { return a.start < b.start; });
  result.permutation.resize(result.spans.size());
  std::iota(result.permutation.begin(), result.permutation.end(), 0);
  rng.shuffle(result.permutation);
  return result;
}

// --- corruption ---------------------------------------------------------------

CorruptedSample corrupt_mask(const std::vector<int>& tokens, const SpanSet& spans) {
  check_spans(tokens, spans);
  CorruptedSample out;
  out.kind = SampleKind::kShortMask;
  out.spans = spans;
  out.original = tokens;
  out.span_rank = ranks_of(spans.permutation);

  const int n = static_cast<int>(tokens.size());
  std::vector<int> placeholder_pos(spans.spans.size());
  int cursor = 0;
  for (size_t i = 0; i < spans.spans.size(); ++i) {
    const Span& s = spans.spans[i];
    for (; cursor < s.start; ++cursor) {
      out.input_tokens.push_back(tokens[static_cast<size_t>(cursor)]);
      out.positions.push_back(static_cast<int>(out.input_tokens.size()) - 1);
      out.targets.push_back(-1);
      out.span_id.push_back(-1);
      out.span_offset.push_back(-1);
    }
    placeholder_pos[i] = static_cast<int>(out.input_tokens.size());
    out.input_tokens.push_back(Tokenizer::kMask);
    out.positions.push_back(placeholder_pos[i]);
    out.targets.push_back(-1);
    out.span_id.push_back(-1);
    out.span_offset.push_back(-1);
    cursor = s.start + s.length;
  }
  for (; cursor < n; ++cursor) {
    out.input_tokens.push_back(tokens[static_cast<size_t>(cursor)]);
    out.positions.push_back(static_cast<int>(out.input_tokens.size()) - 1);
    out.targets.push_back(-1);
    out.span_id.push_back(-1);
    out.span_offset.push_back(-1);
  }
  out.context_length = static_cast<int>(out.input_tokens.size());

  // Span parts follow in permutation order: a start marker, then the span
  // tokens; the loss targets are the span tokens shifted by one plus the
  // end-of-span marker. All inputs of span i carry its placeholder position.
  for (int span_index : spans.permutation) {
    const Span& s = spans.spans[static_cast<size_t>(span_index)];
    const int pos = placeholder_pos[static_cast<size_t>(span_index)];
    for (int j = 0; j <= s.length; ++j) {
      const int tok = (j == 0) ? Tokenizer::kSpanStart
                               : tokens[static_cast<size_t>(s.start + j - 1)];
      const int target = (j == s.length) ? Tokenizer::kSpanEnd
                                         : tokens[static_cast<size_t>(s.start + j)];
      out.input_tokens.push_back(tok);
      out.positions.push_back(pos);
      out.targets.push_back(target);
      out.span_id.push_back(span_index);
      out.span_offset.push_back(j);
    }
  }
  out.segment.assign(out.input_tokens.size(), 0);
  return out;
}

CorruptedSample corrupt_gmask(const std::vector<int>& tokens, const CorruptionConfig& cfg,
                              Rng& rng) {
  const int n = static_cast<int>(tokens.size());
  if (n < 2) {
    throw ContractError(kModule, "corrupt_gmask requires at least 2 tokens");
  }
  const int min_masked = static_cast<int>(std::ceil(cfg.min_gmask_ratio * static_cast<Real>(n)));
  const int masked = rng.uniform_int(std::min(min_masked, n - 1), n - 1);
  const int prefix = n - masked;

  CorruptedSample out;
  out.kind = SampleKind::kGMask;
  out.original = tokens;
  out.spans.spans.push_back(Span{prefix, masked});
  out.spans.permutation.push_back(0);
  out.span_rank = {0};

  for (int i = 0; i < prefix; ++i) {
    out.input_tokens.push_back(tokens[static_cast<size_t>(i)]);
    out.positions.push_back(i);
    out.targets.push_back(-1);
    out.span_id.push_back(-1);
    out.span_offset.push_back(-1);
  }
  out.input_tokens.push_back(Tokenizer::kGMask);
  out.positions.push_back(prefix);
  out.targets.push_back(-1);
  out.span_id.push_back(-1);
  out.span_offset.push_back(-1);
  out.context_length = prefix + 1;

  // Generation part: start marker anchored at the first generated position,
  // then the suffix tokens prolonging positions prefix, prefix+1, ...
  for (int j = 0; j <= masked; ++j) {
    const int tok = (j == 0) ? Tokenizer::kSpanStart : tokens[static_cast<size_t>(prefix + j - 1)];
    const int target = (j == masked) ? Tokenizer::kSpanEnd : tokens[static_cast<size_t>(prefix + j)];
    out.input_tokens.push_back(tok);
    out.positions.push_back(prefix + std::max(0, j - 1));
    out.targets.push_back(target);
    out.span_id.push_back(0);
    out.span_offset.push_back(j);
  }
  out.segment.assign(out.input_tokens.size(), 0);
  return out;
}

CorruptedSample pack_samples(const std::vector<CorruptedSample>& samples,
                             const CorruptionConfig& cfg) {
  if (static_cast<int>(samples.size()) != cfg.aggregated_samples_per_sequence) {
    throw ContractError(kModule, "pack_samples expects exactly " +
                                     std::to_string(cfg.aggregated_samples_per_sequence) +
                                     " samples");
  }
  CorruptedSample out;
  out.kind = SampleKind::kShortMask;
  int span_base = 0;
  for (size_t s = 0; s < samples.size(); ++s) {
    const CorruptedSample& sample = samples[s];
    if (sample.length() > cfg.short_window) {
      throw ContractError(kModule, "sample of length " + std::to_string(sample.length()) +
                                       " overflows short_window " +
                                       std::to_string(cfg.short_window));
    }
    for (int i = 0; i < sample.length(); ++i) {
      out.input_tokens.push_back(sample.input_tokens[static_cast<size_t>(i)]);
      out.positions.push_back(sample.positions[static_cast<size_t>(i)]);
      out.targets.push_back(sample.targets[static_cast<size_t>(i)]);
      const int sid = sample.span_id[static_cast<size_t>(i)];
      out.span_id.push_back(sid >= 0 ? sid + span_base : sid);
      out.span_offset.push_back(sample.span_offset[static_cast<size_t>(i)]);
      out.segment.push_back(static_cast<int>(s));
    }
    for (int rank : sample.span_rank) out.span_rank.push_back(rank);
    span_base += static_cast<int>(sample.span_rank.size());
  }
  while (out.length() < cfg.seq_length) {
    out.input_tokens.push_back(Tokenizer::kPad);
    out.positions.push_back(0);
    out.targets.push_back(-1);
    out.span_id.push_back(-2);
    out.span_offset.push_back(-1);
    out.segment.push_back(-1);
  }
  out.context_length = 0;  // meaningless across segments
  return out;
}

// --- visibility ---------------------------------------------------------------

BoolMat build_attention_mask(const CorruptedSample& sample) {
  const int n = sample.length();
  BoolMat mask(n, n);
  for (int i = 0; i < n; ++i) {
    const int seg_i = sample.segment[static_cast<size_t>(i)];
    const int span_i = sample.span_id[static_cast<size_t>(i)];
    const int off_i = sample.span_offset[static_cast<size_t>(i)];
    for (int j = 0; j < n; ++j) {
      const int seg_j = sample.segment[static_cast<size_t>(j)];
      const int span_j = sample.span_id[static_cast<size_t>(j)];
      bool visible = false;
      if (span_i == -2 || span_j == -2) {
        visible = (i == j);  // padding attends only to itself
      } else if (seg_i != seg_j) {
        visible = false;
      } else if (span_i == -1) {
        visible = (span_j == -1);  // context is bidirectional, blind to spans
      } else if (span_j == -1) {
        visible = true;  // spans see all context
      } else if (span_i == span_j) {
        visible = sample.span_offset[static_cast<size_t>(j)] <= off_i;
      } else {
        visible = sample.span_rank[static_cast<size_t>(span_j)] <
                  sample.span_rank[static_cast<size_t>(span_i)];
      }
      mask(i, j) = visible;
    }
  }
  return mask;
}

bool brute_force_visibility(const CorruptedSample& sample, int i, int j) {
  const int n = sample.length();
  if (i < 0 || j < 0 || i >= n || j >= n) {
    throw ContractError(kModule, "visibility query outside sample");
  }
  // Build the conditioning set of the prediction made at input position i,
  // token by token, then test membership of j.
  std::vector<bool> known(static_cast<size_t>(n), false);
  const int seg_i = sample.segment[static_cast<size_t>(i)];
  const int span_i = sample.span_id[static_cast<size_t>(i)];
  if (span_i == -2) {
    known[static_cast<size_t>(i)] = true;  // padding: degenerate self-only row
  } else if (span_i == -1) {
    // A context position conditions on the whole corrupted context.
    for (int t = 0; t < n; ++t) {
      if (sample.segment[static_cast<size_t>(t)] == seg_i &&
          sample.span_id[static_cast<size_t>(t)] == -1) {
        known[static_cast<size_t>(t)] = true;
      }
    }
  } else {
    const int rank_i = sample.span_rank[static_cast<size_t>(span_i)];
    const int off_i = sample.span_offset[static_cast<size_t>(i)];
    for (int t = 0; t < n; ++t) {
      if (sample.segment[static_cast<size_t>(t)] != seg_i) continue;
      const int span_t = sample.span_id[static_cast<size_t>(t)];
      if (span_t == -1) {
        known[static_cast<size_t>(t)] = true;  // x_corrupt
      } else if (span_t == -2) {
        continue;
      } else if (sample.span_rank[static_cast<size_t>(span_t)] < rank_i) {
        known[static_cast<size_t>(t)] = true;  // permutation-earlier spans, fully
      } else if (span_t == span_i &&
                 sample.span_offset[static_cast<size_t>(t)] <= off_i) {
        known[static_cast<size_t>(t)] = true;  // own-span predecessors plus self
      }
    }
  }
  return known[static_cast<size_t>(j)];
}

std::vector<int> assign_position_ids(const CorruptedSample& sample) {
  const bool packed =
      std::any_of(sample.segment.begin(), sample.segment.end(), [](int s) { return s != 0; });
  if (packed) return sample.positions;  // per-sample positions are preserved by packing

  std::vector<int> placeholder_pos(sample.spans.spans.size());
  for (size_t i = 0; i < sample.spans.spans.size(); ++i) {
    placeholder_pos[i] = placeholder_index(sample.spans, i);
  }
  std::vector<int> positions(sample.input_tokens.size(), 0);
  int context_cursor = 0;
  for (size_t i = 0; i < sample.input_tokens.size(); ++i) {
    const int span = sample.span_id[i];
    if (span == -1) {
      positions[i] = context_cursor++;
    } else if (sample.kind == SampleKind::kShortMask) {
      positions[i] = placeholder_pos[static_cast<size_t>(span)];
    } else {
      const int start = sample.spans.spans[0].start;
      positions[i] = start + std::max(0, sample.span_offset[i] - 1);
    }
  }
  return positions;
}

std::vector<int> reconstruct_original(const CorruptedSample& sample) {
  std::vector<std::vector<int>> span_tokens(sample.spans.spans.size());
  for (size_t i = 0; i < sample.input_tokens.size(); ++i) {
    const int span = sample.span_id[i];
    if (span >= 0 && sample.span_offset[i] >= 1) {
      span_tokens[static_cast<size_t>(span)].push_back(sample.input_tokens[i]);
    }
  }
  std::vector<int> out;
  size_t next_span = 0;
  for (int i = 0; i < sample.context_length; ++i) {
    const int tok = sample.input_tokens[static_cast<size_t>(i)];
    if ((tok == Tokenizer::kMask || tok == Tokenizer::kGMask) &&
        next_span < span_tokens.size()) {
      for (int t : span_tokens[next_span]) out.push_back(t);
      ++next_span;
    } else {
      out.push_back(tok);
    }
  }
  return out;
}

std::string sample_record(const CorruptedSample& sample) {
  std::ostringstream os;
  os << "kind=" << (sample.kind == SampleKind::kGMask ? "gmask" : "short-mask");
  os << " spans=";
  for (size_t i = 0; i < sample.spans.spans.size(); ++i) {
    if (i) os << ";";
    os << sample.spans.spans[i].start << ":" << sample.spans.spans[i].length;
  }
  os << " perm=";
  for (size_t i = 0; i < sample.spans.permutation.size(); ++i) {
    if (i) os << ",";
    os << sample.spans.permutation[i];
  }
  auto emit = [&os](const char* name, const std::vector<int>& v) {
    os << " " << name << "=";
    for (size_t i = 0; i < v.size(); ++i) {
      if (i) os << ",";
      os << v[i];
    }
  };
  emit("positions", sample.positions);
  emit("targets", sample.targets);
  emit("tokens", sample.input_tokens);
  return os.str();
}

// --- corpus stream ------------------------------------------------------------

SampleStream::SampleStream(std::vector<std::vector<int>> documents, CorruptionConfig cfg, Rng rng)
    : documents_(std::move(documents)), cfg_(std::move(cfg)), rng_(rng) {
  cfg_.validate();
  if (documents_.empty()) {
    throw ContractError(kModule, "sample stream needs a non-empty corpus");
  }
}

std::vector<std::vector<int>> SampleStream::load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError(kModule, "cannot open corpus " + path);
  std::vector<std::vector<int>> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    docs.push_back(Tokenizer::encode(line));
  }
  return docs;
}

std::vector<int> SampleStream::next_document(int min_tokens, int max_tokens) {
  for (size_t attempts = 0; attempts < documents_.size() + 1; ++attempts) {
    const std::vector<int>& doc = documents_[cursor_ % documents_.size()];
    ++cursor_;
    if (static_cast<int>(doc.size()) < min_tokens) continue;
    if (static_cast<int>(doc.size()) <= max_tokens) return doc;
    return std::vector<int>(doc.begin(), doc.begin() + max_tokens);
  }
  throw ContractError(kModule, "no document with at least " + std::to_string(min_tokens) +
                                   " tokens in the corpus");
}

CorruptedSample SampleStream::next() {
  if (rng_.bernoulli(cfg_.gmask_prob)) {
    int cap = cfg_.seq_length - 2;  // gMASK and start marker overhead
    if (rng_.bernoulli(cfg_.short_seq_prob)) cap = std::max(2, cap / 2);
    return corrupt_gmask(next_document(2, cap), cfg_, rng_);
  }
  // [MASK] mode: corrupt aggregated_samples_per_sequence short windows, then
  // pack. Each corrupted sample grows by two tokens per span, so documents
  // are capped below the window and trailing spans are dropped on overflow.
  std::vector<CorruptedSample> parts;
  for (int k = 0; k < cfg_.aggregated_samples_per_sequence; ++k) {
    int cap = std::max(8, static_cast<int>(std::floor(cfg_.short_window / 1.15)));
    if (rng_.bernoulli(cfg_.short_seq_prob)) cap = std::max(8, cap / 2);
    std::vector<int> doc = next_document(8, cap);
    SpanSet spans = sample_spans(static_cast<int>(doc.size()), cfg_, rng_);
    CorruptedSample sample = corrupt_mask(doc, spans);
    while (sample.length() > cfg_.short_window && !spans.spans.empty()) {
      spans.spans.pop_back();
      spans.permutation.clear();
      for (size_t i = 0; i < spans.spans.size(); ++i) {
        spans.permutation.push_back(static_cast<int>(i));
      }
      sample = corrupt_mask(doc, spans);
    }
    parts.push_back(std::move(sample));
  }
  return pack_samples(parts, cfg_);
}

}  // namespace glmlab
