#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "glmlab/corruption.hpp"
#include "glmlab/tensor.hpp"

namespace glmlab {

enum class AttentionVariant { kBidirectionalGlm, kUnidirectional };

struct GLMConfig {
  int num_layers = 2;
  int hidden = 64;
  int num_heads = 4;
  int ffn_hidden = 0;  // 0 selects the 8/3 GeGLU sizing
  int vocab = Tokenizer::vocab_size();
  Real dropout = 0.0;
  AttentionVariant variant = AttentionVariant::kBidirectionalGlm;
  Real init_method_std = 0.0052;
  Real layernorm_eps = 1e-5;
  Real deepnorm_alpha = 0.0;  // 0 selects (2N)^(1/2)

  void validate() const;
  int head_dim() const { return hidden / num_heads; }
  int effective_ffn_hidden() const;
  Real effective_deepnorm_alpha() const;
};

// GeGLU feed-forward width that keeps the parameter count of a vanilla 4d
// FFN: 8/3 * hidden, rounded to the nearest even multiple of the head count
// when hidden is not divisible by 3.
int default_ffn_hidden(int hidden, int num_heads);

Real deepnorm_alpha(int num_layers);        // (2N)^(1/2)
Real deepnorm_init_factor(int num_layers);  // (2N)^(-1/2)

struct LayerParams {
  Tensor qkv;       // hidden x 3*hidden (q, k, v blocks)
  Tensor out_proj;  // hidden x hidden
  Tensor ffn_w1;    // hidden x ffn_hidden
  Tensor ffn_v;     // hidden x ffn_hidden
  Tensor ffn_w2;    // ffn_hidden x hidden
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;
};

struct ParamRef {
  std::string name;
  Tensor tensor;
  bool weight_decay = true;  // layer norms and biases are decay-exempt
};

// The output head is tied to the input embedding; there is no separate head
// matrix and all bias terms live in the layer norms (initialized to zero).
struct ModelParams {
  GLMConfig config;
  Tensor embedding;  // vocab x hidden
  std::vector<LayerParams> layers;

  std::vector<ParamRef> parameters() const;
};

ModelParams init_parameters(const GLMConfig& cfg, Rng& rng);

// LayerNorm(alpha * x + sublayer_output) with affine gain/bias.
Tensor deepnorm_residual(const Tensor& x, const Tensor& sublayer_output, Real alpha,
                         const Tensor& gain, const Tensor& bias, Real eps);

// (GeLU(x W1) ⊙ x V) W2, exact erf GeLU.
Tensor geglu(const Tensor& x, const Tensor& w1, const Tensor& v, const Tensor& w2);

// Single-head attention: RoPE(q) RoPE(k)^T / sqrt(d_head), invisible entries
// filled with -inf, wide-softmax, weighted sum of v.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const int> positions, const BoolMat& mask,
                 const PrecisionPolicy& policy = {});

struct ForwardOptions {
  PrecisionPolicy policy;
  std::optional<Real> egs_alpha;  // embedding-gradient shrink; nullopt = off
  Rng* dropout_rng = nullptr;     // required when config.dropout > 0
  std::optional<AttentionVariant> variant_override;
};

// Embedding -> N x {attention + DeepNorm, GeGLU + DeepNorm} -> tied head.
Tensor forward(const ModelParams& params, const CorruptedSample& sample,
               const ForwardOptions& opts = {});

// Mean over target positions of the negative log-softmax at the true token;
// an empty target set yields 0 (the sample's target_count tells callers).
Tensor loss_blank_infilling(const Tensor& logits, const CorruptedSample& sample);

// Checkpoint: a directory of GLMT tensors plus a JSON manifest of the config.
void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& dir);

}  // namespace glmlab
