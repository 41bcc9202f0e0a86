#include "glmlab/model.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "glmlab/tensor_io.hpp"

namespace glmlab {

namespace {

constexpr const char* kModule = "glmmodel";
constexpr Real kInf = std::numeric_limits<Real>::infinity();

Tensor normal_matrix(Index rows, Index cols, Real stddev, Rng& rng) {
  Tensor t = Tensor::zeros({rows, cols}, true);
  for (Index i = 0; i < t.size(); ++i) t.values()[i] = rng.normal(0.0, stddev);
  return t;
}

Real xavier_std(Index fan_in, Index fan_out) {
  return std::sqrt(2.0 / static_cast<Real>(fan_in + fan_out));
}

}  // namespace

int default_ffn_hidden(int hidden, int num_heads) {
  if ((8 * hidden) % 3 == 0) return (8 * hidden) / 3;
  const Real target = 8.0 * static_cast<Real>(hidden) / 3.0;
  const int step = (num_heads % 2 == 0) ? num_heads : 2 * num_heads;
  const int lo = static_cast<int>(std::floor(target / step)) * step;
  const int hi = lo + step;
  return (target - lo <= hi - target && lo > 0) ? lo : hi;
}

Real deepnorm_alpha(int num_layers) { return std::sqrt(2.0 * static_cast<Real>(num_layers)); }

Real deepnorm_init_factor(int num_layers) {
  return 1.0 / std::sqrt(2.0 * static_cast<Real>(num_layers));
}

void GLMConfig::validate() const {
  if (num_layers < 1) throw ContractError(kModule, "num_layers must be >= 1");
  if (hidden < 1 || num_heads < 1 || hidden % num_heads != 0) {
    throw ContractError(kModule, "hidden must be divisible by num_heads");
  }
  if ((hidden / num_heads) % 2 != 0) {
    throw ContractError(kModule, "head dimension must be even for rotary pairs");
  }
  if (vocab <= Tokenizer::kSpanEnd) {
    throw ContractError(kModule, "vocabulary must cover the reserved control ids");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ContractError(kModule, "dropout must lie in [0, 1)");
  }
}

int GLMConfig::effective_ffn_hidden() const {
  return ffn_hidden > 0 ? ffn_hidden : default_ffn_hidden(hidden, num_heads);
}

Real GLMConfig::effective_deepnorm_alpha() const {
  return deepnorm_alpha > 0.0 ? deepnorm_alpha : glmlab::deepnorm_alpha(num_layers);
}

ModelParams init_parameters(const GLMConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams params;
  params.config = cfg;
  const Index d = cfg.hidden;
  const Index f = cfg.effective_ffn_hidden();
  const Real factor = deepnorm_init_factor(cfg.num_layers);

  params.embedding = normal_matrix(cfg.vocab, d, cfg.init_method_std, rng);

  for (int l = 0; l < cfg.num_layers; ++l) {
    LayerParams layer;
    // Fused qkv projection: the q and k blocks use the plain normal
    // initialization, the v block is Xavier-normal scaled by (2N)^(-1/2).
    layer.qkv = Tensor::zeros({d, 3 * d}, true);
    const Real v_std = xavier_std(d, d) * factor;
    {
      MatMap m = layer.qkv.matrix();
      for (Index r = 0; r < d; ++r) {
        for (Index c = 0; c < 3 * d; ++c) {
          m(r, c) = rng.normal(0.0, c < 2 * d ? cfg.init_method_std : v_std);
        }
      }
    }
    layer.out_proj = normal_matrix(d, d, xavier_std(d, d) * factor, rng);
    layer.ffn_w1 = normal_matrix(d, f, xavier_std(d, f) * factor, rng);
    layer.ffn_v = normal_matrix(d, f, xavier_std(d, f) * factor, rng);
    layer.ffn_w2 = normal_matrix(f, d, xavier_std(f, d) * factor, rng);
    layer.ln1_gain = Tensor::constant({d}, 1.0, true);
    layer.ln1_bias = Tensor::zeros({d}, true);
    layer.ln2_gain = Tensor::constant({d}, 1.0, true);
    layer.ln2_bias = Tensor::zeros({d}, true);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

std::vector<ParamRef> ModelParams::parameters() const {
  std::vector<ParamRef> refs;
  refs.push_back({"embedding", embedding, true});
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const LayerParams& layer = layers[l];
    refs.push_back({p + "qkv", layer.qkv, true});
    refs.push_back({p + "out_proj", layer.out_proj, true});
    refs.push_back({p + "ffn_w1", layer.ffn_w1, true});
    refs.push_back({p + "ffn_v", layer.ffn_v, true});
    refs.push_back({p + "ffn_w2", layer.ffn_w2, true});
    refs.push_back({p + "ln1_gain", layer.ln1_gain, false});
    refs.push_back({p + "ln1_bias", layer.ln1_bias, false});
    refs.push_back({p + "ln2_gain", layer.ln2_gain, false});
    refs.push_back({p + "ln2_bias", layer.ln2_bias, false});
  }
  return refs;
}

Tensor deepnorm_residual(const Tensor& x, const Tensor& sublayer_output, Real alpha,
                         const Tensor& gain, const Tensor& bias, Real eps) {
  if (x.shape() != sublayer_output.shape()) {
    throw DimensionError(kModule, "deepnorm_residual operands must share a shape");
  }
  return layer_norm(add(scale(x, alpha), sublayer_output), gain, bias, eps);
}

Tensor geglu(const Tensor& x, const Tensor& w1, const Tensor& v, const Tensor& w2) {
  return matmul(mul(gelu(matmul(x, w1)), matmul(x, v)), w2);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const int> positions, const BoolMat& mask,
                 const PrecisionPolicy& policy) {
  const Index d = q.cols();
  Tensor rq = rope_rotate(q, positions);
  Tensor rk = rope_rotate(k, positions);
  Tensor scores = scale(matmul(rq, transpose(rk)),
                        1.0 / (std::sqrt(static_cast<Real>(d)) * policy.softmax_prescale));
  // Under half-emulated storage the score matrix is materialized narrow; the
  // prescale division above keeps it in range and softmax_rows multiplies it
  // back inside the wide accumulation.
  scores = storage_round(scores, policy);
  scores = masked_fill(scores, mask, -kInf);
  Tensor probs = softmax_rows(scores, policy);
  return matmul(probs, v);
}

namespace {

BoolMat causal_mask(int n) {
  BoolMat mask(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) mask(i, j) = j <= i;
  }
  return mask;
}

}  // namespace

Tensor forward(const ModelParams& params, const CorruptedSample& sample,
               const ForwardOptions& opts) {
  const GLMConfig& cfg = params.config;
  cfg.validate();
  for (int tok : sample.input_tokens) {
    if (tok < 0 || tok >= cfg.vocab) {
      throw ContractError(kModule, "token id " + std::to_string(tok) +
                                       " overflows vocabulary " + std::to_string(cfg.vocab));
    }
  }
  if (cfg.dropout > 0.0 && opts.dropout_rng == nullptr) {
    throw ContractError(kModule, "dropout is enabled but no generator was supplied");
  }

  const AttentionVariant variant = opts.variant_override.value_or(cfg.variant);
  const BoolMat mask = variant == AttentionVariant::kUnidirectional
                           ? causal_mask(sample.length())
                           : build_attention_mask(sample);
  const Real alpha = cfg.effective_deepnorm_alpha();
  const Index d = cfg.hidden;
  const Index dh = cfg.head_dim();
  const PrecisionPolicy& policy = opts.policy;

  Tensor table = params.embedding;
  if (opts.egs_alpha.has_value()) {
    if (!(*opts.egs_alpha > 0.0) || *opts.egs_alpha > 1.0) {
      throw ContractError(kModule, "embedding gradient shrink alpha must lie in (0, 1]");
    }
    table = scale_grad(table, *opts.egs_alpha);
  }

  Tensor h = storage_round(embedding_rows(table, sample.input_tokens), policy);
  for (const LayerParams& layer : params.layers) {
    Tensor qkv = matmul(h, layer.qkv);
    Tensor q = slice_cols(qkv, 0, d);
    Tensor k = slice_cols(qkv, d, d);
    Tensor v = slice_cols(qkv, 2 * d, d);
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(cfg.num_heads));
    for (int head = 0; head < cfg.num_heads; ++head) {
      Tensor qh = slice_cols(q, head * dh, dh);
      Tensor kh = slice_cols(k, head * dh, dh);
      Tensor vh = slice_cols(v, head * dh, dh);
      heads.push_back(attention(qh, kh, vh, sample.positions, mask, policy));
    }
    Tensor attn = matmul(concat_cols(heads), layer.out_proj);
    if (cfg.dropout > 0.0) attn = dropout(attn, cfg.dropout, *opts.dropout_rng);
    attn = storage_round(attn, policy);
    h = storage_round(
        deepnorm_residual(h, attn, alpha, layer.ln1_gain, layer.ln1_bias, cfg.layernorm_eps),
        policy);

    Tensor ff = geglu(h, layer.ffn_w1, layer.ffn_v, layer.ffn_w2);
    if (cfg.dropout > 0.0) ff = dropout(ff, cfg.dropout, *opts.dropout_rng);
    ff = storage_round(ff, policy);
    h = storage_round(
        deepnorm_residual(h, ff, alpha, layer.ln2_gain, layer.ln2_bias, cfg.layernorm_eps),
        policy);
  }
  return matmul(h, transpose(table));  // tied output head
}

Tensor loss_blank_infilling(const Tensor& logits, const CorruptedSample& sample) {
  if (logits.rows() != sample.length()) {
    throw ContractError(kModule, "logits row count does not match the sample");
  }
  return cross_entropy_rows(logits, sample.targets);
}

// --- checkpoints ----------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  const GLMConfig& cfg = params.config;
  manifest["config"] = {
      {"num_layers", cfg.num_layers},
      {"hidden", cfg.hidden},
      {"num_heads", cfg.num_heads},
      {"ffn_hidden", cfg.effective_ffn_hidden()},
      {"vocab", cfg.vocab},
      {"dropout", cfg.dropout},
      {"variant", cfg.variant == AttentionVariant::kUnidirectional ? "unidirectional"
                                                                   : "bidirectional-glm"},
      {"init_method_std", cfg.init_method_std},
      {"layernorm_eps", cfg.layernorm_eps},
      {"deepnorm_alpha", cfg.effective_deepnorm_alpha()},
  };
  std::vector<std::string> names;
  for (const ParamRef& ref : params.parameters()) {
    const std::string file = ref.name + ".glmt";
    write_tensor(dir / file, ref.tensor);
    names.push_back(ref.name);
  }
  manifest["tensors"] = names;
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw FormatError(kModule, "cannot write manifest in " + dir.string());
}

ModelParams load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError(kModule, "missing manifest.json in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(in, nullptr, /*allow_exceptions=*/true);
  const auto& jc = manifest.at("config");
  GLMConfig cfg;
  cfg.num_layers = jc.at("num_layers").get<int>();
  cfg.hidden = jc.at("hidden").get<int>();
  cfg.num_heads = jc.at("num_heads").get<int>();
  cfg.ffn_hidden = jc.at("ffn_hidden").get<int>();
  cfg.vocab = jc.at("vocab").get<int>();
  cfg.dropout = jc.at("dropout").get<Real>();
  cfg.variant = jc.at("variant").get<std::string>() == "unidirectional"
                    ? AttentionVariant::kUnidirectional
                    : AttentionVariant::kBidirectionalGlm;
  cfg.init_method_std = jc.at("init_method_std").get<Real>();
  cfg.layernorm_eps = jc.at("layernorm_eps").get<Real>();
  cfg.deepnorm_alpha = jc.at("deepnorm_alpha").get<Real>();
  cfg.validate();

  auto load = [&dir](const std::string& name, bool requires_grad) {
    Tensor t = read_tensor(dir / (name + ".glmt"));
    Tensor out = Tensor::from_values(t.shape(), std::vector<Real>(t.values().data(),
                                                                  t.values().data() + t.size()),
                                     requires_grad);
    return out;
  };

  ModelParams params;
  params.config = cfg;
  params.embedding = load("embedding", true);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams layer;
    layer.qkv = load(p + "qkv", true);
    layer.out_proj = load(p + "out_proj", true);
    layer.ffn_w1 = load(p + "ffn_w1", true);
    layer.ffn_v = load(p + "ffn_v", true);
    layer.ffn_w2 = load(p + "ffn_w2", true);
    layer.ln1_gain = load(p + "ln1_gain", true);
    layer.ln1_bias = load(p + "ln1_bias", true);
    layer.ln2_gain = load(p + "ln2_gain", true);
    layer.ln2_bias = load(p + "ln2_bias", true);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

}  // namespace glmlab
