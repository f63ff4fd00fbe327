#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mstg/geometry.hpp"
#include "mstg/ops.hpp"

namespace mstg {

/// Architecture hyperparameters. Defaults follow the Charades-STA row of the
/// reference configuration table (W=5, L=7, 5 text layers, 4 heads).
struct ModelConfig {
  Index d_model = 256;
  Index window = 5;
  Index levels = 7;
  Index heads = 4;
  Index text_layers = 5;
  Index downsample_ratio = 2;
  Index head_kernel = 3;
  double alpha_center = 1.5;
  Index video_dim = 256;
  Index text_dim = 128;
  Index mlp_ratio = 4;
  double scale_init = 0.1;
  double ln_eps = 1e-5;

  /// Throws ValidationError naming the offending `model.*` key.
  void validate() const {
    if (d_model < 1) throw ValidationError("model.d_model", "must be >= 1");
    if (window < 1 || window % 2 == 0) throw ValidationError("model.window", "must be odd and >= 1");
    if (levels < 1) throw ValidationError("model.levels", "must be >= 1");
    if (heads < 1 || d_model % heads != 0) throw ValidationError("model.heads", "must divide model.d_model");
    if (text_layers < 0) throw ValidationError("model.text_layers", "must be >= 0");
    if (downsample_ratio != 2) {
      throw ValidationError("model.downsample_ratio", "decoding assumes stride 2^(l-1); only 2 is supported");
    }
    if (head_kernel < 1 || head_kernel % 2 == 0) throw ValidationError("model.head_kernel", "must be odd");
    if (!(alpha_center >= 0)) throw ValidationError("model.alpha_center", "must be >= 0");
    if (video_dim < 1) throw ValidationError("model.video_dim", "must be >= 1");
    if (text_dim < 1) throw ValidationError("model.text_dim", "must be >= 1");
    if (mlp_ratio < 1) throw ValidationError("model.mlp_ratio", "must be >= 1");
    if (!(ln_eps > 0)) throw ValidationError("model.ln_eps", "must be > 0");
  }
};

template <typename Scalar>
struct LinearParams {
  Tensor<Scalar> weight;  // [in x out]
  Tensor<Scalar> bias;    // [out]
};

template <typename Scalar>
struct NormParams {
  Tensor<Scalar> gain;
  Tensor<Scalar> bias;
};

template <typename Scalar>
struct AttentionParams {
  LinearParams<Scalar> query, key, value, out;
};

template <typename Scalar>
struct MlpParams {
  LinearParams<Scalar> fc1, fc2;
};

/// One video Transformer block plus the depthwise conv that follows it.
template <typename Scalar>
struct VideoBlockParams {
  NormParams<Scalar> norm_attn;
  AttentionParams<Scalar> attn;
  Tensor<Scalar> alpha;  // per-channel scale on the attention branch
  NormParams<Scalar> norm_mlp;
  MlpParams<Scalar> mlp;
  Tensor<Scalar> alpha_mlp;    // per-channel scale on the MLP branch
  Tensor<Scalar> down_kernel;  // [3, 1, D] depthwise
  Tensor<Scalar> down_bias;
};

template <typename Scalar>
struct TextLayerParams {
  NormParams<Scalar> norm_attn;
  AttentionParams<Scalar> attn;
  NormParams<Scalar> norm_mlp;
  MlpParams<Scalar> mlp;
};

/// Cross-modal fusion, shared across levels except for the per-level scale.
template <typename Scalar>
struct FusionParams {
  NormParams<Scalar> norm_video;
  NormParams<Scalar> norm_text;
  AttentionParams<Scalar> attn;
  NormParams<Scalar> norm_mlp;
  MlpParams<Scalar> mlp;
  std::vector<Tensor<Scalar>> beta;  // one per level 1..L
};

/// Two-layer 1-D conv head: conv -> ReLU -> conv.
template <typename Scalar>
struct ConvHeadParams {
  Tensor<Scalar> kernel1, bias1, kernel2, bias2;
};

template <typename Scalar>
struct GroundingParams {
  Tensor<Scalar> proj_kernel;  // [3, D_v, D]
  Tensor<Scalar> proj_bias;
  LinearParams<Scalar> text_in;
  std::vector<VideoBlockParams<Scalar>> blocks;
  std::vector<TextLayerParams<Scalar>> text;
  FusionParams<Scalar> fusion;
  ConvHeadParams<Scalar> cls;
  ConvHeadParams<Scalar> reg;
};

namespace detail {

template <typename Scalar, typename F>
void visit(const std::string& p, LinearParams<Scalar>& x, F& f) {
  f(p + ".weight", x.weight);
  f(p + ".bias", x.bias);
}
template <typename Scalar, typename F>
void visit(const std::string& p, NormParams<Scalar>& x, F& f) {
  f(p + ".gain", x.gain);
  f(p + ".bias", x.bias);
}
template <typename Scalar, typename F>
void visit(const std::string& p, AttentionParams<Scalar>& x, F& f) {
  visit(p + ".query", x.query, f);
  visit(p + ".key", x.key, f);
  visit(p + ".value", x.value, f);
  visit(p + ".out", x.out, f);
}
template <typename Scalar, typename F>
void visit(const std::string& p, MlpParams<Scalar>& x, F& f) {
  visit(p + ".fc1", x.fc1, f);
  visit(p + ".fc2", x.fc2, f);
}
template <typename Scalar, typename F>
void visit(const std::string& p, ConvHeadParams<Scalar>& x, F& f) {
  f(p + ".kernel1", x.kernel1);
  f(p + ".bias1", x.bias1);
  f(p + ".kernel2", x.kernel2);
  f(p + ".bias2", x.bias2);
}

}  // namespace detail

/// Calls f(name, tensor) for every parameter in a fixed order.
template <typename Scalar, typename F>
void for_each_parameter(GroundingParams<Scalar>& p, F&& f) {
  f(std::string("video.proj.kernel"), p.proj_kernel);
  f(std::string("video.proj.bias"), p.proj_bias);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto& b = p.blocks[l];
    const std::string pre = "video.block" + std::to_string(l + 1);
    detail::visit(pre + ".norm_attn", b.norm_attn, f);
    detail::visit(pre + ".attn", b.attn, f);
    f(pre + ".alpha", b.alpha);
    detail::visit(pre + ".norm_mlp", b.norm_mlp, f);
    detail::visit(pre + ".mlp", b.mlp, f);
    f(pre + ".alpha_mlp", b.alpha_mlp);
    f(pre + ".down.kernel", b.down_kernel);
    f(pre + ".down.bias", b.down_bias);
  }
  detail::visit(std::string("text.in"), p.text_in, f);
  for (std::size_t l = 0; l < p.text.size(); ++l) {
    auto& t = p.text[l];
    const std::string pre = "text.layer" + std::to_string(l + 1);
    detail::visit(pre + ".norm_attn", t.norm_attn, f);
    detail::visit(pre + ".attn", t.attn, f);
    detail::visit(pre + ".norm_mlp", t.norm_mlp, f);
    detail::visit(pre + ".mlp", t.mlp, f);
  }
  detail::visit(std::string("fusion.norm_video"), p.fusion.norm_video, f);
  detail::visit(std::string("fusion.norm_text"), p.fusion.norm_text, f);
  detail::visit(std::string("fusion.attn"), p.fusion.attn, f);
  detail::visit(std::string("fusion.norm_mlp"), p.fusion.norm_mlp, f);
  detail::visit(std::string("fusion.mlp"), p.fusion.mlp, f);
  for (std::size_t l = 0; l < p.fusion.beta.size(); ++l) {
    f("fusion.beta" + std::to_string(l + 1), p.fusion.beta[l]);
  }
  detail::visit(std::string("head.cls"), p.cls, f);
  detail::visit(std::string("head.reg"), p.reg, f);
}

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

template <typename Scalar>
Tensor<Scalar> uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<Scalar> t(std::move(shape), true);
  for (Index i = 0; i < t.numel(); ++i) t.data().data()[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
Tensor<Scalar> filled(Shape shape, double value) {
  Tensor<Scalar> t(std::move(shape), true);
  t.data().setConstant(static_cast<Scalar>(value));
  return t;
}

template <typename Scalar>
LinearParams<Scalar> init_linear(Index in, Index out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  return {uniform_tensor<Scalar>({in, out}, bound, rng), filled<Scalar>({out}, 0.0)};
}

template <typename Scalar>
NormParams<Scalar> init_norm(Index d) {
  return {filled<Scalar>({d}, 1.0), filled<Scalar>({d}, 0.0)};
}

template <typename Scalar>
AttentionParams<Scalar> init_attention(Index d, std::mt19937_64& rng) {
  AttentionParams<Scalar> a;
  a.query = init_linear<Scalar>(d, d, rng);
  a.key = init_linear<Scalar>(d, d, rng);
  a.value = init_linear<Scalar>(d, d, rng);
  a.out = init_linear<Scalar>(d, d, rng);
  return a;
}

template <typename Scalar>
MlpParams<Scalar> init_mlp(Index d, Index hidden, std::mt19937_64& rng) {
  MlpParams<Scalar> m;
  m.fc1 = init_linear<Scalar>(d, hidden, rng);
  m.fc2 = init_linear<Scalar>(hidden, d, rng);
  return m;
}

template <typename Scalar>
Tensor<Scalar> init_conv(Index k, Index in, Index out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(k * in + out));
  return uniform_tensor<Scalar>({k, in, out}, bound, rng);
}

}  // namespace detail

/// Draws a fresh parameter set. The classification head starts at a 1%
/// foreground prior; the regression head starts with a positive bias so its
/// output ReLU is active.
template <typename Scalar>
GroundingParams<Scalar> init_parameters(const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  using namespace detail;
  const Index d = cfg.d_model;
  const Index hidden = cfg.mlp_ratio * d;
  GroundingParams<Scalar> p;
  p.proj_kernel = init_conv<Scalar>(3, cfg.video_dim, d, rng);
  p.proj_bias = filled<Scalar>({d}, 0.0);
  for (Index l = 0; l < cfg.levels; ++l) {
    VideoBlockParams<Scalar> b;
    b.norm_attn = init_norm<Scalar>(d);
    b.attn = init_attention<Scalar>(d, rng);
    b.alpha = filled<Scalar>({d}, cfg.scale_init);
    b.norm_mlp = init_norm<Scalar>(d);
    b.mlp = init_mlp<Scalar>(d, hidden, rng);
    b.alpha_mlp = filled<Scalar>({d}, cfg.scale_init);
    Matrix<Scalar> smooth(3, d);
    smooth.row(0).setConstant(Scalar(0.25));
    smooth.row(1).setConstant(Scalar(0.5));
    smooth.row(2).setConstant(Scalar(0.25));
    b.down_kernel = Tensor<Scalar>({3, 1, d}, smooth, true);
    b.down_bias = filled<Scalar>({d}, 0.0);
    p.blocks.push_back(std::move(b));
  }
  p.text_in = init_linear<Scalar>(cfg.text_dim, d, rng);
  for (Index l = 0; l < cfg.text_layers; ++l) {
    TextLayerParams<Scalar> t;
    t.norm_attn = init_norm<Scalar>(d);
    t.attn = init_attention<Scalar>(d, rng);
    t.norm_mlp = init_norm<Scalar>(d);
    t.mlp = init_mlp<Scalar>(d, hidden, rng);
    p.text.push_back(std::move(t));
  }
  p.fusion.norm_video = init_norm<Scalar>(d);
  p.fusion.norm_text = init_norm<Scalar>(d);
  p.fusion.attn = init_attention<Scalar>(d, rng);
  p.fusion.norm_mlp = init_norm<Scalar>(d);
  p.fusion.mlp = init_mlp<Scalar>(d, hidden, rng);
  for (Index l = 0; l < cfg.levels; ++l) p.fusion.beta.push_back(filled<Scalar>({d}, cfg.scale_init));
  const Index k = cfg.head_kernel;
  p.cls = {init_conv<Scalar>(k, d, d, rng), filled<Scalar>({d}, 0.0), init_conv<Scalar>(k, d, 1, rng),
           filled<Scalar>({1}, -std::log((1.0 - 0.01) / 0.01))};
  p.reg = {init_conv<Scalar>(k, d, d, rng), filled<Scalar>({d}, 0.0), init_conv<Scalar>(k, d, 2, rng),
           filled<Scalar>({2}, 1.0)};
  return p;
}

// ---------------------------------------------------------------------------
// Forward building blocks

template <typename Scalar>
Var<Scalar> apply_linear(const Var<Scalar>& x, LinearParams<Scalar>& p) {
  Tape<Scalar>& t = x.tape();
  return linear(x, t.leaf(p.weight), t.leaf(p.bias));
}

template <typename Scalar>
Var<Scalar> apply_norm(const Var<Scalar>& x, NormParams<Scalar>& p, double eps) {
  Tape<Scalar>& t = x.tape();
  return layer_norm(x, t.leaf(p.gain), t.leaf(p.bias), static_cast<Scalar>(eps));
}

template <typename Scalar>
Var<Scalar> apply_mlp(const Var<Scalar>& x, MlpParams<Scalar>& p) {
  return apply_linear(gelu(apply_linear(x, p.fc1)), p.fc2);
}

/// Projected multi-head attention; `queries` attend over `context`.
template <typename Scalar>
Var<Scalar> apply_attention(const Var<Scalar>& queries, const Var<Scalar>& context, AttentionParams<Scalar>& p,
                            Index heads, Index window = 0, const std::vector<bool>& key_mask = {}) {
  auto q = apply_linear(queries, p.query);
  auto k = apply_linear(context, p.key);
  auto v = apply_linear(context, p.value);
  return apply_linear(multi_head_attention(q, k, v, heads, window, key_mask), p.out);
}

/// Same-padded conv1d with bias.
template <typename Scalar>
Var<Scalar> apply_conv(const Var<Scalar>& x, Tensor<Scalar>& kernel, Tensor<Scalar>& bias, Index stride = 1,
                       bool depthwise = false) {
  Tape<Scalar>& t = x.tape();
  const Index k = kernel.shape()[0];
  return add_row(conv1d(x, t.leaf(kernel), stride, (k - 1) / 2, depthwise), t.leaf(bias));
}

/// Z^0 = ReLU(conv_k3(v)): clip features [T x D_v] to [T x D].
template <typename Scalar>
Var<Scalar> project_video(const Var<Scalar>& video, GroundingParams<Scalar>& p, const ModelConfig& cfg) {
  if (video.cols() != cfg.video_dim) {
    throw ShapeError("project_video: expected " + std::to_string(cfg.video_dim) + " feature dims, got " +
                     std::to_string(video.cols()));
  }
  return relu(apply_conv(video, p.proj_kernel, p.proj_bias));
}

/// Pre-norm Transformer block with windowed self-attention and per-channel
/// branch scales:
///   Zbar = alpha * LocalMSA(LN(Z)) + Z
///   Zhat = alpha_mlp * MLP(LN(Zbar)) + Zbar
template <typename Scalar>
Var<Scalar> local_msa_block(const Var<Scalar>& z, VideoBlockParams<Scalar>& b, const ModelConfig& cfg) {
  Tape<Scalar>& t = z.tape();
  auto normed = apply_norm(z, b.norm_attn, cfg.ln_eps);
  auto attended = apply_attention(normed, normed, b.attn, cfg.heads, cfg.window);
  auto zbar = add(mul_row(attended, t.leaf(b.alpha)), z);
  auto mlp = apply_mlp(apply_norm(zbar, b.norm_mlp, cfg.ln_eps), b.mlp);
  return add(mul_row(mlp, t.leaf(b.alpha_mlp)), zbar);
}

/// Strided depthwise conv (k=3, same padding). Output length ceil(T/stride).
template <typename Scalar>
Var<Scalar> downsample(const Var<Scalar>& z, VideoBlockParams<Scalar>& b, Index stride) {
  if (stride < 1) throw ShapeError("downsample: stride must be >= 1");
  return apply_conv(z, b.down_kernel, b.down_bias, stride, true);
}

/// Encoder outputs Z^0..Z^L recorded on one tape.
template <typename Scalar>
struct FeaturePyramid {
  std::vector<Var<Scalar>> levels;
  std::vector<Index> lengths;
  std::vector<Index> strides;

  Index num_levels() const { return static_cast<Index>(levels.size()) - 1; }
};

template <typename Scalar>
FeaturePyramid<Scalar> encode_video_pyramid(const Var<Scalar>& video, GroundingParams<Scalar>& p,
                                            const ModelConfig& cfg) {
  FeaturePyramid<Scalar> out;
  auto z = project_video(video, p, cfg);
  out.levels.push_back(z);
  out.lengths.push_back(z.rows());
  out.strides.push_back(1);
  for (Index l = 1; l <= cfg.levels; ++l) {
    auto& block = p.blocks[static_cast<std::size_t>(l - 1)];
    z = downsample(local_msa_block(z, block, cfg), block, block_stride(l, cfg.downsample_ratio));
    out.levels.push_back(z);
    out.lengths.push_back(z.rows());
    out.strides.push_back(level_stride(l, cfg.downsample_ratio));
  }
  return out;
}

template <typename Scalar>
struct TextEncoding {
  Var<Scalar> tokens;      // [K x D]
  std::vector<bool> mask;  // true = real token
};

/// Fixed sinusoidal position codes [length x d].
template <typename Scalar>
Matrix<Scalar> sinusoidal_positions(Index length, Index d) {
  Matrix<Scalar> pe(length, d);
  for (Index pos = 0; pos < length; ++pos) {
    for (Index i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      pe(pos, i) = static_cast<Scalar>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

/// Query word embeddings [K x D_q] -> [K x D]: input projection plus
/// positional codes, then pre-norm self-attention/MLP layers. Masked tokens
/// are excluded as attention keys.
template <typename Scalar>
TextEncoding<Scalar> encode_text(const Var<Scalar>& words, std::vector<bool> mask, GroundingParams<Scalar>& p,
                                 const ModelConfig& cfg) {
  const Index k = words.rows();
  if (words.cols() != cfg.text_dim) {
    throw ShapeError("encode_text: expected " + std::to_string(cfg.text_dim) + " word dims, got " +
                     std::to_string(words.cols()));
  }
  if (mask.empty()) mask.assign(static_cast<std::size_t>(k), true);
  if (static_cast<Index>(mask.size()) != k) throw ShapeError("encode_text: mask length differs from token count");
  if (std::none_of(mask.begin(), mask.end(), [](bool m) { return m; })) {
    throw ShapeError("encode_text: every token is masked");
  }
  Tape<Scalar>& t = words.tape();
  auto x = add(apply_linear(words, p.text_in), t.constant(sinusoidal_positions<Scalar>(k, cfg.d_model)));
  for (auto& layer : p.text) {
    auto normed = apply_norm(x, layer.norm_attn, cfg.ln_eps);
    x = add(apply_attention(normed, normed, layer.attn, cfg.heads, 0, mask), x);
    x = add(apply_mlp(apply_norm(x, layer.norm_mlp, cfg.ln_eps), layer.mlp), x);
  }
  return {x, std::move(mask)};
}

/// Cross-modal fusion of levels 1..L with the encoded query:
///   Ztil = LN(Z^l), Etil = LN(E)
///   O^l  = Z^l + CrossAttn(Ztil -> Etil)
///   X^l  = beta^l * MLP(LN(O^l)) + O^l
/// Returns X^1..X^L (index 0 holds level 1).
template <typename Scalar>
std::vector<Var<Scalar>> fuse_cross_modal(const FeaturePyramid<Scalar>& pyramid, const TextEncoding<Scalar>& text,
                                          GroundingParams<Scalar>& p, const ModelConfig& cfg) {
  Tape<Scalar>& t = text.tokens.tape();
  auto& f = p.fusion;
  auto etil = apply_norm(text.tokens, f.norm_text, cfg.ln_eps);
  std::vector<Var<Scalar>> out;
  for (Index l = 1; l <= pyramid.num_levels(); ++l) {
    const auto& z = pyramid.levels[static_cast<std::size_t>(l)];
    auto ztil = apply_norm(z, f.norm_video, cfg.ln_eps);
    auto o = add(z, apply_attention(ztil, etil, f.attn, cfg.heads, 0, text.mask));
    auto mlp = apply_mlp(apply_norm(o, f.norm_mlp, cfg.ln_eps), f.mlp);
    out.push_back(add(mul_row(mlp, t.leaf(f.beta[static_cast<std::size_t>(l - 1)])), o));
  }
  return out;
}

template <typename Scalar>
Var<Scalar> apply_conv_head(const Var<Scalar>& x, ConvHeadParams<Scalar>& h) {
  return apply_conv(relu(apply_conv(x, h.kernel1, h.bias1)), h.kernel2, h.bias2);
}

/// Per-step foreground probability [T^l x 1].
template <typename Scalar>
Var<Scalar> head_classify(const Var<Scalar>& x, GroundingParams<Scalar>& p) {
  return sigmoid(apply_conv_head(x, p.cls));
}

/// Per-step (d_start, d_end) >= 0 in level-stride units [T^l x 2].
template <typename Scalar>
Var<Scalar> head_regress(const Var<Scalar>& x, GroundingParams<Scalar>& p) {
  return relu(apply_conv_head(x, p.reg));
}

template <typename Scalar>
struct QueryHeads {
  std::vector<Var<Scalar>> scores;   // levels 1..L, [T^l x 1]
  std::vector<Var<Scalar>> offsets;  // levels 1..L, [T^l x 2]
};

template <typename Scalar>
QueryHeads<Scalar> ground_query(const FeaturePyramid<Scalar>& pyramid, const TextEncoding<Scalar>& text,
                                GroundingParams<Scalar>& p, const ModelConfig& cfg) {
  QueryHeads<Scalar> out;
  for (const auto& x : fuse_cross_modal(pyramid, text, p, cfg)) {
    out.scores.push_back(head_classify(x, p));
    out.offsets.push_back(head_regress(x, p));
  }
  return out;
}

/// Config plus parameters.
template <typename Scalar>
struct GroundingModel {
  ModelConfig config;
  GroundingParams<Scalar> params;

  static GroundingModel create(const ModelConfig& cfg, std::mt19937_64& rng) {
    return {cfg, init_parameters<Scalar>(cfg, rng)};
  }

  Index parameter_count() {
    Index n = 0;
    for_each_parameter(params, [&](const std::string&, Tensor<Scalar>& t) { n += t.numel(); });
    return n;
  }
};

}  // namespace mstg
