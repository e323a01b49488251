#pragma once

#include "casd/encoders.hpp"

namespace casd {

// Residual block whose normalizations are style-modulated: each conv output
// is instance-normalized, then scaled/shifted by per-channel (gamma, beta)
// taken from the modulation vector. Uses 4C modulation values per block.
template <typename T>
struct AdainResBlock {
  Conv2dLayer<T> c1, c2;
  int channels = 0;

  AdainResBlock() = default;
  AdainResBlock(ParameterStore<T>& ps, const std::string& name, int c) : channels(c) {
    c1 = Conv2dLayer<T>(ps, name + ".conv1", 3, 3, c, c, 1);
    c2 = Conv2dLayer<T>(ps, name + ".conv2", 3, 3, c, c, 1);
  }

  // mod is (B, 4C): gamma1, beta1, gamma2, beta2
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& mod) const {
    using namespace ops;
    int c = channels;
    if (mod.rank() != 2 || mod.shape[1] != 4 * c)
      fail("adain resblock: modulation must be (B," + std::to_string(4 * c) + "), got " +
           shape_str(mod.shape));
    Tensor<T> y = adain(c1(x), slice(mod, 1, 0, c), slice(mod, 1, c, c));
    y = adain(c2(relu(y)), slice(mod, 1, 2 * c, c), slice(mod, 1, 3 * c, c));
    return add(x, y);
  }
};

// Spatially-adaptive residual block: scale and offset maps are predicted
// from the pose-aligned feature by 3x3 conv heads and applied around a
// parameter-free instance normalization.
template <typename T>
struct AfnResBlock {
  Conv2dLayer<T> conv, head_gamma, head_beta;

  AfnResBlock() = default;
  AfnResBlock(ParameterStore<T>& ps, const std::string& name, int c) {
    conv = Conv2dLayer<T>(ps, name + ".conv", 3, 3, c, c, 1);
    head_gamma = Conv2dLayer<T>(ps, name + ".gamma", 3, 3, c, c, 1);
    head_beta = Conv2dLayer<T>(ps, name + ".beta", 3, 3, c, c, 1);
  }

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& cond) const {
    using namespace ops;
    Tensor<T> gamma = head_gamma(cond);
    Tensor<T> beta = head_beta(cond);
    while (gamma.shape[1] < x.shape[1]) {  // condition sits at or below x's resolution
      gamma = upsample_nearest2x(gamma);
      beta = upsample_nearest2x(beta);
    }
    if (gamma.shape[1] != x.shape[1] || gamma.shape[2] != x.shape[2])
      fail("afn resblock: condition " + shape_str(cond.shape) + " does not upsample onto " +
           shape_str(x.shape));
    Tensor<T> y = add(mul(instance_norm(conv(x)), gamma), beta);
    return add(x, y);
  }
};

// One attention block: self attention ties the per-semantic style tokens
// together, cross attention distributes them over the pose grid. The
// attention matrix AM is returned alongside the updated feature; it is the
// soft parsing prediction.
template <typename T>
struct CasdBlock {
  // self attention: queries and keys are the raw tokens, only V is learned
  Tensor<T> w_v_self;
  SwLin<T> norm_self;
  LinearLayer<T> ffn_self_a, ffn_self_b;
  Tensor<T> alpha_attn;  // on the self-attention residual
  // cross attention
  Tensor<T> w_q, w_k, w_v;
  Conv2dLayer<T> route;  // 1x1 head: pose feature -> per-semantic logits
  SwLin<T> norm_cross;
  LinearLayer<T> ffn_cross_a, ffn_cross_b;
  Tensor<T> alpha_cross;  // on the cross-attention residual
  Tensor<T> alpha_ffn;    // on the FFN residual
  int channels = 0, num_semantics = 0;

  CasdBlock() = default;
  CasdBlock(ParameterStore<T>& ps, const std::string& name, const ModelConfig& cfg)
      : channels(cfg.channels), num_semantics(cfg.num_semantics) {
    int c = cfg.channels;
    w_v_self = ps.add(name + ".self.wv", {c, c}, Init::Normal002);
    norm_self = SwLin<T>(ps, name + ".self.norm", c);
    ffn_self_a = LinearLayer<T>(ps, name + ".self.ffn_a", c, 2 * c);
    ffn_self_b = LinearLayer<T>(ps, name + ".self.ffn_b", 2 * c, c);
    alpha_attn = ps.add(name + ".alpha_attn", {1}, Init::One);
    w_q = ps.add(name + ".cross.wq", {c, c}, Init::Normal002);
    w_k = ps.add(name + ".cross.wk", {c, c}, Init::Normal002);
    w_v = ps.add(name + ".cross.wv", {c, c}, Init::Normal002);
    route = Conv2dLayer<T>(ps, name + ".route", 1, 1, c, cfg.num_semantics, 1);
    norm_cross = SwLin<T>(ps, name + ".cross.norm", c);
    ffn_cross_a = LinearLayer<T>(ps, name + ".cross.ffn_a", c, 2 * c);
    ffn_cross_b = LinearLayer<T>(ps, name + ".cross.ffn_b", 2 * c, c);
    alpha_cross = ps.add(name + ".alpha_cross", {1}, Init::One);
    alpha_ffn = ps.add(name + ".alpha_ffn", {1}, Init::One);
  }

  // (B,Ns,C) -> (B,Ns,C); scaled dot-product over the token set with a
  // residual, then an FFN with a second residual
  Tensor<T> self_attention(const Tensor<T>& styles) const {
    using namespace ops;
    T inv_sqrt_c = T(1) / std::sqrt(T(channels));
    Tensor<T> scores = mul_scalar(matmul(styles, styles, true), inv_sqrt_c);
    Tensor<T> att = softmax(scores, 2);
    Tensor<T> v = matmul(styles, w_v_self);
    Tensor<T> f_att = matmul(att, v);
    Tensor<T> h = norm_self(add(styles, mul(f_att, alpha_attn)));
    return add(h, ffn_self_b(relu(ffn_self_a(h))));
  }

  // query_map: (B,h,w,C) feature the queries are drawn from; pose: (B,h,w,C);
  // styles: refined tokens (B,Ns,C). Returns the updated feature and AM.
  std::pair<Tensor<T>, Tensor<T>> cross_attention(const Tensor<T>& query_map,
                                                  const Tensor<T>& pose, const Tensor<T>& styles,
                                                  bool pose_routing) const {
    using namespace ops;
    if (styles.shape[1] != num_semantics)
      fail("cross attention: routing head expects " + std::to_string(num_semantics) +
           " semantics, styles carry " + std::to_string(styles.shape[1]));
    int B = query_map.shape[0], h = query_map.shape[1], w = query_map.shape[2];
    int hw = h * w;
    T inv_sqrt_c = T(1) / std::sqrt(T(channels));

    Tensor<T> q = matmul(reshape(query_map, {B, hw, channels}), w_q);
    Tensor<T> k = matmul(styles, w_k);
    Tensor<T> v = matmul(styles, w_v);
    Tensor<T> logits = mul_scalar(matmul(q, k, true), inv_sqrt_c);  // (B,hw,Ns)
    if (pose_routing) logits = add(logits, reshape(route(pose), {B, hw, num_semantics}));
    Tensor<T> am = softmax(logits, 2);
    Tensor<T> f_att = reshape(matmul(am, v), {B, h, w, channels});
    Tensor<T> g = norm_cross(add(pose, mul(f_att, alpha_cross)));
    Tensor<T> g_tok = reshape(g, {B, hw, channels});
    Tensor<T> ffn = reshape(ffn_cross_b(relu(ffn_cross_a(g_tok))), {B, h, w, channels});
    Tensor<T> f_ps = add(g, mul(ffn, alpha_ffn));
    return {f_ps, reshape(am, {B, h, w, num_semantics})};
  }
};

template <typename T>
struct GeneratorOutput {
  Tensor<T> image;                     // (B,H,W,3), tanh range
  std::vector<Tensor<T>> attention;   // per block, (B,h,w,Ns), row-stochastic
  Tensor<T> parsing_soft;             // last AM upsampled to (B,H,W,Ns)
};

template <typename T>
struct Generator {
  ModelConfig cfg;
  ParameterStore<T> params;
  SurrogateFeatureExtractor<T> surrogate;
  StyleEncoder<T> style_enc;
  PoseEncoder<T> pose_enc;
  StyleMlp<T> mlp;
  std::vector<AdainResBlock<T>> adain_blocks;
  std::vector<CasdBlock<T>> casd_blocks;
  std::vector<AfnResBlock<T>> afn_blocks;
  Conv2dLayer<T> dec_conv1, dec_conv2, dec_img;
  LayerNorm<T> dec_ln1, dec_ln2;

  Generator(const ModelConfig& config, uint64_t seed)
      : cfg(config), params(seed), surrogate(config) {
    cfg.validate();
    int c = cfg.channels;
    style_enc = StyleEncoder<T>(params, cfg);
    pose_enc = PoseEncoder<T>(params, cfg);
    mlp = StyleMlp<T>(params, cfg);
    for (int i = 0; i < cfg.num_adain_blocks; ++i)
      adain_blocks.emplace_back(params, "adain" + std::to_string(i), c);
    for (int i = 0; i < cfg.num_casd_blocks; ++i)
      casd_blocks.emplace_back(params, "casd" + std::to_string(i), cfg);
    for (int i = 0; i < cfg.num_afn_blocks; ++i)
      afn_blocks.emplace_back(params, "afn" + std::to_string(i), c);
    dec_conv1 = Conv2dLayer<T>(params, "dec.conv1", 5, 5, c, c / 2, 1);
    dec_ln1 = LayerNorm<T>(params, "dec.ln1", c / 2);
    dec_conv2 = Conv2dLayer<T>(params, "dec.conv2", 5, 5, c / 2, c / 4, 1);
    dec_ln2 = LayerNorm<T>(params, "dec.ln2", c / 4);
    dec_img = Conv2dLayer<T>(params, "dec.img", 7, 7, c / 4, 3, 1);
  }

  Tensor<T> encode_style(const Tensor<T>& image, const Tensor<T>& parsing) const {
    return style_enc(image, parsing, surrogate);
  }

  GeneratorOutput<T> generate_from_styles(const Tensor<T>& styles,
                                          const Tensor<T>& pose_heatmaps) const {
    using namespace ops;
    if (pose_heatmaps.rank() != 4 || pose_heatmaps.shape[1] != cfg.height ||
        pose_heatmaps.shape[2] != cfg.width ||
        pose_heatmaps.shape[3] != PoseEncoder<T>::synth_channels())
      fail("generator: pose heatmaps must be (B," + std::to_string(cfg.height) + "," +
           std::to_string(cfg.width) + ",30), got " + shape_str(pose_heatmaps.shape));
    int c = cfg.channels;

    Tensor<T> mod = mlp(styles);
    Tensor<T> f_p = pose_enc(pose_heatmaps);

    Tensor<T> f_crs = f_p;
    for (int i = 0; i < cfg.num_adain_blocks; ++i)
      f_crs = adain_blocks[size_t(i)](f_crs, slice(mod, 1, i * 4 * c, 4 * c));

    GeneratorOutput<T> out;
    Tensor<T> query = f_crs;
    for (int i = 0; i < cfg.num_casd_blocks; ++i) {
      const CasdBlock<T>& blk = casd_blocks[size_t(i)];
      Tensor<T> refined = cfg.self_attention ? blk.self_attention(styles) : styles;
      auto [f_ps, am] = blk.cross_attention(query, f_p, refined, cfg.pose_routing);
      out.attention.push_back(am);
      query = f_ps;
    }

    Tensor<T> x = query;  // the last block's pose-aligned feature
    for (const AfnResBlock<T>& blk : afn_blocks) x = blk(x, query);

    x = relu(dec_ln1(dec_conv1(upsample_nearest2x(x))));
    x = relu(dec_ln2(dec_conv2(upsample_nearest2x(x))));
    out.image = tanh_op(dec_img(x));
    out.parsing_soft = upsample_nearest(out.attention.back(), cfg.height / cfg.feat_h());
    return out;
  }

  GeneratorOutput<T> generate(const Tensor<T>& image_s, const Tensor<T>& parsing_s,
                              const Tensor<T>& pose_heatmaps_t) const {
    return generate_from_styles(encode_style(image_s, parsing_s), pose_heatmaps_t);
  }
};

// hard per-pixel decision from a soft map: argmax one-hot, ties to the
// lowest channel index
template <typename T>
Tensor<T> hard_parsing(const Tensor<T>& soft) {
  if (soft.rank() != 4) fail("hard_parsing: expected (B,H,W,Ns), got " + shape_str(soft.shape));
  int ns = soft.shape[3];
  Tensor<T> hard = Tensor<T>::zeros(soft.shape);
  const T* s = soft.ptr();
  T* d = hard.ptr();
  int64_t cells = soft.numel() / ns;
  for (int64_t i = 0; i < cells; ++i) {
    const T* row = s + i * ns;
    int best = 0;
    for (int c = 1; c < ns; ++c)
      if (row[c] > row[best]) best = c;
    d[i * ns + best] = T(1);
  }
  return hard;
}

}  // namespace casd
