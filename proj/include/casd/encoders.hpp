#pragma once

#include "casd/nn.hpp"

namespace casd {

// Architecture hyper-parameters. The reference schedule is C=64 at 64x48
// with 8 semantics; the attention feature grid sits at 1/4 resolution.
struct ModelConfig {
  int height = 64;
  int width = 48;
  int channels = 64;  // C, the style/pose feature width
  int num_semantics = 8;
  int num_casd_blocks = 2;
  int num_adain_blocks = 2;
  int num_afn_blocks = 2;
  int num_pose_resblocks = 4;
  bool self_attention = true;
  bool pose_routing = true;     // additive routing logits predicted from F_p
  bool amce_all_blocks = true;  // attention supervision on every block vs last only
  uint64_t surrogate_seed = 0x5EEDu;

  int feat_h() const { return height / 4; }
  int feat_w() const { return width / 4; }
  int modulated_channels() const { return num_adain_blocks * 2 * channels; }

  void validate() const {
    if (height % 4 != 0 || width % 4 != 0)
      fail("resolution " + std::to_string(height) + "x" + std::to_string(width) +
           " must be divisible by 4");
    if (channels % 4 != 0 || channels < 4) fail("channel width must be a positive multiple of 4");
    if (num_semantics < 1) fail("need at least one semantic");
    if (num_casd_blocks < 1) fail("need at least one attention block");
  }
};

// Frozen, seed-initialized 4-stage conv pyramid. Stage outputs stand in
// everywhere a pretrained feature stack would be tapped: the style encoder's
// side branches, the feature-space losses, and the evaluation statistics.
template <typename T>
struct SurrogateFeatureExtractor {
  ParameterStore<T> store;
  Conv2dLayer<T> conv[4];

  explicit SurrogateFeatureExtractor(const ModelConfig& cfg) : store(cfg.surrogate_seed) {
    int c = cfg.channels;
    int ch[5] = {3, c / 4, c / 2, c, 2 * c};
    for (int s = 0; s < 4; ++s)
      conv[s] = Conv2dLayer<T>(store, "surrogate.conv" + std::to_string(s + 1), 3, 3, ch[s],
                               ch[s + 1], s == 0 ? 1 : 2, /*trainable=*/false);
  }

  // four feature maps at 1, 1/2, 1/4, 1/8 resolution
  std::vector<Tensor<T>> operator()(const Tensor<T>& image) const {
    std::vector<Tensor<T>> stages;
    Tensor<T> x = image;
    for (int s = 0; s < 4; ++s) {
      x = ops::relu(conv[s](x));
      stages.push_back(x);
    }
    return stages;
  }
};

// Per-semantic style encoder, shared weights across semantics. Each semantic
// sees the image masked to its region; surrogate features of the same masked
// image join by channel concat at matching resolutions. Global average
// pooling and a projection produce one C-vector per semantic.
template <typename T>
struct StyleEncoder {
  Conv2dLayer<T> conv1, conv2, conv3, conv4;
  LinearLayer<T> proj;
  int num_semantics = 0;

  StyleEncoder() = default;
  StyleEncoder(ParameterStore<T>& ps, const ModelConfig& cfg) : num_semantics(cfg.num_semantics) {
    int c = cfg.channels;
    conv1 = Conv2dLayer<T>(ps, "es.conv1", 7, 7, 3, c / 4, 1);
    conv2 = Conv2dLayer<T>(ps, "es.conv2", 4, 4, c / 2, c / 2, 2);
    conv3 = Conv2dLayer<T>(ps, "es.conv3", 4, 4, c, c, 2);
    conv4 = Conv2dLayer<T>(ps, "es.conv4", 4, 4, 2 * c, 2 * c, 2);
    proj = LinearLayer<T>(ps, "es.proj", 4 * c, c);
  }

  // image (B,H,W,3) + parsing (B,H,W,Ns) -> styles (B,Ns,C)
  Tensor<T> operator()(const Tensor<T>& image, const Tensor<T>& parsing,
                       const SurrogateFeatureExtractor<T>& surrogate) const {
    using namespace ops;
    if (image.rank() != 4 || parsing.rank() != 4 || parsing.shape[3] != num_semantics)
      fail("style encoder: image " + shape_str(image.shape) + " / parsing " +
           shape_str(parsing.shape) + " mismatch");
    int B = image.shape[0];

    // fold semantics into the batch: one masked image per (semantic, sample)
    std::vector<Tensor<T>> masked;
    masked.reserve(size_t(num_semantics));
    for (int s = 0; s < num_semantics; ++s)
      masked.push_back(mul(image, slice(parsing, 3, s, 1)));
    Tensor<T> x = concat(masked, 0);  // (Ns*B, H, W, 3)

    std::vector<Tensor<T>> side = surrogate(x);
    Tensor<T> h = relu(conv1(x));
    h = relu(conv2(concat<T>({h, side[0]}, 3)));
    h = relu(conv3(concat<T>({h, side[1]}, 3)));
    h = relu(conv4(concat<T>({h, side[2]}, 3)));
    h = concat<T>({h, side[3]}, 3);
    Tensor<T> pooled = global_avg_pool(h);          // (Ns*B, 4C)
    Tensor<T> rows = proj(pooled);                  // (Ns*B, C)
    rows = reshape(rows, {num_semantics, B, -1});
    return permute(rows, {1, 0, 2});  // (B, Ns, C)
  }
};

// Pose encoder: 7x7 stem + two stride-2 convs (all IN+ReLU), then residual
// blocks at the attention resolution.
template <typename T>
struct PoseEncoder {
  Conv2dLayer<T> conv1, conv2, conv3;
  InstanceNorm<T> in1, in2, in3;
  struct Res {
    Conv2dLayer<T> ca, cb;
    InstanceNorm<T> na, nb;
  };
  std::vector<Res> blocks;

  PoseEncoder() = default;
  PoseEncoder(ParameterStore<T>& ps, const ModelConfig& cfg) {
    int c = cfg.channels;
    conv1 = Conv2dLayer<T>(ps, "ep.conv1", 7, 7, synth_channels(), c / 4, 1);
    in1 = InstanceNorm<T>(ps, "ep.in1", c / 4);
    conv2 = Conv2dLayer<T>(ps, "ep.conv2", 4, 4, c / 4, c / 2, 2);
    in2 = InstanceNorm<T>(ps, "ep.in2", c / 2);
    conv3 = Conv2dLayer<T>(ps, "ep.conv3", 4, 4, c / 2, c, 2);
    in3 = InstanceNorm<T>(ps, "ep.in3", c);
    blocks.resize(size_t(cfg.num_pose_resblocks));
    for (int r = 0; r < cfg.num_pose_resblocks; ++r) {
      std::string base = "ep.res" + std::to_string(r);
      blocks[size_t(r)].ca = Conv2dLayer<T>(ps, base + ".conv_a", 3, 3, c, c, 1);
      blocks[size_t(r)].na = InstanceNorm<T>(ps, base + ".in_a", c);
      blocks[size_t(r)].cb = Conv2dLayer<T>(ps, base + ".conv_b", 3, 3, c, c, 1);
      blocks[size_t(r)].nb = InstanceNorm<T>(ps, base + ".in_b", c);
    }
  }

  static constexpr int synth_channels() { return 30; }  // 18 points + 12 limb lines

  // heatmaps (B,H,W,30) -> pose feature (B,H/4,W/4,C)
  Tensor<T> operator()(const Tensor<T>& heatmaps) const {
    using namespace ops;
    Tensor<T> x = relu(in1(conv1(heatmaps)));
    x = relu(in2(conv2(x)));
    x = relu(in3(conv3(x)));
    for (const Res& r : blocks) {
      Tensor<T> y = r.nb(r.cb(relu(r.na(r.ca(x)))));
      x = add(x, y);
    }
    return x;
  }
};

// Mixes the per-semantic style rows into the AdaIN modulation vector: three
// hidden layers, every layer ReLU-gated, final width = one (scale, offset)
// pair per modulated channel.
template <typename T>
struct StyleMlp {
  LinearLayer<T> fc0, fc1, fc2, fc3;

  StyleMlp() = default;
  StyleMlp(ParameterStore<T>& ps, const ModelConfig& cfg) {
    int c = cfg.channels;
    int in = cfg.num_semantics * c;
    fc0 = LinearLayer<T>(ps, "mlp.fc0", in, 8 * c);
    fc1 = LinearLayer<T>(ps, "mlp.fc1", 8 * c, c);
    fc2 = LinearLayer<T>(ps, "mlp.fc2", c, c);
    fc3 = LinearLayer<T>(ps, "mlp.fc3", c, 2 * cfg.modulated_channels());
  }

  // styles (B,Ns,C) -> modulation (B, 2 * modulated channels)
  Tensor<T> operator()(const Tensor<T>& styles) const {
    using namespace ops;
    Tensor<T> x = reshape(styles, {styles.shape[0], -1});
    x = relu(fc0(x));
    x = relu(fc1(x));
    x = relu(fc2(x));
    return relu(fc3(x));
  }
};

}  // namespace casd
