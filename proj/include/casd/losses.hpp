#pragma once

#include "casd/generator.hpp"

namespace casd {

// Patch discriminator: four stride-2 convs with leaky-ReLU, the last one
// produces single-channel logits, reported through a sigmoid as a patch
// probability map.
template <typename T>
struct Discriminator {
  Conv2dLayer<T> c1, c2, c3, c4;

  Discriminator() = default;
  Discriminator(ParameterStore<T>& ps, const std::string& name, int in_ch, int base) {
    c1 = Conv2dLayer<T>(ps, name + ".conv1", 4, 4, in_ch, base, 2);
    c2 = Conv2dLayer<T>(ps, name + ".conv2", 4, 4, base, 2 * base, 2);
    c3 = Conv2dLayer<T>(ps, name + ".conv3", 4, 4, 2 * base, 4 * base, 2);
    c4 = Conv2dLayer<T>(ps, name + ".conv4", 4, 4, 4 * base, 1, 2);
  }

  // both inputs (B,H,W,*), concatenated channelwise; output in (0,1)
  Tensor<T> operator()(const Tensor<T>& cond, const Tensor<T>& image) const {
    using namespace ops;
    Tensor<T> x = concat<T>({cond, image}, 3);
    x = leaky_relu(c1(x), T(0.2));
    x = leaky_relu(c2(x), T(0.2));
    x = leaky_relu(c3(x), T(0.2));
    return sigmoid(c4(x));
  }
};

// D_p checks pose consistency on (heatmaps, image) pairs, D_s checks style
// consistency on (source image, image) pairs.
template <typename T>
struct DiscriminatorPair {
  ParameterStore<T> params;
  Discriminator<T> d_pose, d_style;

  DiscriminatorPair(const ModelConfig& cfg, uint64_t seed) : params(seed) {
    int base = std::max(4, cfg.channels / 2);
    d_pose = Discriminator<T>(params, "dp", PoseEncoder<T>::synth_channels() + 3, base);
    d_style = Discriminator<T>(params, "ds", 6, base);
  }
};

struct LossWeights {
  double adv = 5.0;
  double rec = 1.0;
  double perc = 1.0;
  double cx = 0.1;
  double amce = 0.1;
  double lpips = 1.0;
};

namespace losses {

constexpr double kProbClamp = 1e-8;

// one-hot majority vote per cell; ties go to the lowest semantic index.
// Data-side only: the result is a constant target.
template <typename T>
Tensor<T> downsample_parsing_majority(const Tensor<T>& parsing, int h, int w) {
  if (parsing.rank() != 4) fail("parsing downsample: expected (B,H,W,Ns)");
  int B = parsing.shape[0], H = parsing.shape[1], W = parsing.shape[2], Ns = parsing.shape[3];
  if (H % h != 0 || W % w != 0)
    fail("parsing downsample: " + std::to_string(H) + "x" + std::to_string(W) +
         " not divisible into " + std::to_string(h) + "x" + std::to_string(w));
  int fy = H / h, fx = W / w;
  Tensor<T> out = Tensor<T>::zeros({B, h, w, Ns});
  std::vector<int> count(size_t(Ns));
  for (int b = 0; b < B; ++b)
    for (int cy = 0; cy < h; ++cy)
      for (int cx = 0; cx < w; ++cx) {
        std::fill(count.begin(), count.end(), 0);
        for (int y = cy * fy; y < (cy + 1) * fy; ++y)
          for (int x = cx * fx; x < (cx + 1) * fx; ++x) {
            int lab = -1;
            for (int c = 0; c < Ns; ++c) {
              T v = parsing.at({b, y, x, c});
              if (v == T(1)) {
                if (lab >= 0) fail("parsing map is not one-hot (two channels set at a pixel)");
                lab = c;
              } else if (v != T(0)) {
                fail("parsing map is not one-hot (value neither 0 nor 1)");
              }
            }
            if (lab < 0) fail("parsing map is not one-hot (no channel set at a pixel)");
            ++count[size_t(lab)];
          }
        int best = 0;
        for (int c = 1; c < Ns; ++c)
          if (count[size_t(c)] > count[size_t(best)]) best = c;
        out.at_mut({b, cy, cx, best}) = T(1);
      }
  return out;
}

// cross-entropy between the attention matrix and the target parsing map,
// summed over positions and semantics (no averaging), batch-mean
template <typename T>
Tensor<T> amce_loss(const Tensor<T>& am, const Tensor<T>& parsing_t) {
  using namespace ops;
  if (am.rank() != 4) fail("amce: AM must be (B,h,w,Ns), got " + shape_str(am.shape));
  int B = am.shape[0];
  Tensor<T> target = downsample_parsing_majority(parsing_t, am.shape[1], am.shape[2]);
  Tensor<T> logp = log_op(clamp(am, T(kProbClamp), T(1)));
  Tensor<T> ce = neg(sum_all(mul(target.detach(), logp)));
  return mul_scalar(ce, T(1) / T(B));
}

template <typename T>
Tensor<T> mean_log(const Tensor<T>& p) {
  using namespace ops;
  return mean_all(log_op(clamp(p, T(kProbClamp), T(1.0 - kProbClamp))));
}

template <typename T>
struct AdversarialLosses {
  Tensor<T> g_loss;  // non-saturating generator term
  Tensor<T> d_loss;  // negative of the two-discriminator value function
};

// fake enters the discriminator objective detached; the generator term keeps
// the graph so its gradient reaches the generator through both critics
template <typename T>
AdversarialLosses<T> adversarial_losses(const DiscriminatorPair<T>& disc, const Tensor<T>& image_s,
                                        const Tensor<T>& image_t, const Tensor<T>& fake,
                                        const Tensor<T>& pose_t) {
  using namespace ops;
  AdversarialLosses<T> out;
  Tensor<T> fake_c = fake.detach();
  Tensor<T> real_s = disc.d_style(image_s, image_t);
  Tensor<T> real_p = disc.d_pose(pose_t, image_t);
  Tensor<T> fake_s = disc.d_style(image_s, fake_c);
  Tensor<T> fake_p = disc.d_pose(pose_t, fake_c);
  Tensor<T> value = add(add(mean_log(real_s), mean_log(real_p)),
                        add(mean_log(add_scalar(neg(fake_s), T(1))),
                            mean_log(add_scalar(neg(fake_p), T(1)))));
  out.d_loss = neg(value);

  Tensor<T> gs = disc.d_style(image_s, fake);
  Tensor<T> gp = disc.d_pose(pose_t, fake);
  out.g_loss = neg(add(mean_log(gs), mean_log(gp)));
  return out;
}

template <typename T>
Tensor<T> rec_loss(const Tensor<T>& fake, const Tensor<T>& real) {
  using namespace ops;
  if (fake.shape != real.shape)
    fail("rec loss: shape mismatch " + shape_str(fake.shape) + " vs " + shape_str(real.shape));
  return mean_all(abs_op(sub(fake, real)));
}

// sum over extractor stages of the mean L1 feature distance
template <typename T>
Tensor<T> perc_loss(const Tensor<T>& fake, const Tensor<T>& real,
                    const SurrogateFeatureExtractor<T>& ex) {
  using namespace ops;
  std::vector<Tensor<T>> fx = ex(fake);
  std::vector<Tensor<T>> fy = ex(real.detach());
  Tensor<T> total = mean_all(abs_op(sub(fx[0], fy[0])));
  for (size_t s = 1; s < fx.size(); ++s)
    total = add(total, mean_all(abs_op(sub(fx[s], fy[s]))));
  return total;
}

namespace cxdet {

// contextual similarity of one feature-set pair: X (P,C) against constant
// Y (P,C). Cosine distances after centering by Y's mean, relative distances
// against the per-row minimum, exponential affinity, row normalization, then
// the mean over Y of the best match.
template <typename T>
Tensor<T> cx_neglog(const Tensor<T>& x_feat, const Tensor<T>& y_feat, T band, T eps) {
  using namespace ops;
  Tensor<T> mu_y = reduce_mean(y_feat, {0}, true);
  Tensor<T> xc = sub(x_feat, mu_y);
  Tensor<T> yc = sub(y_feat, mu_y);
  Tensor<T> nx = sqrt_op(add_scalar(reduce_sum(mul(xc, xc), {1}, true), T(1e-12)));
  Tensor<T> ny = sqrt_op(add_scalar(reduce_sum(mul(yc, yc), {1}, true), T(1e-12)));
  Tensor<T> sim = matmul(xc, yc, true);
  Tensor<T> den = matmul(nx, ny, true);
  Tensor<T> dist = add_scalar(neg(div(sim, den)), T(1));       // d_ij
  Tensor<T> dmin = reduce_min(dist, 1, true);                  // min_k d_ik
  Tensor<T> rel = div(dist, add_scalar(dmin, eps));            // d~_ij
  Tensor<T> aff = exp_op(mul_scalar(add_scalar(neg(rel), T(1)), T(1) / band));
  Tensor<T> cx = div(aff, reduce_sum(aff, {1}, true));         // row-normalized
  Tensor<T> best = reduce_max(cx, 0, false);                   // max_i CX_ij
  return neg(log_op(mean_all(best)));
}

}  // namespace cxdet

// non-aligned feature similarity on the two deepest extractor stages
template <typename T>
Tensor<T> contextual_loss(const Tensor<T>& fake, const Tensor<T>& real,
                          const SurrogateFeatureExtractor<T>& ex, T band = T(0.5),
                          T eps = T(1e-5)) {
  using namespace ops;
  std::vector<Tensor<T>> fx = ex(fake);
  std::vector<Tensor<T>> fy = ex(real.detach());
  int B = fake.shape[0];
  Tensor<T> total;
  int terms = 0;
  for (int s : {2, 3}) {
    int C = fx[size_t(s)].shape[3];
    for (int b = 0; b < B; ++b) {
      Tensor<T> xf = reshape(slice(fx[size_t(s)], 0, b, 1), {-1, C});
      Tensor<T> yf = reshape(slice(fy[size_t(s)], 0, b, 1), {-1, C});
      Tensor<T> term = cxdet::cx_neglog(xf, yf.detach(), band, eps);
      total = total.defined() ? add(total, term) : term;
      ++terms;
    }
  }
  return mul_scalar(total, T(1) / T(terms));
}

// mean L2 distance between channel-unit-normalized features, equal stage
// weights
template <typename T>
Tensor<T> lpips_loss(const Tensor<T>& fake, const Tensor<T>& real,
                     const SurrogateFeatureExtractor<T>& ex) {
  using namespace ops;
  std::vector<Tensor<T>> fx = ex(fake);
  std::vector<Tensor<T>> fy = ex(real.detach());
  Tensor<T> total;
  for (size_t s = 0; s < fx.size(); ++s) {
    Tensor<T> xn = div(fx[s], sqrt_op(add_scalar(reduce_sum(mul(fx[s], fx[s]), {3}, true), T(1e-12))));
    Tensor<T> yn = div(fy[s], sqrt_op(add_scalar(reduce_sum(mul(fy[s], fy[s]), {3}, true), T(1e-12))));
    Tensor<T> d = sub(xn, yn);
    Tensor<T> per_sample = sqrt_op(add_scalar(reduce_sum(mul(d, d), {1, 2, 3}, false), T(1e-24)));
    Tensor<T> term = mean_all(per_sample);
    total = total.defined() ? add(total, term) : term;
  }
  return mul_scalar(total, T(1) / T(fx.size()));
}

struct LossValues {
  double adv = 0, rec = 0, perc = 0, cx = 0, amce = 0, lpips = 0, total = 0, d_loss = 0;
};

template <typename T>
struct ObjectiveResult {
  Tensor<T> total;
  Tensor<T> d_loss;
  LossValues values;
};

// the full generator objective; d_loss rides along for the alternating step
template <typename T>
ObjectiveResult<T> full_objective(const GeneratorOutput<T>& gen, const Tensor<T>& image_s,
                                  const Tensor<T>& image_t, const Tensor<T>& parsing_t,
                                  const Tensor<T>& pose_t, const DiscriminatorPair<T>& disc,
                                  const SurrogateFeatureExtractor<T>& ex, const LossWeights& w,
                                  bool amce_all_blocks = true) {
  using namespace ops;
  ObjectiveResult<T> out;
  AdversarialLosses<T> adv = adversarial_losses(disc, image_s, image_t, gen.image, pose_t);

  Tensor<T> amce;
  if (amce_all_blocks) {
    for (const Tensor<T>& am : gen.attention) {
      Tensor<T> term = amce_loss(am, parsing_t);
      amce = amce.defined() ? add(amce, term) : term;
    }
    amce = mul_scalar(amce, T(1) / T(gen.attention.size()));
  } else {
    amce = amce_loss(gen.attention.back(), parsing_t);
  }

  Tensor<T> rec = rec_loss(gen.image, image_t);
  Tensor<T> perc = perc_loss(gen.image, image_t, ex);
  Tensor<T> cx = contextual_loss(gen.image, image_t, ex);
  Tensor<T> lp = lpips_loss(gen.image, image_t, ex);

  Tensor<T> total = mul_scalar(adv.g_loss, T(w.adv));
  total = add(total, mul_scalar(rec, T(w.rec)));
  total = add(total, mul_scalar(perc, T(w.perc)));
  total = add(total, mul_scalar(cx, T(w.cx)));
  total = add(total, mul_scalar(amce, T(w.amce)));
  total = add(total, mul_scalar(lp, T(w.lpips)));

  out.total = total;
  out.d_loss = adv.d_loss;
  out.values.adv = double(adv.g_loss.item());
  out.values.rec = double(rec.item());
  out.values.perc = double(perc.item());
  out.values.cx = double(cx.item());
  out.values.amce = double(amce.item());
  out.values.lpips = double(lp.item());
  out.values.total = double(total.item());
  out.values.d_loss = double(adv.d_loss.item());
  return out;
}

}  // namespace losses
}  // namespace casd
