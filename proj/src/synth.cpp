#include "casd/synth.hpp"

#include <algorithm>
#include <cmath>

namespace casd {
namespace synth {

const char* const kSemanticNames[kNumSemantics] = {"background", "pants", "hair", "glove",
                                                   "face",       "dress", "arms", "legs"};

const unsigned char kPaletteRgb[kNumSemantics][3] = {
    {0, 0, 0},        // background
    {40, 80, 220},    // pants
    {140, 90, 30},    // hair
    {240, 210, 40},   // glove
    {250, 190, 150},  // face
    {210, 40, 60},    // dress
    {60, 200, 80},    // arms
    {40, 210, 220},   // legs
};

const int kLimbPairs[kNumLimbs][2] = {
    {1, 2}, {2, 3}, {3, 4},    // right arm chain
    {1, 5}, {5, 6}, {6, 7},    // left arm chain
    {1, 8}, {8, 9}, {9, 10},   // right leg chain
    {1, 11}, {11, 12}, {12, 13},  // left leg chain
};

Identity sample_identity(uint64_t seed, int H, int W) {
  (void)W;
  Identity id;
  id.seed = seed;
  Rng rng(Rng::mix(seed, 0x1DE57));
  double s = double(H);
  id.torso_len = rng.uniform(0.24, 0.30) * s;
  id.neck_len = rng.uniform(0.035, 0.055) * s;
  id.head_r = rng.uniform(0.065, 0.085) * s;
  id.shoulder_w = rng.uniform(0.16, 0.21) * s;
  id.hip_w = rng.uniform(0.11, 0.16) * s;
  id.upper_arm = rng.uniform(0.095, 0.125) * s;
  id.fore_arm = rng.uniform(0.085, 0.115) * s;
  id.thigh = rng.uniform(0.13, 0.16) * s;
  id.shin = rng.uniform(0.12, 0.15) * s;
  id.torso_w = rng.uniform(0.105, 0.14) * s;
  id.arm_w = rng.uniform(0.034, 0.05) * s;
  id.leg_w = rng.uniform(0.045, 0.065) * s;
  id.glove_r = rng.uniform(0.028, 0.042) * s;

  for (int k = 0; k < kNumSemantics; ++k) {
    SemanticStyle& st = id.style[k];
    if (k == kBackground) {
      for (double& ch : st.rgb) ch = rng.uniform(0.05, 0.30);
      st.textured = false;
      continue;
    }
    for (double& ch : st.rgb) ch = rng.uniform(0.25, 0.95);
    st.textured = rng.bernoulli(k == kDress || k == kPants ? 0.75 : 0.25);
    st.checker = rng.bernoulli(0.4);
    st.vertical = rng.bernoulli(0.5);
    st.freq = rng.uniform(0.10, 0.30);
    st.phase = rng.uniform(0.0, 1.0);
  }
  return id;
}

namespace {

struct Vec2 {
  double x = 0, y = 0;
};

inline Vec2 polar(double len, double angle) {
  // angle 0 points down the canvas (+y); positive swings toward +x
  return {len * detmath::sin(angle), len * detmath::cos(angle)};
}

inline Vec2 add(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }

struct SkeletonDraft {
  Vec2 p[kNumKeypoints];
};

SkeletonDraft draw_skeleton(const Identity& id, Rng& rng) {
  SkeletonDraft sk;
  double tilt = rng.uniform(-0.12, 0.12);  // torso lean
  Vec2 pelvis{0, 0};
  Vec2 up = polar(-id.torso_len, tilt);  // toward the head
  Vec2 neck = add(pelvis, up);
  Vec2 across{detmath::cos(tilt), -detmath::sin(tilt)};  // unit vector along the shoulders

  auto along = [&](Vec2 from, double len, double angle) { return add(from, polar(len, angle)); };

  sk.p[1] = neck;
  sk.p[2] = add(neck, Vec2{-across.x * id.shoulder_w / 2, -across.y * id.shoulder_w / 2});
  sk.p[5] = add(neck, Vec2{across.x * id.shoulder_w / 2, across.y * id.shoulder_w / 2});
  sk.p[8] = add(pelvis, Vec2{-across.x * id.hip_w / 2, -across.y * id.hip_w / 2});
  sk.p[11] = add(pelvis, Vec2{across.x * id.hip_w / 2, across.y * id.hip_w / 2});

  // arms: shoulder swing away from the body, elbows bend inward
  double r_sh = rng.uniform(-1.8, 0.30);
  double r_el = rng.uniform(0.0, 2.0);
  sk.p[3] = along(sk.p[2], id.upper_arm, tilt - r_sh);
  sk.p[4] = along(sk.p[3], id.fore_arm, tilt - r_sh + r_el);
  double l_sh = rng.uniform(-1.8, 0.30);
  double l_el = rng.uniform(0.0, 2.0);
  sk.p[6] = along(sk.p[5], id.upper_arm, tilt + l_sh);
  sk.p[7] = along(sk.p[6], id.fore_arm, tilt + l_sh - l_el);

  // legs: small hip swing, knees bend backward
  double r_hip = rng.uniform(-0.45, 0.15);
  double r_knee = rng.uniform(0.0, 0.7);
  sk.p[9] = along(sk.p[8], id.thigh, tilt - r_hip);
  sk.p[10] = along(sk.p[9], id.shin, tilt - r_hip + r_knee * 0.5);
  double l_hip = rng.uniform(-0.45, 0.15);
  double l_knee = rng.uniform(0.0, 0.7);
  sk.p[12] = along(sk.p[11], id.thigh, tilt + l_hip);
  sk.p[13] = along(sk.p[12], id.shin, tilt + l_hip - l_knee * 0.5);

  // head: nose/eyes/ears around the head disc centre
  double head_jit = rng.uniform(-0.10, 0.10);
  Vec2 hc = add(neck, polar(-(id.neck_len + id.head_r), tilt + head_jit));
  sk.p[0] = add(hc, polar(0.15 * id.head_r, tilt));  // nose slightly below centre
  sk.p[14] = add(hc, Vec2{-across.x * 0.35 * id.head_r, -across.y * 0.35 * id.head_r});
  sk.p[15] = add(hc, Vec2{across.x * 0.35 * id.head_r, across.y * 0.35 * id.head_r});
  sk.p[16] = add(hc, Vec2{-across.x * 0.75 * id.head_r, -across.y * 0.75 * id.head_r});
  sk.p[17] = add(hc, Vec2{across.x * 0.75 * id.head_r, across.y * 0.75 * id.head_r});
  return sk;
}

}  // namespace

PoseSpec sample_pose(const Identity& id, uint64_t seed, int H, int W) {
  Rng rng(Rng::mix(seed, 0x9053));
  double margin = id.head_r * 1.15 + 1.0;

  for (int attempt = 0; attempt < 64; ++attempt) {
    SkeletonDraft sk = draw_skeleton(id, rng);
    double minx = sk.p[0].x, maxx = sk.p[0].x, miny = sk.p[0].y, maxy = sk.p[0].y;
    for (const Vec2& p : sk.p) {
      minx = std::min(minx, p.x);
      maxx = std::max(maxx, p.x);
      miny = std::min(miny, p.y);
      maxy = std::max(maxy, p.y);
    }
    // centre the bounding box; translation keeps every segment length intact
    double tx = (double(W) - 1.0) / 2.0 - (minx + maxx) / 2.0;
    double ty = (double(H) - 1.0) / 2.0 - (miny + maxy) / 2.0;
    if (minx + tx < margin || maxx + tx > double(W) - 1.0 - margin || miny + ty < margin ||
        maxy + ty > double(H) - 1.0 - margin)
      continue;  // pose too wide/tall for this canvas, draw again
    PoseSpec pose;
    for (int k = 0; k < kNumKeypoints; ++k) {
      pose.points[k].x = sk.p[k].x + tx;
      pose.points[k].y = sk.p[k].y + ty;
      pose.points[k].present = true;
    }
    return pose;
  }
  fail("sample_pose: no on-canvas pose after 64 attempts (canvas too small for identity)");
}

double limb_rest_length(const Identity& id, int limb) {
  switch (limb) {
    case 0: case 3: return id.shoulder_w / 2;               // neck -> shoulder
    case 1: case 4: return id.upper_arm;
    case 2: case 5: return id.fore_arm;
    case 6: case 9: return std::sqrt(id.torso_len * id.torso_len + id.hip_w * id.hip_w / 4);
    case 7: case 10: return id.thigh;
    case 8: case 11: return id.shin;
    default: fail("limb_rest_length: bad limb index " + std::to_string(limb));
  }
}

namespace {

inline double dist2_to_segment(double px, double py, double ax, double ay, double bx, double by) {
  double dx = bx - ax, dy = by - ay;
  double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0.0) {
    t = ((px - ax) * dx + (py - ay) * dy) / len2;
    t = std::min(1.0, std::max(0.0, t));
  }
  double cx = ax + t * dx - px, cy = ay + t * dy - py;
  return cx * cx + cy * cy;
}

struct Painter {
  int H, W;
  std::vector<uint8_t>* labels;

  void capsule(double ax, double ay, double bx, double by, double radius, uint8_t semantic) {
    int x0 = std::max(0, int(std::floor(std::min(ax, bx) - radius)));
    int x1 = std::min(W - 1, int(std::ceil(std::max(ax, bx) + radius)));
    int y0 = std::max(0, int(std::floor(std::min(ay, by) - radius)));
    int y1 = std::min(H - 1, int(std::ceil(std::max(ay, by) + radius)));
    double r2 = radius * radius;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (dist2_to_segment(double(x), double(y), ax, ay, bx, by) <= r2)
          (*labels)[size_t(y) * W + x] = semantic;
  }

  void disc(double cx, double cy, double radius, uint8_t semantic) {
    capsule(cx, cy, cx, cy, radius, semantic);
  }

  // upper part of a disc: inside the radius and above the cut line
  void cap(double cx, double cy, double radius, double cut_dy, uint8_t semantic) {
    int x0 = std::max(0, int(std::floor(cx - radius)));
    int x1 = std::min(W - 1, int(std::ceil(cx + radius)));
    int y0 = std::max(0, int(std::floor(cy - radius)));
    int y1 = std::min(H - 1, int(std::ceil(cy + radius)));
    double r2 = radius * radius;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        double dx = double(x) - cx, dy = double(y) - cy;
        if (dx * dx + dy * dy <= r2 && dy <= cut_dy) (*labels)[size_t(y) * W + x] = semantic;
      }
  }
};

inline double fract(double v) { return v - std::floor(v); }

}  // namespace

void semantic_color(const Identity& id, int semantic, int x, int y, double rgb[3]) {
  const SemanticStyle& st = id.style[semantic];
  double factor = 1.0;
  if (st.textured) {
    bool bx = fract(double(x) * st.freq + st.phase) < 0.5;
    bool by = fract(double(y) * st.freq + st.phase) < 0.5;
    bool band = st.checker ? (bx != by) : (st.vertical ? bx : by);
    factor = band ? 1.0 : 0.55;
  }
  for (int c = 0; c < 3; ++c) rgb[c] = st.rgb[c] * factor;
}

void render_person(const Identity& id, const PoseSpec& pose, int H, int W, FlatImage* image,
                   FlatImage* parsing, std::vector<uint8_t>* labels) {
  if (H < 32 || W < 24) fail("render_person: canvas must be at least 32x24");
  labels->assign(size_t(H) * W, uint8_t(kBackground));
  Painter pt{H, W, labels};
  const auto& p = pose.points;
  auto have = [&](int a, int b) { return p[a].present && p[b].present; };

  // torso
  if (have(1, 8) && have(1, 11)) {
    double pcx = (p[8].x + p[11].x) / 2, pcy = (p[8].y + p[11].y) / 2;
    pt.capsule(p[1].x, p[1].y, pcx, pcy, id.torso_w / 2, kDress);
  }
  // pelvis bar + thighs
  if (have(8, 11)) pt.capsule(p[8].x, p[8].y, p[11].x, p[11].y, id.leg_w * 0.8, kPants);
  if (have(8, 9)) pt.capsule(p[8].x, p[8].y, p[9].x, p[9].y, id.leg_w / 2, kPants);
  if (have(11, 12)) pt.capsule(p[11].x, p[11].y, p[12].x, p[12].y, id.leg_w / 2, kPants);
  // shins
  if (have(9, 10)) pt.capsule(p[9].x, p[9].y, p[10].x, p[10].y, id.leg_w * 0.45, kLegs);
  if (have(12, 13)) pt.capsule(p[12].x, p[12].y, p[13].x, p[13].y, id.leg_w * 0.45, kLegs);
  // arms
  if (have(2, 3)) pt.capsule(p[2].x, p[2].y, p[3].x, p[3].y, id.arm_w / 2, kArms);
  if (have(3, 4)) pt.capsule(p[3].x, p[3].y, p[4].x, p[4].y, id.arm_w / 2, kArms);
  if (have(5, 6)) pt.capsule(p[5].x, p[5].y, p[6].x, p[6].y, id.arm_w / 2, kArms);
  if (have(6, 7)) pt.capsule(p[6].x, p[6].y, p[7].x, p[7].y, id.arm_w / 2, kArms);
  // gloves at the wrists
  if (p[4].present) pt.disc(p[4].x, p[4].y, id.glove_r, kGlove);
  if (p[7].present) pt.disc(p[7].x, p[7].y, id.glove_r, kGlove);
  // head: face disc, hair cap on top
  if (p[16].present && p[17].present) {
    double hcx = (p[16].x + p[17].x) / 2, hcy = (p[16].y + p[17].y) / 2;
    pt.disc(hcx, hcy, id.head_r, kFace);
    pt.cap(hcx, hcy, id.head_r * 1.10, -0.30 * id.head_r, kHair);
  }

  *image = FlatImage(H, W, 3);
  *parsing = FlatImage(H, W, kNumSemantics);
  double rgb[3];
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      uint8_t lab = (*labels)[size_t(y) * W + x];
      semantic_color(id, lab, x, y, rgb);
      for (int c = 0; c < 3; ++c) image->at(y, x, c) = 2.0 * rgb[c] - 1.0;
      parsing->at(y, x, lab) = 1.0;
    }
}

FlatImage render_pose_heatmaps(const PoseSpec& pose, int H, int W, double sigma) {
  if (sigma <= 0) fail("render_pose_heatmaps: sigma must be positive");
  FlatImage hm(H, W, kHeatmapChannels);
  double inv = 1.0 / (2.0 * sigma * sigma);
  // keypoints snap to the pixel grid so the peak value is exactly 1
  double snapped[kNumKeypoints][2];
  for (int k = 0; k < kNumKeypoints; ++k) {
    snapped[k][0] = std::floor(pose.points[k].x + 0.5);
    snapped[k][1] = std::floor(pose.points[k].y + 0.5);
  }
  for (int k = 0; k < kNumKeypoints; ++k) {
    if (!pose.points[k].present) continue;
    double kx = snapped[k][0], ky = snapped[k][1];
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double d2 = (x - kx) * (x - kx) + (y - ky) * (y - ky);
        hm.at(y, x, k) = std::exp(-d2 * inv);
      }
  }
  for (int l = 0; l < kNumLimbs; ++l) {
    int a = kLimbPairs[l][0], b = kLimbPairs[l][1];
    if (!pose.points[a].present || !pose.points[b].present) continue;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double d2 = dist2_to_segment(double(x), double(y), snapped[a][0], snapped[a][1],
                                     snapped[b][0], snapped[b][1]);
        hm.at(y, x, kNumKeypoints + l) = std::exp(-d2 * inv);
      }
  }
  return hm;
}

Sample make_pair(const Identity& id, uint64_t seed_s, uint64_t seed_t, int H, int W, double sigma) {
  Sample smp;
  smp.identity = id;
  smp.pose_seed_s = seed_s;
  smp.pose_seed_t = seed_t;
  smp.pose_s = sample_pose(id, seed_s, H, W);
  smp.pose_t = sample_pose(id, seed_t, H, W);
  render_person(id, smp.pose_s, H, W, &smp.image_s, &smp.parsing_s, &smp.labels_s);
  render_person(id, smp.pose_t, H, W, &smp.image_t, &smp.parsing_t, &smp.labels_t);
  smp.heat_s = render_pose_heatmaps(smp.pose_s, H, W, sigma);
  smp.heat_t = render_pose_heatmaps(smp.pose_t, H, W, sigma);
  return smp;
}

bool is_eval_identity(uint64_t identity_index, uint64_t split_seed) {
  return Rng::mix(identity_index, Rng::mix(split_seed, 0xE7A1)) % 10 == 0;
}

}  // namespace synth
}  // namespace casd
