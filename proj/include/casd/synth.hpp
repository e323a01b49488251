#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "casd/common.hpp"

// Procedural paired-sample generator: stick figures with per-semantic
// appearance, rendered together with exact parsing maps and pose heatmaps.
// Everything is deterministic in the seeds; rendering sticks to +,-,*,/ and
// exp so a fixed seed gives the same bytes on any IEEE platform.

namespace casd {
namespace synth {

constexpr int kNumKeypoints = 18;
constexpr int kNumLimbs = 12;
constexpr int kNumSemantics = 8;
constexpr int kHeatmapChannels = kNumKeypoints + kNumLimbs;  // 30

// palette order is fixed; channel c of a parsing map is the semantic c
enum Semantic : int {
  kBackground = 0,
  kPants,
  kHair,
  kGlove,
  kFace,
  kDress,
  kArms,
  kLegs,
};

extern const char* const kSemanticNames[kNumSemantics];
extern const unsigned char kPaletteRgb[kNumSemantics][3];

// keypoints follow the usual 18-point body convention:
// 0 nose, 1 neck, 2/3/4 R shoulder/elbow/wrist, 5/6/7 L shoulder/elbow/wrist,
// 8/9/10 R hip/knee/ankle, 11/12/13 L hip/knee/ankle, 14/15 eyes, 16/17 ears
extern const int kLimbPairs[kNumLimbs][2];

struct Keypoint {
  double x = 0.0, y = 0.0;
  bool present = false;
};

struct PoseSpec {
  std::array<Keypoint, kNumKeypoints> points;
};

struct SemanticStyle {
  double rgb[3] = {0, 0, 0};
  bool textured = false;
  bool checker = false;  // stripes otherwise
  bool vertical = false; // stripe orientation
  double freq = 0.0;     // stripe frequency, cycles per pixel
  double phase = 0.0;
};

struct Identity {
  uint64_t seed = 0;
  SemanticStyle style[kNumSemantics];
  // proportions in pixels
  double torso_len = 0, neck_len = 0, head_r = 0;
  double shoulder_w = 0, hip_w = 0;
  double upper_arm = 0, fore_arm = 0, thigh = 0, shin = 0;
  double torso_w = 0, arm_w = 0, leg_w = 0, glove_r = 0;
};

// plain row-major H x W x C buffer of doubles
struct FlatImage {
  int h = 0, w = 0, c = 0;
  std::vector<double> v;

  FlatImage() = default;
  FlatImage(int h_, int w_, int c_) : h(h_), w(w_), c(c_), v(size_t(h_) * w_ * c_, 0.0) {}
  double& at(int y, int x, int ch) { return v[(size_t(y) * w + x) * c + ch]; }
  double at(int y, int x, int ch) const { return v[(size_t(y) * w + x) * c + ch]; }
};

struct Sample {
  Identity identity;
  uint64_t pose_seed_s = 0, pose_seed_t = 0;
  PoseSpec pose_s, pose_t;
  FlatImage image_s, image_t;      // (H,W,3), values in [-1,1]
  std::vector<uint8_t> labels_s, labels_t;  // H*W semantic labels
  FlatImage parsing_s, parsing_t;  // (H,W,8) one-hot
  FlatImage heat_s, heat_t;        // (H,W,30)
};

// sigma of the heatmap falloff: 1.5 px at 64-row canvases, scaled linearly
inline double default_sigma(int H) { return 1.5 * double(H) / 64.0; }

Identity sample_identity(uint64_t seed, int H, int W);

// jointed skeleton with joint angles inside anatomical ranges; keypoints are
// guaranteed on-canvas (poses that would clip are re-drawn from the stream)
PoseSpec sample_pose(const Identity& id, uint64_t seed, int H, int W);

// expected length of limb segment `limb` under the identity's proportions
double limb_rest_length(const Identity& id, int limb);

void render_person(const Identity& id, const PoseSpec& pose, int H, int W, FlatImage* image,
                   FlatImage* parsing, std::vector<uint8_t>* labels);

// evaluate the per-semantic color model at a pixel (in [0,1]^3)
void semantic_color(const Identity& id, int semantic, int x, int y, double rgb[3]);

FlatImage render_pose_heatmaps(const PoseSpec& pose, int H, int W, double sigma);

Sample make_pair(const Identity& id, uint64_t seed_s, uint64_t seed_t, int H, int W, double sigma);

// identity split: ~10% of ids hash into the held-out set
bool is_eval_identity(uint64_t identity_index, uint64_t split_seed);

}  // namespace synth
}  // namespace casd
