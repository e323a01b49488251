#pragma once

#include <cstdint>
#include <vector>

namespace casd {
namespace metrics {

// Structural similarity with an 11x11 Gaussian window (sigma 1.5), valid
// positions only, averaged over channels. L is the dynamic range (2 for
// images in [-1,1]); C1=(0.01 L)^2, C2=(0.03 L)^2.
double ssim(const double* a, const double* b, int H, int W, int C, double L = 2.0);

// 10 log10(L^2 / MSE), capped (PSNR is undefined at zero MSE)
double psnr(const double* a, const double* b, int64_t n, double L = 2.0, double cap = 99.0);

// dataset-level per-class intersection / union
struct IouAccumulator {
  int num_classes = 0;
  std::vector<int64_t> inter, uni;

  explicit IouAccumulator(int classes) : num_classes(classes), inter(classes, 0), uni(classes, 0) {}
  void add(const uint8_t* pred, const uint8_t* truth, int64_t n);
  // per-class IoU (classes never seen anywhere are reported as -1 and
  // excluded from the mean)
  std::vector<double> per_class() const;
  double mean() const;
};

// eigen-decomposition of a symmetric d x d matrix (cyclic Jacobi);
// a is row-major and is destroyed
void jacobi_eigh(std::vector<double>& a, int d, std::vector<double>& eigenvalues,
                 std::vector<double>& eigenvectors);

// squared Wasserstein-2 distance between Gaussian fits of two feature sets
// (rows are observations): |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})
double frechet_gaussian_distance(const std::vector<std::vector<double>>& x,
                                 const std::vector<std::vector<double>>& y);

}  // namespace metrics
}  // namespace casd
