// Quick throughput check for the GEMM microkernel on the conv shapes the
// generator actually uses.
#include <chrono>
#include <cstdio>
#include <vector>

#include "casd/common.hpp"
#include "casd/gemm.hpp"

using namespace casd;

template <typename T>
static double bench(int M, int K, int N, int reps) {
  std::vector<T> A(size_t(M) * K), B(size_t(K) * N), C(size_t(M) * N);
  Rng rng(7);
  for (auto& v : A) v = T(rng.normal());
  for (auto& v : B) v = T(rng.normal());
  auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) gemm::gemm_nn(A.data(), B.data(), C.data(), M, K, N, false);
  auto t1 = std::chrono::steady_clock::now();
  double sec = std::chrono::duration<double>(t1 - t0).count();
  double flops = 2.0 * M * K * N * reps;
  return flops / sec / 1e9;
}

int main() {
  struct Case {
    int M, K, N;
    const char* what;
  } cases[] = {
      {3072, 1470, 16, "pose conv1 7x7x30->16 @64x48"},
      {3072, 147, 16, "style conv1 7x7x3->16 @64x48"},
      {768, 512, 32, "style conv2 4x4x32->32 @32x24"},
      {192, 1024, 64, "style conv3 4x4x64->64 @16x12"},
      {48, 2048, 128, "style conv4 4x4x128->128 @8x6"},
      {192, 576, 64, "resblock 3x3x64->64 @16x12"},
      {1536, 1600, 16, "decoder conv 5x5x32->16 @64x48 (per-sample rows/2)"},
      {192, 64, 64, "attention QK proj"},
  };
  printf("%-44s %10s %10s\n", "case", "f32 GF/s", "f64 GF/s");
  for (auto& c : cases) {
    int reps = std::max(1, int(3e9 / (2.0 * c.M * c.K * c.N)));
    double g32 = bench<float>(c.M, c.K, c.N, reps);
    double g64 = bench<double>(c.M, c.K, c.N, std::max(1, reps / 2));
    printf("%-44s %10.2f %10.2f\n", c.what, g32, g64);
  }
  return 0;
}
