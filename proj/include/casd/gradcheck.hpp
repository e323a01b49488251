#pragma once

#include <functional>

#include "casd/nn.hpp"

namespace casd {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  int64_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  std::string worst_name;
  bool pass = true;

  void print(FILE* out = stdout) const {
    for (const auto& e : entries)
      std::fprintf(out, "  %-40s max rel err %.3e (%lld elements)\n", e.name.c_str(), e.max_rel_err,
                   (long long)e.checked);
    std::fprintf(out, "  overall max rel err %.3e in '%s' -> %s\n", max_rel_err, worst_name.c_str(),
                 pass ? "pass" : "FAIL");
  }
};

// Central finite differences against the analytic backward pass. `f` must be
// a deterministic scalar-valued forward pass over the given tensors. The
// relative error denominator is floored so that near-zero gradients are
// compared absolutely.
template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>()>& f,
                                  std::vector<std::pair<std::string, Tensor<T>>> targets,
                                  double h = 1e-5, double tol = 1e-4,
                                  int64_t sample_per_target = 0, uint64_t sample_seed = 0,
                                  double denom_floor = 1e-3) {
  for (auto& [name, t] : targets) {
    if (!t.requires_grad) fail("finite_diff_check: '" + name + "' does not require grad");
    t.zero_grad();
  }
  Tensor<T> loss = f();
  if (loss.numel() != 1) fail("finite_diff_check: objective must be scalar");
  if (!std::isfinite(double(loss.item()))) fail("finite_diff_check: non-finite objective value");
  loss.backward();

  std::vector<std::vector<T>> analytic;
  analytic.reserve(targets.size());
  for (auto& [name, t] : targets) analytic.push_back(*t.grad);

  GradCheckReport rep;
  Rng pick(sample_seed);
  NoGradGuard ng;
  for (size_t ti = 0; ti < targets.size(); ++ti) {
    Tensor<T>& t = targets[ti].second;
    GradCheckEntry e;
    e.name = targets[ti].first;
    std::vector<int64_t> idxs;
    if (sample_per_target > 0 && t.numel() > sample_per_target) {
      for (int64_t k = 0; k < sample_per_target; ++k) idxs.push_back(pick.next_u64() % uint64_t(t.numel()));
    } else {
      idxs.resize(size_t(t.numel()));
      for (int64_t k = 0; k < t.numel(); ++k) idxs[size_t(k)] = k;
    }
    for (int64_t j : idxs) {
      T orig = (*t.data)[size_t(j)];
      (*t.data)[size_t(j)] = orig + T(h);
      double fp = double(f().item());
      (*t.data)[size_t(j)] = orig - T(h);
      double fm = double(f().item());
      (*t.data)[size_t(j)] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        fail("finite_diff_check: non-finite objective while perturbing '" + e.name + "'");
      double fd = (fp - fm) / (2.0 * h);
      double an = double(analytic[ti][size_t(j)]);
      double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), denom_floor});
      if (rel > e.max_rel_err) {
        e.max_rel_err = rel;
        e.worst_index = j;
      }
      ++e.checked;
    }
    if (e.max_rel_err > rep.max_rel_err) {
      rep.max_rel_err = e.max_rel_err;
      rep.worst_name = e.name;
    }
    rep.entries.push_back(std::move(e));
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>()>& f, ParameterStore<T>& params,
                                  double h = 1e-5, double tol = 1e-4,
                                  int64_t sample_per_target = 0, uint64_t sample_seed = 0) {
  std::vector<std::pair<std::string, Tensor<T>>> targets;
  for (auto& [name, t] : params.items)
    if (t.requires_grad) targets.emplace_back(name, t);
  return finite_diff_check(f, std::move(targets), h, tol, sample_per_target, sample_seed);
}

}  // namespace casd
