#pragma once

// Reference computations used only by the tests. Nothing here calls into the
// code paths it is used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "dpe/ensemble.hpp"
#include "dpe/nn.hpp"
#include "dpe/random.hpp"

namespace oracle {

inline dpe::Tensor random_tensor(dpe::Shape shape, std::uint64_t seed, double scale = 1.0) {
  dpe::Tensor t(std::move(shape));
  dpe::Rng rng(seed);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

inline std::vector<int> random_labels(std::size_t n, int k, std::uint64_t seed) {
  dpe::Rng rng(seed);
  std::vector<int> y(n);
  for (int& v : y) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
  return y;
}

inline double central_difference(const std::function<double(double)>& f,
                                 double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

/// Richardson-extrapolated central difference, O(h^4).
inline double richardson_difference(const std::function<double(double)>& f,
                                    double x, double h) {
  return (4.0 * central_difference(f, x, h / 2) - central_difference(f, x, h)) / 3.0;
}

/// |a - b| / max(|a|, |b|, floor).
inline double rel_error(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Finite-difference gradient of `loss(net)` with respect to every
/// parameter, perturbing one scalar at a time on a copy of `net`.
inline dpe::Gradients numeric_gradients(
    const dpe::Network& net, const std::function<double(dpe::Network&)>& loss,
    double h) {
  dpe::Network probe = net;
  dpe::Gradients g = net.zero_gradients();
  for (std::size_t b = 0; b < g.blocks.size(); ++b) {
    for (std::size_t i = 0; i < g.blocks[b].size(); ++i) {
      const double orig = probe.params()[b].value[i];
      probe.mutable_params()[b].value[i] = orig + h;
      const double up = loss(probe);
      probe.mutable_params()[b].value[i] = orig - h;
      const double down = loss(probe);
      probe.mutable_params()[b].value[i] = orig;
      g.blocks[b][i] = (up - down) / (2.0 * h);
    }
  }
  return g;
}

/// Nested-vector matrix product y = x W^T + b.
inline std::vector<std::vector<double>> affine(
    const std::vector<std::vector<double>>& x,
    const std::vector<std::vector<double>>& w, const std::vector<double>& b) {
  std::vector<std::vector<double>> y(x.size(), std::vector<double>(w.size()));
  for (std::size_t n = 0; n < x.size(); ++n)
    for (std::size_t o = 0; o < w.size(); ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < x[n].size(); ++i) s += x[n][i] * w[o][i];
      y[n][o] = s;
    }
  return y;
}

inline std::vector<std::vector<double>> as_matrix(const dpe::Tensor& t) {
  const std::size_t rows = t.dim(0), cols = t.size() / rows;
  std::vector<std::vector<double>> m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = t[r * cols + c];
  return m;
}

/// The per-layer penalty written out term by term for a convolution-shaped
/// group: sum_i log s2 + 2 / (n_o w h s2) + mu^2 / s2, members in `values`
/// laid out as values[member][param]. s2 is the population variance with the
/// same 1e-8 floor the library applies; random E=2 draws do hit it.
inline double conv_penalty_loop(const std::vector<std::vector<double>>& values,
                                double n_o, double w, double h) {
  const std::size_t members = values.size(), width = values[0].size();
  double total = 0.0;
  for (std::size_t i = 0; i < width; ++i) {
    double mu = 0.0;
    for (std::size_t e = 0; e < members; ++e) mu += values[e][i];
    mu /= static_cast<double>(members);
    double s2 = 0.0;
    for (std::size_t e = 0; e < members; ++e)
      s2 += (values[e][i] - mu) * (values[e][i] - mu);
    s2 = std::max(s2 / static_cast<double>(members), 1e-8);
    total += std::log(s2) + 2.0 / (n_o * w * h * s2) + mu * mu / s2;
  }
  return total;
}

/// General-prior penalty for one group by a direct loop.
inline double penalty_loop(const std::vector<std::vector<double>>& values,
                           double mu_p, double var_p) {
  const std::size_t members = values.size(), width = values[0].size();
  double total = 0.0;
  for (std::size_t i = 0; i < width; ++i) {
    double mu = 0.0;
    for (std::size_t e = 0; e < members; ++e) mu += values[e][i];
    mu /= static_cast<double>(members);
    double s2 = 0.0;
    for (std::size_t e = 0; e < members; ++e)
      s2 += (values[e][i] - mu) * (values[e][i] - mu);
    s2 = std::max(s2 / static_cast<double>(members), 1e-8);
    total += std::log(s2) + (var_p + (mu - mu_p) * (mu - mu_p)) / s2;
  }
  return total;
}

/// Full sort of (score desc, position asc) pairs, first k positions.
inline std::vector<std::size_t> brute_force_top_k(
    const std::vector<std::size_t>& positions,
    const std::vector<double>& scores, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < positions.size(); ++i)
    all.emplace_back(-scores[i], positions[i]);
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
  return out;
}

/// Mean of member softmax rows by explicit loops over members and classes.
inline std::vector<std::vector<double>> mean_softmax_loop(
    const dpe::EnsembleModel& model, const dpe::Tensor& x) {
  std::vector<std::vector<double>> acc;
  for (const auto& member : model.members) {
    auto logits = as_matrix(dpe::predict_logits(member, x));
    if (acc.empty()) acc.assign(logits.size(), std::vector<double>(logits[0].size(), 0.0));
    for (std::size_t r = 0; r < logits.size(); ++r) {
      double z = 0.0;
      for (double v : logits[r]) z += std::exp(v);
      for (std::size_t c = 0; c < logits[r].size(); ++c)
        acc[r][c] += std::exp(logits[r][c]) / z;
    }
  }
  for (auto& row : acc)
    for (double& v : row) v /= static_cast<double>(model.size());
  return acc;
}

}  // namespace oracle
