#pragma once

#include <cstddef>
#include <string>

namespace dpe {

/// Gaussian prior N(mu_p, sigma2_p) shared by every scalar in one
/// parameter group.
struct PriorSpec {
  double mu_p = 0.0;
  double sigma2_p = 1.0;
  std::string group_id;

  friend bool operator==(const PriorSpec&, const PriorSpec&) = default;
};

/// Convolution weights with the ReLU activation: N(0, 2 / (n_o * w * h)).
///
/// The variance uses the output channel count, not the input channel
/// count. `n_i` only participates in validation.
PriorSpec conv_prior(std::size_t n_i, std::size_t n_o, std::size_t w,
                     std::size_t h);

/// Dense weights as a convolution whose kernel covers the whole input
/// activation. `spatial` is the kernel area of that equivalent
/// convolution: H*W for a (C, H, W) input, 1 for a flat vector.
PriorSpec dense_prior(std::size_t n_in, std::size_t n_out,
                      std::size_t spatial = 1);

/// Batch-norm scale (is_weight) is N(1, 0.01); shift is N(0, 0.01).
PriorSpec batchnorm_prior(bool is_weight);

/// Dense / conv bias prior, N(0, 0.01).
PriorSpec bias_prior();

}  // namespace dpe
