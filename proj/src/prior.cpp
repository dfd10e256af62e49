#include "dpe/prior.hpp"

#include "dpe/error.hpp"

namespace dpe {

namespace {
constexpr double kBatchNormVariance = 0.01;
}

PriorSpec conv_prior(std::size_t n_i, std::size_t n_o, std::size_t w,
                     std::size_t h) {
  if (n_i == 0 || n_o == 0 || w == 0 || h == 0) {
    throw ConfigError("conv_prior: channel and kernel counts must be >= 1");
  }
  return {0.0, 2.0 / static_cast<double>(n_o * w * h), {}};
}

PriorSpec dense_prior(std::size_t n_in, std::size_t n_out,
                      std::size_t spatial) {
  if (n_in == 0 || n_out == 0 || spatial == 0) {
    throw ConfigError("dense_prior: counts must be >= 1");
  }
  return {0.0, 2.0 / static_cast<double>(n_out * spatial), {}};
}

PriorSpec batchnorm_prior(bool is_weight) {
  return {is_weight ? 1.0 : 0.0, kBatchNormVariance, {}};
}

PriorSpec bias_prior() { return {0.0, kBatchNormVariance, {}}; }

}  // namespace dpe
