#include "doctest.h"
#include "dpe/error.hpp"
#include "dpe/prior.hpp"

using namespace dpe;

TEST_CASE("conv prior uses output channels and kernel area") {
  PriorSpec p = conv_prior(3, 16, 3, 3);
  CHECK(p.mu_p == 0.0);
  CHECK(p.sigma2_p == doctest::Approx(0.013888888888888889).epsilon(1e-15));
  CHECK(conv_prior(1, 2, 1, 1).sigma2_p == 1.0);
  CHECK(conv_prior(64, 64, 3, 3).sigma2_p ==
        doctest::Approx(0.0034722222222222222).epsilon(1e-15));
  // Input channels do not enter the variance.
  CHECK(conv_prior(1, 16, 3, 3).sigma2_p == conv_prior(512, 16, 3, 3).sigma2_p);
  CHECK_THROWS_AS(conv_prior(0, 1, 1, 1), ConfigError);
  CHECK_THROWS_AS(conv_prior(1, 1, 0, 1), ConfigError);
}

TEST_CASE("conv prior variance decreases in n_o, w and h") {
  for (std::size_t n = 1; n < 20; ++n) {
    CHECK(conv_prior(3, n + 1, 3, 3).sigma2_p < conv_prior(3, n, 3, 3).sigma2_p);
    CHECK(conv_prior(3, 8, n + 1, 3).sigma2_p < conv_prior(3, 8, n, 3).sigma2_p);
    CHECK(conv_prior(3, 8, 3, n + 1).sigma2_p < conv_prior(3, 8, 3, n).sigma2_p);
  }
}

TEST_CASE("dense prior as the full-kernel convolution") {
  CHECK(dense_prior(32, 10).sigma2_p == doctest::Approx(0.2));
  CHECK(dense_prior(8 * 16, 8, 16).sigma2_p == 0.015625);
  CHECK(dense_prior(1000, 2).sigma2_p == 1.0);
  CHECK(dense_prior(5, 5).mu_p == 0.0);
  CHECK_THROWS_AS(dense_prior(0, 2), ConfigError);
  CHECK_THROWS_AS(dense_prior(2, 0), ConfigError);
}

TEST_CASE("batch-norm and bias priors") {
  CHECK(batchnorm_prior(true).mu_p == 1.0);
  CHECK(batchnorm_prior(true).sigma2_p == 0.01);
  CHECK(batchnorm_prior(false).mu_p == 0.0);
  CHECK(batchnorm_prior(false).sigma2_p == 0.01);
  CHECK(bias_prior().mu_p == 0.0);
  CHECK(bias_prior().sigma2_p == 0.01);
}
