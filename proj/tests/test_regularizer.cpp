#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "dpe/ensemble.hpp"
#include "dpe/error.hpp"
#include "dpe/random.hpp"
#include "dpe/regularizer.hpp"
#include "oracles.hpp"

using namespace dpe;

namespace {

ParameterGroup make_group(std::vector<std::vector<double>> rows, PriorSpec prior) {
  const std::size_t e = rows.size(), p = rows[0].size();
  Tensor t({e, p});
  for (std::size_t m = 0; m < e; ++m)
    for (std::size_t i = 0; i < p; ++i) t.at(m, i) = rows[m][i];
  return {"g", std::move(t), prior};
}

ParameterGroup random_group(std::size_t e, std::size_t p, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({e, p});
  for (double& v : t.values()) v = rng.normal(0.2, 0.5);
  return {"g", std::move(t), PriorSpec{rng.uniform(-0.5, 0.5), rng.uniform(0.01, 1.0), "g"}};
}

std::vector<std::vector<double>> rows_of(const ParameterGroup& g) {
  return oracle::as_matrix(g.values);
}

const PriorSpec kPrior{0.0, 0.25, "g"};

}  // namespace

TEST_CASE("gaussian_kl closed form") {
  CHECK(gaussian_kl(0, 1, 0, 1) == 0.0);
  CHECK(std::abs(gaussian_kl(1, 1, 0, 1) - 0.5) <= 1e-12);
  CHECK(std::abs(gaussian_kl(0, 1, 0, 2) - 0.15342640972002735) <= 1e-12);
  CHECK_THROWS_AS(gaussian_kl(0, 0, 0, 1), ConfigError);
  CHECK_THROWS_AS(gaussian_kl(0, 1, 0, -1), ConfigError);
}

TEST_CASE("group statistics use the population variance") {
  const auto g = make_group({{0.1}, {-0.1}, {0.2}, {-0.2}}, kPrior);
  const GroupStats s = group_stats(g);
  CHECK(std::abs(s.mu[0]) < 1e-17);
  CHECK(s.var[0] == doctest::Approx(0.025).epsilon(1e-14));

  const GroupStats flat = group_stats(make_group({{0.3}, {0.3}, {0.3}}, kPrior));
  CHECK(flat.var[0] == kVarianceFloor);
  CHECK(flat.floored[0]);

  const double a = 1.5, d = 0.25;
  const GroupStats two = group_stats(make_group({{a}, {a + 2 * d}}, kPrior));
  CHECK(two.mu[0] == a + d);
  CHECK(two.var[0] == doctest::Approx(d * d).epsilon(1e-14));

  CHECK_THROWS_AS(group_stats(make_group({{1.0, 2.0}}, kPrior)), ConfigError);
}

TEST_CASE("omega for a single group") {
  const auto g = make_group({{0.1}, {-0.1}, {0.2}, {-0.2}}, kPrior);
  CHECK(omega_group(g) == doctest::Approx(6.3111205458860637).epsilon(1e-13));

  // mu = mu_p and var = var_p gives log var_p + 1.
  const auto at_prior = make_group({{0.7}, {1.3}}, PriorSpec{1.0, 0.09, "g"});
  CHECK(omega_group(at_prior) == doctest::Approx(std::log(0.09) + 1.0).epsilon(1e-13));

  // Additivity over columns.
  const auto wide = random_group(4, 6, 3);
  double by_column = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    Tensor col({4, 1});
    for (std::size_t m = 0; m < 4; ++m) col[m] = wide.values.at(m, i);
    by_column += omega_group({"c", col, wide.prior});
  }
  CHECK(omega_group(wide) == doctest::Approx(by_column).epsilon(1e-14));

  ParameterGroup no_prior = wide;
  no_prior.prior.reset();
  CHECK_THROWS_AS(omega_group(no_prior), ConfigError);
}

TEST_CASE("omega over several groups") {
  CHECK(omega_total({}) == 0.0);
  const auto g = random_group(3, 5, 9);
  const std::vector<ParameterGroup> twice{g, g};
  CHECK(omega_total(twice) == 2.0 * omega_group(g));

  const Architecture arch = parse_architecture("dense:6,relu,dense:3", {2});
  const EnsembleModel model = init_ensemble(arch, 4, 0.1, 21);
  double loop = 0.0;
  for (const auto& group : collect_groups(model.members)) {
    loop += oracle::penalty_loop(rows_of(group), group.prior->mu_p, group.prior->sigma2_p);
  }
  CHECK(oracle::rel_error(measure_omega(model), loop) <= 1e-10);
}

TEST_CASE("omega reduces to the convolution-layer formula") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(s);
    const std::size_t n_i = 1 + rng.below(4), n_o = 1 + rng.below(8);
    const std::size_t w = 1 + rng.below(3), h = 1 + rng.below(3);
    const std::size_t e = 2 + rng.below(7);
    const PriorSpec prior = conv_prior(n_i, n_o, w, h);
    ParameterGroup g{"conv", Tensor({e, n_i * n_o * w * h}), prior};
    for (double& v : g.values.values()) v = rng.normal(0.0, std::sqrt(prior.sigma2_p));
    const double expected = oracle::conv_penalty_loop(rows_of(g), n_o, w, h);
    CHECK(oracle::rel_error(omega_group(g), expected) <= 1e-10);
  }
}

TEST_CASE("omega_gradient matches finite differences") {
  auto check = [](const ParameterGroup& g) {
    const std::vector<ParameterGroup> groups{g};
    const Tensor grad = omega_gradient(groups)[0];
    double worst = 0.0;
    const std::size_t e = g.members(), p = g.width();
    for (std::size_t k = 0; k < g.values.size(); ++k) {
      // Other columns are constant in theta_k; differencing the one column
      // alone keeps their magnitude out of the cancellation error.
      ParameterGroup column{"c", Tensor({e, 1}), g.prior};
      for (std::size_t m = 0; m < e; ++m) column.values[m] = g.values.at(m, k % p);
      const std::size_t row = k / p;
      const double numeric = oracle::richardson_difference(
          [&](double v) {
            ParameterGroup probe = column;
            probe.values[row] = v;
            return omega_group(probe);
          },
          g.values[k], 1e-6);
      worst = std::max(worst, oracle::rel_error(grad[k], numeric, 1.0));
    }
    return worst;
  };
  CHECK(check(make_group({{0.1}, {-0.1}, {0.2}, {-0.2}}, kPrior)) < 1e-6);
  for (std::size_t e : {2, 4, 8}) {
    for (std::uint64_t s = 0; s < 5; ++s) {
      CHECK(check(random_group(e, 1 + 13 * s, 100 * e + s)) < 1e-6);
    }
  }
}

TEST_CASE("omega_gradient identities") {
  // All members at mu_p: floor engaged, no variance gradient, zero mean term.
  const auto at_mean = make_group({{0.0, 1.0}, {0.0, 1.0}, {0.0, 1.0}},
                                  PriorSpec{0.0, 0.5, "g"});
  const Tensor g0 = omega_gradient(std::vector<ParameterGroup>{at_mean})[0];
  CHECK(g0.at(0, 0) == 0.0);
  CHECK(g0.at(1, 0) == 0.0);
  // Column 1 sits at 1.0 with mu_p = 0: only the mean term, equal for all.
  CHECK(g0.at(0, 1) == g0.at(2, 1));
  CHECK(g0.at(0, 1) == doctest::Approx(2.0 * 1.0 / kVarianceFloor / 3.0));

  // Variance-term gradients cancel across members when mu = mu_p.
  const auto centered = make_group({{0.3}, {-0.1}, {-0.4}, {0.2}}, PriorSpec{0.0, 0.2, "g"});
  const Tensor gc = omega_gradient(std::vector<ParameterGroup>{centered})[0];
  double sum = 0.0;
  for (double v : gc.values()) sum += v;
  CHECK(std::abs(sum) < 1e-12);
}

TEST_CASE("omega is invariant to member order") {
  const Architecture arch = parse_architecture("dense:8,relu,dense:3", {2});
  EnsembleModel model = init_ensemble(arch, 6, 1.0, 5);
  const double base = measure_omega(model);
  Rng rng(77);
  for (int t = 0; t < 10; ++t) {
    rng.shuffle(model.members);
    CHECK(std::abs(measure_omega(model) - base) <= 1e-12);
  }
}

TEST_CASE("per-parameter penalty minimum over the variance") {
  // For fixed mu, log v + c / v is minimized at v = c = var_p + (mu - mu_p)^2.
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const double mu = rng.uniform(-1, 1), mu_p = rng.uniform(-1, 1);
    const double var_p = std::exp(rng.uniform(std::log(1e-3), std::log(1.0)));
    const double c = var_p + (mu - mu_p) * (mu - mu_p);
    auto omega_at = [&](double v) {
      const double spread = std::sqrt(v);
      return omega_group(make_group({{mu - spread}, {mu + spread}}, PriorSpec{mu_p, var_p, "g"}));
    };
    CHECK(omega_at(c) < omega_at(c * 1.01));
    CHECK(omega_at(c) < omega_at(c * 0.99));
  }
}

TEST_CASE("penalty blows up as the variance collapses") {
  const PriorSpec prior{0.0, 0.1, "g"};
  double previous = -INFINITY;
  for (double spread = 1e-1; spread > 1e-4; spread /= 2) {
    const double omega = omega_group(make_group({{-spread}, {spread}}, prior));
    CHECK(omega > previous);
    previous = omega;
  }
  // Large-variance growth is logarithmic.
  const double big = omega_group(make_group({{-1e3}, {1e3}}, prior));
  CHECK(big == doctest::Approx(std::log(1e6)).epsilon(1e-6));
}

TEST_CASE("collect_groups rejects mixed architectures") {
  std::vector<Network> members{init_network(parse_architecture("dense:3", {2}), 0),
                               init_network(parse_architecture("dense:4", {2}), 0)};
  CHECK_THROWS_AS(collect_groups(members), ConfigError);
}
