#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpe/prior.hpp"
#include "dpe/tensor.hpp"

namespace dpe {

class Network;

/// Numerical floor applied to cross-member variances.
inline constexpr double kVarianceFloor = 1e-8;

/// One parameter block stacked over the ensemble: values has shape (E, P).
struct ParameterGroup {
  std::string name;
  Tensor values;
  std::optional<PriorSpec> prior;

  std::size_t members() const { return values.rank() ? values.dim(0) : 0; }
  std::size_t width() const { return values.rank() ? values.dim(1) : 0; }
};

struct GroupStats {
  std::vector<double> mu;
  std::vector<double> var;     // population variance, floored
  std::vector<char> floored;   // 1 where the floor engaged
};

/// 0.5 * (log(var_q/var_p) + (var_p + (mu_q - mu_p)^2) / var_q - 1).
///
/// This is the closed form the penalty is derived from; note var_q (not
/// var_p) sits in the denominator.
double gaussian_kl(double mu_q, double var_q, double mu_p, double var_p);

/// Cross-member mean and population variance of every column. Member sums
/// run in sorted order so the result does not depend on member order.
GroupStats group_stats(const ParameterGroup& group);

/// Sum over columns of log var + (sigma2_p + (mu - mu_p)^2) / var.
double omega_group(const ParameterGroup& group);

double omega_total(std::span<const ParameterGroup> groups);

/// d(omega_total)/d(values) for every group, each shaped (E, P). The
/// variance floor acts as a stop-gradient.
std::vector<Tensor> omega_gradient(std::span<const ParameterGroup> groups);

/// Stacks matching parameter blocks of all members into groups. Members
/// must share one architecture.
std::vector<ParameterGroup> collect_groups(std::span<const Network> members);

}  // namespace dpe
