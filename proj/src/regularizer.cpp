#include "dpe/regularizer.hpp"

#include <algorithm>
#include <cmath>

#include "dpe/error.hpp"
#include "dpe/nn.hpp"

namespace dpe {

namespace {

void check_group(const ParameterGroup& group) {
  if (group.values.rank() != 2) {
    throw ConfigError("parameter group '" + group.name +
                      "' must be shaped (members, parameters)");
  }
  if (group.members() < 2) {
    throw ConfigError("parameter group '" + group.name +
                      "' needs at least 2 members, has " +
                      std::to_string(group.members()));
  }
  if (!group.prior) {
    throw ConfigError("parameter group '" + group.name + "' has no prior");
  }
  if (!(group.prior->sigma2_p > 0.0)) {
    throw ConfigError("parameter group '" + group.name +
                      "' has a non-positive prior variance");
  }
}

// Sum of a small set of values, taken in ascending order so that the result
// is independent of the order the members are stored in.
double sorted_sum(std::vector<double>& scratch) {
  std::sort(scratch.begin(), scratch.end());
  double s = 0.0;
  for (double v : scratch) s += v;
  return s;
}

}  // namespace

double gaussian_kl(double mu_q, double var_q, double mu_p, double var_p) {
  if (!(var_q > 0.0) || !(var_p > 0.0)) {
    throw ConfigError("gaussian_kl: variances must be positive");
  }
  const double d = mu_q - mu_p;
  return 0.5 * (std::log(var_q / var_p) + (var_p + d * d) / var_q - 1.0);
}

GroupStats group_stats(const ParameterGroup& group) {
  if (group.values.rank() != 2 || group.members() < 2) {
    throw ConfigError("group_stats: need at least 2 members in group '" +
                      group.name + "'");
  }
  const std::size_t members = group.members(), width = group.width();
  const double e = static_cast<double>(members);
  GroupStats stats;
  stats.mu.resize(width);
  stats.var.resize(width);
  stats.floored.resize(width);
  std::vector<double> scratch(members);
  for (std::size_t i = 0; i < width; ++i) {
    for (std::size_t m = 0; m < members; ++m) scratch[m] = group.values.at(m, i);
    const double mu = sorted_sum(scratch) / e;
    for (std::size_t m = 0; m < members; ++m) {
      const double d = group.values.at(m, i) - mu;
      scratch[m] = d * d;
    }
    const double var = sorted_sum(scratch) / e;
    stats.mu[i] = mu;
    stats.floored[i] = var < kVarianceFloor;
    stats.var[i] = std::max(var, kVarianceFloor);
  }
  return stats;
}

double omega_group(const ParameterGroup& group) {
  check_group(group);
  const GroupStats stats = group_stats(group);
  const double mu_p = group.prior->mu_p, var_p = group.prior->sigma2_p;
  double total = 0.0;
  for (std::size_t i = 0; i < stats.mu.size(); ++i) {
    const double d = stats.mu[i] - mu_p;
    total += std::log(stats.var[i]) + (var_p + d * d) / stats.var[i];
  }
  return total;
}

double omega_total(std::span<const ParameterGroup> groups) {
  double total = 0.0;
  for (const auto& g : groups) total += omega_group(g);
  return total;
}

std::vector<Tensor> omega_gradient(std::span<const ParameterGroup> groups) {
  std::vector<Tensor> out;
  out.reserve(groups.size());
  for (const auto& group : groups) {
    check_group(group);
    const GroupStats stats = group_stats(group);
    const double mu_p = group.prior->mu_p, var_p = group.prior->sigma2_p;
    const double e = static_cast<double>(group.members());
    Tensor grad(group.values.shape());
    for (std::size_t i = 0; i < group.width(); ++i) {
      const double var = stats.var[i];
      const double d = stats.mu[i] - mu_p;
      const double mean_term = 2.0 * d / var / e;
      const double dvar = stats.floored[i]
                              ? 0.0
                              : 1.0 / var - (var_p + d * d) / (var * var);
      for (std::size_t m = 0; m < group.members(); ++m) {
        const double centered = group.values.at(m, i) - stats.mu[i];
        grad.at(m, i) = mean_term + dvar * 2.0 * centered / e;
      }
    }
    out.push_back(std::move(grad));
  }
  return out;
}

std::vector<ParameterGroup> collect_groups(std::span<const Network> members) {
  if (members.empty()) return {};
  const Network& first = members.front();
  std::vector<ParameterGroup> groups;
  groups.reserve(first.params().size());
  for (std::size_t b = 0; b < first.params().size(); ++b) {
    const ParamBlock& block = first.params()[b];
    const std::size_t width = block.value.size();
    ParameterGroup g{block.name, Tensor({members.size(), width}), block.prior};
    for (std::size_t m = 0; m < members.size(); ++m) {
      const auto& other = members[m].params();
      if (other.size() != first.params().size() ||
          other[b].value.size() != width || other[b].name != block.name) {
        throw ConfigError("ensemble members do not share one architecture");
      }
      std::copy(other[b].value.values().begin(), other[b].value.values().end(),
                g.values.values().begin() +
                    static_cast<std::ptrdiff_t>(m * width));
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

}  // namespace dpe
