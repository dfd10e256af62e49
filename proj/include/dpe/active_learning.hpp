#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dpe/data.hpp"
#include "dpe/ensemble.hpp"

namespace dpe {

/// Partition of pool positions 0..total-1 into labeled and unlabeled.
class LabelPool {
 public:
  explicit LabelPool(std::size_t total);
  /// Labels `count` positions drawn uniformly without replacement.
  static LabelPool random_seeded(std::size_t total, std::size_t count,
                                 std::uint64_t seed);

  std::size_t total() const { return total_; }
  const std::vector<std::size_t>& labeled() const { return labeled_; }
  const std::vector<std::size_t>& unlabeled() const { return unlabeled_; }

  /// Moves `indices` from unlabeled to labeled. Throws ConfigError if any
  /// index is not currently unlabeled.
  void label(std::span<const std::size_t> indices);

  /// Disjoint, exhaustive, each list sorted.
  bool invariant_holds() const;

 private:
  std::size_t total_;
  std::vector<std::size_t> labeled_;
  std::vector<std::size_t> unlabeled_;
};

enum class Strategy { Random, EntropyEnsemble, EntropyDPE };

std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view name);

struct Schedule {
  double seed_fraction = 0.04;
  std::vector<double> fractions{0.08, 0.16, 0.32};

  void validate() const;
  /// Labeled counts per round (seed round first) for a pool of `total`.
  std::vector<std::size_t> counts(std::size_t total) const;
};

/// -sum p ln p, with 0 ln 0 = 0.
double prediction_entropy(std::span<const double> probs);

/// Top-k positions by score, ties to the lower position. Stable and exact.
std::vector<std::size_t> top_k_by_score(std::span<const std::size_t> positions,
                                        std::span<const double> scores,
                                        std::size_t k);

struct Acquisition {
  std::vector<std::size_t> indices;
  std::vector<double> entropies;  // entropy of each acquired point
};

/// Picks k unlabeled pool positions. `pool_x` holds the features of every
/// pool position (row i is position i).
Acquisition acquire(const EnsembleModel& model, const LabelPool& pool,
                    const Tensor& pool_x, std::size_t k, Strategy strategy,
                    std::uint64_t seed);

/// Model and training settings for one active-learning experiment.
struct ExperimentConfig {
  Architecture arch;
  std::size_t ensemble_size = 4;
  TrainConfig train;
  /// DPE beta = beta_scale / labeled_count, unless fixed_beta is set.
  double beta_scale = 1.0;
  std::optional<double> fixed_beta;
  /// L2 coefficient for the plain-ensemble baseline.
  double ensemble_weight_decay = 5e-4;
  Schedule schedule;
  bool warm_start = false;
  unsigned threads = 1;
};

struct RoundReport {
  std::size_t round = 0;
  double labeled_fraction = 0.0;
  std::size_t labeled_count = 0;
  Strategy strategy = Strategy::Random;
  std::uint64_t seed = 0;
  double val_accuracy = 0.0;
  double val_nll = 0.0;
  /// NaN for the seed round.
  double mean_acquired_entropy = 0.0;
};

struct RoundResult {
  RoundReport report;
  EnsembleModel model;
  /// Fitted on the labeled rows; the model expects inputs mapped by it.
  Standardizer standardizer;
};

/// Beta and L2 coefficient that `strategy` trains with at a labeled-set
/// size. Random shares the DPE objective so that only acquisition differs.
struct Objective {
  double beta = 0.0;
  double weight_decay = 0.0;
};
Objective objective_for(const ExperimentConfig& config, Strategy strategy,
                        std::size_t labeled_count);

/// Trains a fresh ensemble on the labeled pool positions and evaluates it
/// on the validation split. Depends only on its arguments.
RoundResult train_round(const Dataset& data, const ExperimentConfig& config,
                        Strategy strategy, std::uint64_t seed, std::size_t round,
                        std::span<const std::size_t> labeled_positions,
                        const EnsembleModel* warm = nullptr);

std::vector<RoundReport> run_schedule(const Dataset& data,
                                      const ExperimentConfig& config,
                                      Strategy strategy, std::uint64_t seed);

struct SummaryRow {
  Strategy strategy = Strategy::Random;
  std::size_t round = 0;
  double labeled_fraction = 0.0;
  std::size_t labeled_count = 0;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // sample std, 0 for one seed
  double upper_bound = 0.0;   // mean accuracy with every pool point labeled
  double relative = 0.0;      // 100 * mean_accuracy / upper_bound
};

struct Comparison {
  std::vector<RoundReport> rounds;
  std::vector<SummaryRow> summary;
};

/// Accuracy relative to the full-data run, in percent.
double relative_performance(double accuracy, double upper_bound);

/// Runs every (strategy, seed) schedule with seeds base_seed + s, plus one
/// full-data run per (strategy, seed) for the upper bound.
Comparison compare_strategies(const Dataset& data,
                              const ExperimentConfig& config,
                              std::span<const Strategy> strategies,
                              std::size_t n_seeds, std::uint64_t base_seed);

}  // namespace dpe
