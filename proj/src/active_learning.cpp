#include "dpe/active_learning.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <thread>

#include "dpe/error.hpp"
#include "dpe/random.hpp"

namespace dpe {

LabelPool::LabelPool(std::size_t total) : total_(total), unlabeled_(total) {
  std::iota(unlabeled_.begin(), unlabeled_.end(), std::size_t{0});
}

LabelPool LabelPool::random_seeded(std::size_t total, std::size_t count,
                                   std::uint64_t seed) {
  if (count > total) {
    throw ConfigError("cannot seed " + std::to_string(count) +
                      " labels from a pool of " + std::to_string(total));
  }
  LabelPool pool(total);
  std::vector<std::size_t> order = pool.unlabeled_;
  Rng rng(seed);
  rng.shuffle(order);
  order.resize(count);
  pool.label(order);
  return pool;
}

void LabelPool::label(std::span<const std::size_t> indices) {
  std::vector<std::size_t> moving(indices.begin(), indices.end());
  std::sort(moving.begin(), moving.end());
  if (std::adjacent_find(moving.begin(), moving.end()) != moving.end()) {
    throw ConfigError("acquired indices contain duplicates");
  }
  for (std::size_t i : moving) {
    if (!std::binary_search(unlabeled_.begin(), unlabeled_.end(), i)) {
      throw ConfigError("index " + std::to_string(i) + " is not unlabeled");
    }
  }
  std::vector<std::size_t> rest;
  rest.reserve(unlabeled_.size() - moving.size());
  std::set_difference(unlabeled_.begin(), unlabeled_.end(), moving.begin(),
                      moving.end(), std::back_inserter(rest));
  unlabeled_ = std::move(rest);
  std::vector<std::size_t> merged;
  merged.reserve(labeled_.size() + moving.size());
  std::merge(labeled_.begin(), labeled_.end(), moving.begin(), moving.end(),
             std::back_inserter(merged));
  labeled_ = std::move(merged);
}

bool LabelPool::invariant_holds() const {
  if (labeled_.size() + unlabeled_.size() != total_) return false;
  if (!std::is_sorted(labeled_.begin(), labeled_.end()) ||
      !std::is_sorted(unlabeled_.begin(), unlabeled_.end())) {
    return false;
  }
  std::vector<char> seen(total_, 0);
  for (const auto* part : {&labeled_, &unlabeled_}) {
    for (std::size_t i : *part) {
      if (i >= total_ || seen[i]) return false;
      seen[i] = 1;
    }
  }
  return true;
}

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::Random: return "random";
    case Strategy::EntropyEnsemble: return "ensemble";
    case Strategy::EntropyDPE: return "dpe";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "random") return Strategy::Random;
  if (name == "ensemble") return Strategy::EntropyEnsemble;
  if (name == "dpe") return Strategy::EntropyDPE;
  throw ConfigError("unknown strategy '" + std::string(name) +
                    "' (valid: random, ensemble, dpe)");
}

void Schedule::validate() const {
  if (!(seed_fraction > 0.0 && seed_fraction <= 1.0)) {
    throw ConfigError("seed fraction must be in (0, 1]");
  }
  if (fractions.empty()) throw ConfigError("schedule has no budget fractions");
  if (seed_fraction > fractions.front()) {
    throw ConfigError("seed fraction exceeds the first budget fraction");
  }
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] > 0.0 && fractions[i] <= 1.0)) {
      throw ConfigError("budget fractions must lie in (0, 1]");
    }
    if (i && !(fractions[i] > fractions[i - 1])) {
      throw ConfigError("budget fractions must be strictly increasing");
    }
  }
}

std::vector<std::size_t> Schedule::counts(std::size_t total) const {
  validate();
  auto count_of = [&](double f) {
    return static_cast<std::size_t>(std::llround(f * static_cast<double>(total)));
  };
  std::vector<std::size_t> out{count_of(seed_fraction)};
  if (out[0] == 0) throw ConfigError("seed fraction labels no points");
  for (double f : fractions) out.push_back(std::max(out.back(), count_of(f)));
  return out;
}

double prediction_entropy(std::span<const double> probs) {
  double sum = 0.0, h = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || p > 1.0 + 1e-12) {
      throw ConfigError("prediction_entropy: entries must lie in [0, 1]");
    }
    sum += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (probs.empty() || std::abs(sum - 1.0) > 1e-6) {
    throw ConfigError("prediction_entropy: probabilities must sum to 1");
  }
  return h;
}

std::vector<std::size_t> top_k_by_score(std::span<const std::size_t> positions,
                                        std::span<const double> scores,
                                        std::size_t k) {
  if (positions.size() != scores.size()) {
    throw ConfigError("top_k_by_score: positions and scores differ in length");
  }
  if (k > positions.size()) {
    throw ConfigError("cannot pick " + std::to_string(k) + " of " +
                      std::to_string(positions.size()) + " candidates");
  }
  for (double s : scores) {
    if (std::isnan(s)) throw NumericError("acquisition score is NaN");
  }
  std::vector<std::size_t> order(positions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return positions[a] < positions[b];
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                    order.end(), better);
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = positions[order[i]];
  return out;
}

Acquisition acquire(const EnsembleModel& model, const LabelPool& pool,
                    const Tensor& pool_x, std::size_t k, Strategy strategy,
                    std::uint64_t seed) {
  const auto& candidates = pool.unlabeled();
  if (k > candidates.size()) {
    throw ConfigError("cannot acquire " + std::to_string(k) + " points from " +
                      std::to_string(candidates.size()) + " unlabeled");
  }
  if (pool_x.rank() == 0 || pool_x.dim(0) != pool.total()) {
    throw ConfigError("pool features do not cover the pool");
  }
  Acquisition out;
  if (k == 0) return out;

  const Tensor probs = predict_mean(model, pool_x.gather_rows(candidates));
  const std::size_t n_classes = probs.dim(1);
  std::vector<double> entropy(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    entropy[i] = prediction_entropy(
        std::span<const double>(probs.data().data() + i * n_classes, n_classes));
  }
  std::map<std::size_t, double> by_position;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    by_position.emplace(candidates[i], entropy[i]);
  }

  if (strategy == Strategy::Random) {
    std::vector<std::size_t> order = candidates;
    Rng rng(seed);
    rng.shuffle(order);
    order.resize(k);
    out.indices = std::move(order);
  } else {
    out.indices = top_k_by_score(candidates, entropy, k);
  }
  for (std::size_t i : out.indices) out.entropies.push_back(by_position.at(i));
  return out;
}

Objective objective_for(const ExperimentConfig& config, Strategy strategy,
                        std::size_t labeled_count) {
  if (strategy == Strategy::EntropyEnsemble) {
    return {0.0, config.ensemble_weight_decay};
  }
  if (config.fixed_beta) return {*config.fixed_beta, 0.0};
  return {config.beta_scale / static_cast<double>(labeled_count), 0.0};
}

RoundResult train_round(const Dataset& data, const ExperimentConfig& config,
                        Strategy strategy, std::uint64_t seed, std::size_t round,
                        std::span<const std::size_t> labeled_positions,
                        const EnsembleModel* warm) {
  if (labeled_positions.empty()) throw ConfigError("no labeled points");
  if (data.val_idx.empty()) throw ConfigError("dataset has no validation split");
  std::vector<std::size_t> rows;
  rows.reserve(labeled_positions.size());
  for (std::size_t p : labeled_positions) rows.push_back(data.train_idx.at(p));

  Standardizer standardizer = Standardizer::fit(data.features, rows);
  Samples train_set = data.subset(rows);
  train_set.x = standardizer.apply(train_set.x);
  Samples val_set = data.subset(data.val_idx);
  val_set.x = standardizer.apply(val_set.x);

  const Objective obj = objective_for(config, strategy, rows.size());
  EnsembleModel model =
      warm ? *warm
           : init_ensemble(config.arch, config.ensemble_size, obj.beta,
                           mix_seed(seed, 100 + round));
  TrainConfig tc = config.train;
  tc.seed = mix_seed(seed, 200 + round);
  tc.beta = obj.beta;
  tc.weight_decay = obj.weight_decay;
  tc.track_accuracy = false;
  train(model, train_set, tc);

  const Tensor probs = predict_mean(model, val_set.x);
  RoundReport rep;
  rep.round = round;
  rep.labeled_count = rows.size();
  rep.labeled_fraction =
      static_cast<double>(rows.size()) / static_cast<double>(data.train_idx.size());
  rep.strategy = strategy;
  rep.seed = seed;
  rep.val_accuracy = accuracy(probs, val_set.y);
  rep.val_nll = mean_nll(probs, val_set.y);
  rep.mean_acquired_entropy = std::numeric_limits<double>::quiet_NaN();
  return {rep, std::move(model), std::move(standardizer)};
}

std::vector<RoundReport> run_schedule(const Dataset& data,
                                      const ExperimentConfig& config,
                                      Strategy strategy, std::uint64_t seed) {
  const std::size_t total = data.train_idx.size();
  const auto counts = config.schedule.counts(total);
  LabelPool pool = LabelPool::random_seeded(total, counts[0], mix_seed(seed, 1));

  std::vector<RoundReport> reports;
  RoundResult current = train_round(data, config, strategy, seed, 0, pool.labeled());
  reports.push_back(current.report);

  const Tensor train_features = data.features.gather_rows(data.train_idx);
  for (std::size_t r = 1; r < counts.size(); ++r) {
    const std::size_t k = counts[r] - pool.labeled().size();
    const Tensor pool_x = current.standardizer.apply(train_features);
    Acquisition acq = acquire(current.model, pool, pool_x, k, strategy,
                              mix_seed(seed, 300 + r));
    pool.label(acq.indices);
    if (!pool.invariant_holds()) {
      throw std::logic_error("label pool partition broken after acquisition");
    }
    RoundResult next = train_round(data, config, strategy, seed, r,
                                   pool.labeled(),
                                   config.warm_start ? &current.model : nullptr);
    double mean_entropy = std::numeric_limits<double>::quiet_NaN();
    if (!acq.entropies.empty()) {
      mean_entropy = std::accumulate(acq.entropies.begin(), acq.entropies.end(), 0.0) /
                     static_cast<double>(acq.entropies.size());
    }
    next.report.mean_acquired_entropy = mean_entropy;
    reports.push_back(next.report);
    current = std::move(next);
  }
  return reports;
}

double relative_performance(double accuracy, double upper_bound) {
  if (!(upper_bound > 0.0)) throw ConfigError("upper bound must be > 0");
  return 100.0 * accuracy / upper_bound;
}

namespace {

// Runs jobs[i]() for every i on up to `threads` workers; rethrows the first
// failure in job order.
void run_jobs(std::vector<std::function<void()>>& jobs, unsigned threads) {
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
      try {
        jobs[i]();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(threads, jobs.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

Comparison compare_strategies(const Dataset& data,
                              const ExperimentConfig& config,
                              std::span<const Strategy> strategies,
                              std::size_t n_seeds, std::uint64_t base_seed) {
  if (n_seeds == 0) throw ConfigError("need at least one seed");
  if (strategies.empty()) throw ConfigError("no strategies to compare");
  const std::size_t total = data.train_idx.size();
  std::vector<std::size_t> all(total);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const std::size_t full_round = 1000;

  // Random and DPE train the same objective, so their full-data runs coincide.
  auto upper_key = [](Strategy s) {
    return s == Strategy::EntropyEnsemble ? 1 : 0;
  };

  std::vector<std::vector<RoundReport>> schedules(strategies.size() * n_seeds);
  std::map<std::pair<int, std::size_t>, double> upper;
  std::vector<std::pair<int, std::size_t>> upper_jobs;
  for (Strategy s : strategies) {
    for (std::size_t j = 0; j < n_seeds; ++j) {
      if (upper.emplace(std::pair{upper_key(s), j}, 0.0).second) {
        upper_jobs.emplace_back(upper_key(s), j);
      }
    }
  }
  std::vector<double> upper_values(upper_jobs.size());

  std::vector<std::function<void()>> jobs;
  for (std::size_t si = 0; si < strategies.size(); ++si) {
    for (std::size_t j = 0; j < n_seeds; ++j) {
      jobs.push_back([&, si, j] {
        schedules[si * n_seeds + j] =
            run_schedule(data, config, strategies[si], base_seed + j);
      });
    }
  }
  for (std::size_t u = 0; u < upper_jobs.size(); ++u) {
    jobs.push_back([&, u] {
      const Strategy s = upper_jobs[u].first == 1 ? Strategy::EntropyEnsemble
                                                  : Strategy::EntropyDPE;
      const std::uint64_t seed = base_seed + upper_jobs[u].second;
      upper_values[u] =
          train_round(data, config, s, seed, full_round, all).report.val_accuracy;
    });
  }
  run_jobs(jobs, config.threads);
  for (std::size_t u = 0; u < upper_jobs.size(); ++u) {
    upper[upper_jobs[u]] = upper_values[u];
  }

  Comparison out;
  for (const auto& sched : schedules) {
    out.rounds.insert(out.rounds.end(), sched.begin(), sched.end());
  }
  for (std::size_t si = 0; si < strategies.size(); ++si) {
    double ub = 0.0;
    for (std::size_t j = 0; j < n_seeds; ++j) ub += upper.at({upper_key(strategies[si]), j});
    ub /= static_cast<double>(n_seeds);
    const auto& first = schedules[si * n_seeds];
    for (std::size_t r = 0; r < first.size(); ++r) {
      std::vector<double> acc;
      for (std::size_t j = 0; j < n_seeds; ++j) {
        acc.push_back(schedules[si * n_seeds + j][r].val_accuracy);
      }
      const double mean =
          std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(n_seeds);
      double sq = 0.0;
      for (double a : acc) sq += (a - mean) * (a - mean);
      SummaryRow row;
      row.strategy = strategies[si];
      row.round = r;
      row.labeled_fraction = first[r].labeled_fraction;
      row.labeled_count = first[r].labeled_count;
      row.mean_accuracy = mean;
      row.std_accuracy =
          n_seeds > 1 ? std::sqrt(sq / static_cast<double>(n_seeds - 1)) : 0.0;
      row.upper_bound = ub;
      row.relative = relative_performance(mean, ub);
      out.summary.push_back(row);
    }
  }
  return out;
}

}  // namespace dpe
