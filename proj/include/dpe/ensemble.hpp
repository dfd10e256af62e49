#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dpe/nn.hpp"
#include "dpe/regularizer.hpp"

namespace dpe {

/// Features and integer labels held together.
struct Samples {
  Tensor x;
  std::vector<int> y;

  std::size_t size() const { return y.size(); }
};

/// E networks of one architecture trained under
///   sum_e CE(M_e) + beta * Omega(members).
struct EnsembleModel {
  std::vector<Network> members;
  double beta = 0.0;
  std::uint64_t seed = 0;

  std::size_t size() const { return members.size(); }
  const Architecture& architecture() const {
    return members.front().architecture();
  }
  std::vector<PriorSpec> prior_map() const;
};

/// Member e uses seed ^ e. Throws ConfigError when beta > 0 and E < 2.
EnsembleModel init_ensemble(const Architecture& arch, std::size_t members,
                            double beta, std::uint64_t seed);

struct TrainConfig {
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  /// Overrides EnsembleModel::beta when set.
  std::optional<double> beta;
  /// Per-member L2 coefficient: adds 0.5 * wd * |theta|^2 per member.
  double weight_decay = 0.0;
  /// Rescales each member's gradient to at most this L2 norm; 0 disables.
  double clip_norm = 0.0;
  /// Record accuracies every epoch (costs a full pass over the data).
  bool track_accuracy = true;
};

void validate(const TrainConfig& config);

struct JointLoss {
  double total = 0.0;
  double sum_ce = 0.0;   // sum over members of batch-mean cross-entropy
  double omega = 0.0;    // 0 when E < 2
  double l2 = 0.0;
  std::vector<Gradients> grads;
};

/// A scalar term of the objective with its gradient for every member.
struct MemberTerms {
  double value = 0.0;
  std::vector<Gradients> grads;
};

/// Sum over members of batch-mean cross-entropy (train-mode forward, so
/// batch-norm running averages advance).
MemberTerms likelihood_terms(EnsembleModel& model, const Tensor& x,
                             std::span<const int> y);

/// value = Omega(members); grads = beta * dOmega/dtheta per member.
MemberTerms omega_terms(const EnsembleModel& model, double beta);

/// likelihood_terms + beta * omega_terms + optional per-member L2.
/// The Omega term is skipped entirely when beta == 0.
JointLoss joint_loss(EnsembleModel& model, const Tensor& x,
                     std::span<const int> y, double beta,
                     double weight_decay = 0.0);

struct EpochRecord {
  std::size_t epoch = 0;
  double sum_ce = 0.0;      // mean over batches of JointLoss::sum_ce
  double omega = 0.0;       // measured at epoch end
  double beta_omega = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
};

/// Scales `grads` so its global L2 norm is at most max_norm.
void clip_gradient_norm(Gradients& grads, double max_norm);

/// Shuffled sample order for one epoch: a pure function of (n, seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                     std::size_t epoch);

/// Mini-batch SGD on the joint objective. Every member sees the same batch
/// sequence, produced by epoch_order(n, config.seed, epoch).
TrainReport train(EnsembleModel& model, const Samples& data,
                  const TrainConfig& config, const Samples* validation = nullptr);

/// Arithmetic mean of member softmax outputs in evaluation mode.
Tensor predict_mean(const EnsembleModel& model, const Tensor& x);

/// Omega over the current members, 0 for a single-member ensemble.
double measure_omega(const EnsembleModel& model);

/// Index of the largest entry per row, lowest index on ties.
std::vector<int> argmax_rows(const Tensor& probs);

double accuracy(const Tensor& probs, std::span<const int> labels);

/// Mean of -log p[label] on already-normalized probabilities.
double mean_nll(const Tensor& probs, std::span<const int> labels);

}  // namespace dpe
