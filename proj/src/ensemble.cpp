#include "dpe/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dpe/error.hpp"
#include "dpe/random.hpp"

namespace dpe {

std::vector<PriorSpec> EnsembleModel::prior_map() const {
  std::vector<PriorSpec> out;
  for (const auto& b : members.front().params()) out.push_back(b.prior);
  return out;
}

EnsembleModel init_ensemble(const Architecture& arch, std::size_t members,
                            double beta, std::uint64_t seed) {
  if (members == 0) throw ConfigError("ensemble needs at least one member");
  if (!(beta >= 0.0) || !std::isfinite(beta)) {
    throw ConfigError("beta must be a finite value >= 0");
  }
  if (beta > 0.0 && members < 2) {
    throw ConfigError("beta > 0 requires at least 2 ensemble members");
  }
  EnsembleModel model;
  model.beta = beta;
  model.seed = seed;
  model.members.reserve(members);
  for (std::size_t e = 0; e < members; ++e) {
    model.members.push_back(init_network(arch, seed ^ e));
  }
  return model;
}

void validate(const TrainConfig& c) {
  if (!(c.lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) {
    throw ConfigError("momentum must be in [0, 1)");
  }
  if (c.batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (c.epochs == 0) throw ConfigError("epochs must be >= 1");
  if (!(c.weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (!(c.clip_norm >= 0.0)) throw ConfigError("clip norm must be >= 0");
  if (c.beta && !(*c.beta >= 0.0)) throw ConfigError("beta must be >= 0");
}

MemberTerms likelihood_terms(EnsembleModel& model, const Tensor& x,
                             std::span<const int> y) {
  MemberTerms out;
  out.grads.reserve(model.size());
  for (Network& member : model.members) {
    ForwardResult fr = forward(member, x, /*train_mode=*/true);
    Tensor dlogits;
    out.value += cross_entropy(fr.logits, y, &dlogits);
    out.grads.push_back(backward(member, fr.cache, dlogits));
  }
  return out;
}

MemberTerms omega_terms(const EnsembleModel& model, double beta) {
  MemberTerms out;
  const auto groups = collect_groups(model.members);
  out.value = omega_total(groups);
  const auto grad = omega_gradient(groups);
  out.grads.reserve(model.size());
  for (std::size_t m = 0; m < model.size(); ++m) {
    Gradients g;
    g.blocks.reserve(groups.size());
    for (std::size_t b = 0; b < groups.size(); ++b) {
      const std::size_t width = groups[b].width();
      Tensor block(model.members[m].params()[b].value.shape());
      for (std::size_t i = 0; i < width; ++i) {
        block[i] = beta * grad[b].at(m, i);
      }
      g.blocks.push_back(std::move(block));
    }
    out.grads.push_back(std::move(g));
  }
  return out;
}

JointLoss joint_loss(EnsembleModel& model, const Tensor& x,
                     std::span<const int> y, double beta,
                     double weight_decay) {
  if (beta > 0.0 && model.size() < 2) {
    throw ConfigError("beta > 0 requires at least 2 ensemble members");
  }
  MemberTerms nll = likelihood_terms(model, x, y);
  JointLoss out;
  out.sum_ce = nll.value;
  out.grads = std::move(nll.grads);
  if (weight_decay > 0.0) {
    for (std::size_t m = 0; m < model.size(); ++m) {
      const auto& params = model.members[m].params();
      for (std::size_t b = 0; b < params.size(); ++b) {
        auto theta = params[b].value.data();
        auto g = out.grads[m].blocks[b].data();
        for (std::size_t i = 0; i < theta.size(); ++i) {
          out.l2 += 0.5 * weight_decay * theta[i] * theta[i];
          g[i] += weight_decay * theta[i];
        }
      }
    }
  }
  if (beta > 0.0) {
    MemberTerms reg = omega_terms(model, beta);
    out.omega = reg.value;
    for (std::size_t m = 0; m < model.size(); ++m) {
      out.grads[m].add_scaled(reg.grads[m], 1.0);
    }
  }
  out.total = out.sum_ce + beta * out.omega + out.l2;
  if (!std::isfinite(out.total)) throw NumericError("joint loss is not finite");
  return out;
}

void clip_gradient_norm(Gradients& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& b : grads.blocks)
    for (double v : b.values()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double scale = max_norm / norm;
  for (Tensor& b : grads.blocks)
    for (double& v : b.values()) v *= scale;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                     std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, epoch));
  rng.shuffle(order);
  return order;
}

double measure_omega(const EnsembleModel& model) {
  if (model.size() < 2) return 0.0;
  return omega_total(collect_groups(model.members));
}

TrainReport train(EnsembleModel& model, const Samples& data,
                  const TrainConfig& config, const Samples* validation) {
  validate(config);
  if (data.size() == 0) throw ConfigError("training set is empty");
  if (data.x.rank() == 0 || data.x.dim(0) != data.size()) {
    throw ConfigError("training features and labels disagree in length");
  }
  const double beta = config.beta.value_or(model.beta);
  if (beta > 0.0 && model.size() < 2) {
    throw ConfigError("beta > 0 requires at least 2 ensemble members");
  }
  model.beta = beta;

  TrainReport report;
  const std::size_t n = data.size();
  std::vector<int> yb;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = epoch_order(n, config.seed, epoch);
    double sum_ce = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      Tensor xb = data.x.gather_rows(idx);
      yb.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) yb[i] = data.y[idx[i]];
      JointLoss jl = joint_loss(model, xb, yb, beta, config.weight_decay);
      for (std::size_t m = 0; m < model.size(); ++m) {
        if (config.clip_norm > 0.0) clip_gradient_norm(jl.grads[m], config.clip_norm);
        sgd_step(model.members[m], jl.grads[m], config.lr, config.momentum);
      }
      sum_ce += jl.sum_ce;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.sum_ce = sum_ce / static_cast<double>(batches);
    rec.omega = measure_omega(model);
    rec.beta_omega = beta * rec.omega;
    if (config.track_accuracy || epoch + 1 == config.epochs) {
      rec.train_accuracy = accuracy(predict_mean(model, data.x), data.y);
      if (validation && validation->size()) {
        rec.val_accuracy =
            accuracy(predict_mean(model, validation->x), validation->y);
      }
    } else {
      rec.train_accuracy = std::numeric_limits<double>::quiet_NaN();
    }
    report.epochs.push_back(rec);
  }
  return report;
}

Tensor predict_mean(const EnsembleModel& model, const Tensor& x) {
  if (model.members.empty()) throw ConfigError("empty ensemble");
  Tensor mean;
  for (const Network& member : model.members) {
    Tensor p = softmax(predict_logits(member, x));
    if (mean.size() == 0) {
      mean = std::move(p);
    } else {
      for (std::size_t i = 0; i < p.size(); ++i) mean[i] += p[i];
    }
  }
  const double e = static_cast<double>(model.size());
  for (double& v : mean.values()) v /= e;
  return mean;
}

std::vector<int> argmax_rows(const Tensor& probs) {
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (probs.at(r, c) > probs.at(r, best)) best = c;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

double accuracy(const Tensor& probs, std::span<const int> labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size() || labels.empty()) {
    throw ConfigError("accuracy: predictions and labels disagree in length");
  }
  const auto pred = argmax_rows(probs);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double mean_nll(const Tensor& probs, std::span<const int> labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size() || labels.empty()) {
    throw ConfigError("mean_nll: predictions and labels disagree in length");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = probs.at(i, static_cast<std::size_t>(labels[i]));
    total -= std::log(std::max(p, std::numeric_limits<double>::min()));
  }
  return total / static_cast<double>(labels.size());
}

}  // namespace dpe
