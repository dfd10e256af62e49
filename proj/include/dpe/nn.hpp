#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dpe/prior.hpp"
#include "dpe/tensor.hpp"

namespace dpe {

enum class LayerKind { Dense, Conv2D, ReLU, BatchNorm, Softmax };

std::string_view to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;

  // Dense
  std::size_t n_in = 0;
  std::size_t n_out = 0;

  // Conv2D. kernel_w spans columns, kernel_h spans rows.
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_w = 0;
  std::size_t kernel_h = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  // Dense and Conv2D
  bool bias = true;

  // BatchNorm
  std::size_t channels = 0;
  double momentum = 0.1;
  double epsilon = 1e-5;

  static LayerSpec dense(std::size_t n_in, std::size_t n_out, bool bias = true);
  static LayerSpec conv2d(std::size_t in_channels, std::size_t out_channels,
                          std::size_t kernel_w, std::size_t kernel_h,
                          std::size_t stride = 1, std::size_t padding = 0,
                          bool bias = true);
  static LayerSpec relu();
  static LayerSpec batch_norm(std::size_t channels, double momentum = 0.1,
                              double epsilon = 1e-5);
  static LayerSpec softmax();

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Per-sample input shape plus the layer stack. Input shapes are either
/// flat `{d}` or image-like `{C, H, W}`.
struct Architecture {
  Shape input_shape;
  std::vector<LayerSpec> layers;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Per-sample output shape of every layer. Throws ConfigError if the
/// geometry does not compose. A Softmax layer is only accepted last.
std::vector<Shape> infer_shapes(const Architecture& arch);

/// Parses a compact layer list such as "dense:32,relu,dense:4,softmax" or
/// "conv:8:3:1:1,bn,relu,dense:10". Input sizes are inferred from
/// `input_shape`.
///   dense:OUT[:nobias]   conv:OUT:K[:STRIDE[:PAD]][:nobias]
///   bn[:MOMENTUM]        relu          softmax
Architecture parse_architecture(std::string_view text, Shape input_shape);
std::string format_architecture(const Architecture& arch);

struct ParamBlock {
  std::string name;
  Tensor value;
  PriorSpec prior;
};

/// Non-trainable state (batch-norm running statistics).
struct StateBlock {
  std::string name;
  Tensor value;
};

struct Gradients {
  std::vector<Tensor> blocks;

  void add_scaled(const Gradients& other, double scale);
  bool all_finite() const;
};

class Network;

/// Values saved by a training-or-evaluation forward pass for backward().
/// Bound to the network instance and its parameter version.
struct ForwardCache {
  std::uint64_t network_id = 0;
  std::uint64_t version = 0;
  bool train_mode = false;
  std::size_t batch = 0;
  std::vector<Tensor> inputs;              // input to each layer
  std::vector<Tensor> normalized;          // batch-norm x-hat, else empty
  std::vector<std::vector<double>> inv_std;  // batch-norm 1/sqrt(var+eps)
};

struct ForwardResult {
  Tensor logits;
  ForwardCache cache;
};

class Network {
 public:
  Network(Architecture arch, std::vector<ParamBlock> params,
          std::vector<StateBlock> state);
  Network(const Network& other);
  Network(Network&& other) noexcept = default;
  Network& operator=(const Network& other);
  Network& operator=(Network&& other) noexcept = default;

  const Architecture& architecture() const { return arch_; }
  const std::vector<Shape>& layer_shapes() const { return shapes_; }
  std::size_t n_classes() const;

  const std::vector<ParamBlock>& params() const { return params_; }
  /// Mutable access invalidates outstanding forward caches.
  std::vector<ParamBlock>& mutable_params();

  const std::vector<StateBlock>& state() const { return state_; }
  std::vector<StateBlock>& mutable_state() { return state_; }

  std::size_t parameter_count() const;

  std::uint64_t id() const { return id_; }
  std::uint64_t version() const { return version_; }

  Gradients zero_gradients() const;

 private:
  friend ForwardResult forward(Network& net, const Tensor& batch,
                               bool train_mode);
  friend Tensor predict_logits(const Network& net, const Tensor& batch);
  friend Gradients backward(const Network& net, const ForwardCache& cache,
                            const Tensor& logits_grad);
  friend void sgd_step(Network& net, const Gradients& grads, double lr,
                       double momentum);

  struct Slots {
    int weight = -1;
    int bias = -1;
    int running_mean = -1;
    int running_var = -1;
  };

  /// Running batch-norm averages are written to `running` when non-null.
  ForwardResult run_forward(const Tensor& batch, bool train_mode,
                            std::vector<StateBlock>* running) const;

  Architecture arch_;
  std::vector<Shape> shapes_;
  std::vector<ParamBlock> params_;
  std::vector<StateBlock> state_;
  std::vector<Slots> slots_;
  std::vector<Tensor> velocity_;
  std::uint64_t id_;
  std::uint64_t version_ = 0;
};

/// Weights and biases drawn from N(mu_p, sigma2_p) of their prior;
/// batch-norm scale = 1 and shift = 0 exactly.
Network init_network(const Architecture& arch, std::uint64_t seed);

/// Builds a network with every trainable value set to zero.
Network zero_network(const Architecture& arch);

/// Runs all layers up to (not including) a trailing Softmax. In train mode,
/// batch-norm uses batch statistics and updates its running averages.
ForwardResult forward(Network& net, const Tensor& batch, bool train_mode);

/// Evaluation-mode forward without a cache.
Tensor predict_logits(const Network& net, const Tensor& batch);

/// Gradient of a scalar loss with respect to every parameter block, given
/// its gradient on the logits. Throws std::logic_error on a stale cache.
Gradients backward(const Network& net, const ForwardCache& cache,
                   const Tensor& logits_grad);

/// Row-wise softmax of an (N, K) tensor.
Tensor softmax(const Tensor& logits);

/// Mean over the batch of -log softmax(logits)[label]. Writes
/// d(loss)/d(logits) into `logits_grad` when given.
double cross_entropy(const Tensor& logits, std::span<const int> labels,
                     Tensor* logits_grad = nullptr);

/// v <- momentum * v + g; theta <- theta - lr * v.
void sgd_step(Network& net, const Gradients& grads, double lr,
              double momentum);

}  // namespace dpe
