#include "dpe/nn.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <stdexcept>

#include "dpe/random.hpp"

namespace dpe {

namespace {

std::uint64_t next_network_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

std::string layer_label(std::size_t index, const LayerSpec& layer) {
  return "layer " + std::to_string(index) + " (" +
         std::string(to_string(layer.kind)) + ")";
}

Shape next_shape(std::size_t index, const LayerSpec& layer,
                 const Shape& in) {
  switch (layer.kind) {
    case LayerKind::Dense: {
      if (layer.n_in == 0 || layer.n_out == 0) {
        throw ConfigError(layer_label(index, layer) + ": zero size");
      }
      if (shape_size(in) != layer.n_in) {
        throw ConfigError(layer_label(index, layer) + ": expects " +
                          std::to_string(layer.n_in) + " inputs, got " +
                          shape_to_string(in));
      }
      return {layer.n_out};
    }
    case LayerKind::Conv2D: {
      if (in.size() != 3) {
        throw ConfigError(layer_label(index, layer) +
                          ": needs a (C, H, W) input, got " +
                          shape_to_string(in));
      }
      if (layer.in_channels != in[0]) {
        throw ConfigError(layer_label(index, layer) + ": expects " +
                          std::to_string(layer.in_channels) +
                          " channels, got " + std::to_string(in[0]));
      }
      if (layer.out_channels == 0 || layer.kernel_w == 0 ||
          layer.kernel_h == 0 || layer.stride == 0) {
        throw ConfigError(layer_label(index, layer) + ": zero geometry");
      }
      const std::size_t h = in[1] + 2 * layer.padding;
      const std::size_t w = in[2] + 2 * layer.padding;
      if (h < layer.kernel_h || w < layer.kernel_w) {
        throw ConfigError(layer_label(index, layer) +
                          ": kernel larger than padded input");
      }
      return {layer.out_channels, (h - layer.kernel_h) / layer.stride + 1,
              (w - layer.kernel_w) / layer.stride + 1};
    }
    case LayerKind::ReLU:
      return in;
    case LayerKind::BatchNorm:
      if ((in.size() != 1 && in.size() != 3) || in[0] != layer.channels) {
        throw ConfigError(layer_label(index, layer) + ": expects " +
                          std::to_string(layer.channels) +
                          " channels, got " + shape_to_string(in));
      }
      if (!(layer.epsilon > 0.0) || layer.momentum < 0.0 ||
          layer.momentum > 1.0) {
        throw ConfigError(layer_label(index, layer) +
                          ": epsilon must be > 0 and momentum in [0, 1]");
      }
      return in;
    case LayerKind::Softmax:
      if (in.size() != 1) {
        throw ConfigError(layer_label(index, layer) + ": needs a flat input");
      }
      return in;
  }
  throw ConfigError("unknown layer kind");
}

struct BlockLayout {
  std::string name;
  Shape shape;
  PriorSpec prior;
};

struct Layout {
  std::vector<BlockLayout> params;
  std::vector<BlockLayout> state;
};

Layout layout_of(const Architecture& arch, const std::vector<Shape>& shapes) {
  Layout out;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    const Shape& in = i == 0 ? arch.input_shape : shapes[i - 1];
    const std::string base =
        std::to_string(i) + "." + std::string(to_string(l.kind)) + ".";
    auto add = [&](std::vector<BlockLayout>& to, const std::string& what,
                   Shape shape, PriorSpec prior) {
      prior.group_id = base + what;
      to.push_back({base + what, std::move(shape), std::move(prior)});
    };
    switch (l.kind) {
      case LayerKind::Dense: {
        const std::size_t spatial = in.size() == 3 ? in[1] * in[2] : 1;
        add(out.params, "weight", {l.n_out, l.n_in},
            dense_prior(l.n_in, l.n_out, spatial));
        if (l.bias) add(out.params, "bias", {l.n_out}, bias_prior());
        break;
      }
      case LayerKind::Conv2D:
        add(out.params, "weight",
            {l.out_channels, l.in_channels, l.kernel_h, l.kernel_w},
            conv_prior(l.in_channels, l.out_channels, l.kernel_w,
                       l.kernel_h));
        if (l.bias) add(out.params, "bias", {l.out_channels}, bias_prior());
        break;
      case LayerKind::BatchNorm:
        add(out.params, "weight", {l.channels}, batchnorm_prior(true));
        add(out.params, "bias", {l.channels}, batchnorm_prior(false));
        add(out.state, "running_mean", {l.channels}, {});
        add(out.state, "running_var", {l.channels}, {});
        break;
      case LayerKind::ReLU:
      case LayerKind::Softmax:
        break;
    }
  }
  return out;
}

// Channel-major view used by batch norm: N samples, C channels, S spatial.
struct ChannelView {
  std::size_t n, c, s;
};

ChannelView channel_view(const Tensor& x) {
  const std::size_t n = x.dim(0);
  const std::size_t c = x.dim(1);
  return {n, c, n && c ? x.size() / (n * c) : 0};
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2D: return "conv";
    case LayerKind::ReLU: return "relu";
    case LayerKind::BatchNorm: return "bn";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

LayerSpec LayerSpec::dense(std::size_t n_in, std::size_t n_out, bool bias) {
  LayerSpec l;
  l.kind = LayerKind::Dense;
  l.n_in = n_in;
  l.n_out = n_out;
  l.bias = bias;
  return l;
}

LayerSpec LayerSpec::conv2d(std::size_t in_channels, std::size_t out_channels,
                            std::size_t kernel_w, std::size_t kernel_h,
                            std::size_t stride, std::size_t padding,
                            bool bias) {
  LayerSpec l;
  l.kind = LayerKind::Conv2D;
  l.in_channels = in_channels;
  l.out_channels = out_channels;
  l.kernel_w = kernel_w;
  l.kernel_h = kernel_h;
  l.stride = stride;
  l.padding = padding;
  l.bias = bias;
  return l;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::batch_norm(std::size_t channels, double momentum,
                                double epsilon) {
  LayerSpec l;
  l.kind = LayerKind::BatchNorm;
  l.channels = channels;
  l.momentum = momentum;
  l.epsilon = epsilon;
  return l;
}

LayerSpec LayerSpec::softmax() {
  LayerSpec l;
  l.kind = LayerKind::Softmax;
  return l;
}

std::vector<Shape> infer_shapes(const Architecture& arch) {
  if (arch.input_shape.empty() ||
      (arch.input_shape.size() != 1 && arch.input_shape.size() != 3) ||
      shape_size(arch.input_shape) == 0) {
    throw ConfigError("input shape must be (d) or (C, H, W), got " +
                      shape_to_string(arch.input_shape));
  }
  if (arch.layers.empty()) throw ConfigError("architecture has no layers");
  std::vector<Shape> shapes;
  Shape current = arch.input_shape;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    if (arch.layers[i].kind == LayerKind::Softmax &&
        i + 1 != arch.layers.size()) {
      throw ConfigError("softmax is only allowed as the last layer");
    }
    current = next_shape(i, arch.layers[i], current);
    shapes.push_back(current);
  }
  if (current.size() != 1) {
    throw ConfigError("network output must be flat, got " +
                      shape_to_string(current));
  }
  return shapes;
}

namespace {

std::size_t parse_count(std::string_view token, std::string_view field) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc{} || ptr != token.data() + token.size() || v == 0) {
    throw ConfigError("architecture: bad " + std::string(field) + " '" +
                      std::string(token) + "'");
  }
  return v;
}

std::vector<std::string_view> split_on(std::string_view text, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = text.find(sep, start);
    out.push_back(text.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

Architecture parse_architecture(std::string_view text, Shape input_shape) {
  Architecture arch{std::move(input_shape), {}};
  Shape current = arch.input_shape;
  for (std::string_view token : split_on(text, ',')) {
    while (!token.empty() && token.front() == ' ') token.remove_prefix(1);
    while (!token.empty() && token.back() == ' ') token.remove_suffix(1);
    auto parts = split_on(token, ':');
    bool bias = true;
    if (parts.size() > 1 && parts.back() == "nobias") {
      bias = false;
      parts.pop_back();
    }
    const std::string_view kind = parts[0];
    LayerSpec layer;
    if (kind == "dense" && parts.size() == 2) {
      layer = LayerSpec::dense(shape_size(current),
                               parse_count(parts[1], "dense width"), bias);
    } else if (kind == "conv" && parts.size() >= 3 && parts.size() <= 5) {
      if (current.size() != 3) {
        throw ConfigError("architecture: conv needs a (C, H, W) input");
      }
      std::size_t kw, kh;
      if (auto x = parts[2].find('x'); x != std::string_view::npos) {
        kw = parse_count(parts[2].substr(0, x), "kernel width");
        kh = parse_count(parts[2].substr(x + 1), "kernel height");
      } else {
        kw = kh = parse_count(parts[2], "kernel size");
      }
      const std::size_t stride =
          parts.size() > 3 ? parse_count(parts[3], "stride") : 1;
      std::size_t padding = 0;
      if (parts.size() > 4 && parts[4] != "0") {
        padding = parse_count(parts[4], "padding");
      }
      layer = LayerSpec::conv2d(current[0], parse_count(parts[1], "channels"),
                                kw, kh, stride, padding, bias);
    } else if (kind == "relu" && parts.size() == 1) {
      layer = LayerSpec::relu();
    } else if (kind == "bn" && parts.size() <= 2) {
      double momentum = 0.1;
      if (parts.size() == 2) {
        auto [p, ec] = std::from_chars(parts[1].data(),
                                       parts[1].data() + parts[1].size(),
                                       momentum);
        if (ec != std::errc{}) {
          throw ConfigError("architecture: bad bn momentum");
        }
      }
      layer = LayerSpec::batch_norm(current.empty() ? 0 : current[0],
                                    momentum);
    } else if (kind == "softmax" && parts.size() == 1) {
      layer = LayerSpec::softmax();
    } else {
      throw ConfigError("architecture: cannot parse layer '" +
                        std::string(token) + "'");
    }
    current = next_shape(arch.layers.size(), layer, current);
    arch.layers.push_back(layer);
  }
  infer_shapes(arch);
  return arch;
}

std::string format_architecture(const Architecture& arch) {
  std::string out;
  for (const LayerSpec& l : arch.layers) {
    if (!out.empty()) out += ',';
    out += to_string(l.kind);
    switch (l.kind) {
      case LayerKind::Dense:
        out += ':' + std::to_string(l.n_out);
        break;
      case LayerKind::Conv2D:
        out += ':' + std::to_string(l.out_channels) + ':';
        out += l.kernel_w == l.kernel_h
                   ? std::to_string(l.kernel_w)
                   : std::to_string(l.kernel_w) + 'x' +
                         std::to_string(l.kernel_h);
        out += ':' + std::to_string(l.stride) + ':' + std::to_string(l.padding);
        break;
      case LayerKind::BatchNorm: {
        char buf[32];
        auto [p, ec] = std::to_chars(buf, buf + sizeof buf, l.momentum);
        out += ':' + std::string(buf, p);
        break;
      }
      default:
        break;
    }
    if ((l.kind == LayerKind::Dense || l.kind == LayerKind::Conv2D) &&
        !l.bias) {
      out += ":nobias";
    }
  }
  return out;
}

void Gradients::add_scaled(const Gradients& other, double scale) {
  if (other.blocks.size() != blocks.size()) {
    throw ConfigError("gradient block count mismatch");
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (blocks[b].shape() != other.blocks[b].shape()) {
      throw ConfigError("gradient block shape mismatch");
    }
    auto dst = blocks[b].data();
    auto src = other.blocks[b].data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
  }
}

bool Gradients::all_finite() const {
  return std::all_of(blocks.begin(), blocks.end(),
                     [](const Tensor& t) { return t.all_finite(); });
}

Network::Network(Architecture arch, std::vector<ParamBlock> params,
                 std::vector<StateBlock> state)
    : arch_(std::move(arch)),
      shapes_(infer_shapes(arch_)),
      params_(std::move(params)),
      state_(std::move(state)),
      id_(next_network_id()) {
  const Layout layout = layout_of(arch_, shapes_);
  if (layout.params.size() != params_.size() ||
      layout.state.size() != state_.size()) {
    throw ConfigError("parameter blocks do not match the architecture");
  }
  for (std::size_t b = 0; b < params_.size(); ++b) {
    if (params_[b].name != layout.params[b].name ||
        params_[b].value.shape() != layout.params[b].shape) {
      throw ConfigError("parameter block '" + params_[b].name +
                        "' does not match expected '" +
                        layout.params[b].name + "' " +
                        shape_to_string(layout.params[b].shape));
    }
  }
  for (std::size_t b = 0; b < state_.size(); ++b) {
    if (state_[b].name != layout.state[b].name ||
        state_[b].value.shape() != layout.state[b].shape) {
      throw ConfigError("state block '" + state_[b].name +
                        "' does not match the architecture");
    }
  }
  slots_.resize(arch_.layers.size());
  std::size_t p = 0, s = 0;
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const LayerSpec& l = arch_.layers[i];
    if (l.kind == LayerKind::Dense || l.kind == LayerKind::Conv2D) {
      slots_[i].weight = static_cast<int>(p++);
      if (l.bias) slots_[i].bias = static_cast<int>(p++);
    } else if (l.kind == LayerKind::BatchNorm) {
      slots_[i].weight = static_cast<int>(p++);
      slots_[i].bias = static_cast<int>(p++);
      slots_[i].running_mean = static_cast<int>(s++);
      slots_[i].running_var = static_cast<int>(s++);
    }
  }
}

Network::Network(const Network& other)
    : arch_(other.arch_),
      shapes_(other.shapes_),
      params_(other.params_),
      state_(other.state_),
      slots_(other.slots_),
      velocity_(other.velocity_),
      id_(next_network_id()),
      version_(other.version_) {}

Network& Network::operator=(const Network& other) {
  if (this != &other) {
    Network copy(other);
    *this = std::move(copy);
  }
  return *this;
}

std::size_t Network::n_classes() const { return shapes_.back()[0]; }

std::vector<ParamBlock>& Network::mutable_params() {
  ++version_;
  return params_;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : params_) n += b.value.size();
  return n;
}

Gradients Network::zero_gradients() const {
  Gradients g;
  for (const auto& b : params_) g.blocks.emplace_back(b.value.shape());
  return g;
}

Network init_network(const Architecture& arch, std::uint64_t seed) {
  const auto shapes = infer_shapes(arch);
  const Layout layout = layout_of(arch, shapes);
  Rng rng(seed);
  std::vector<ParamBlock> params;
  for (const BlockLayout& b : layout.params) {
    Tensor value(b.shape);
    const bool batch_norm = b.name.find(".bn.") != std::string::npos;
    if (batch_norm) {
      std::fill(value.values().begin(), value.values().end(), b.prior.mu_p);
    } else {
      const double sd = std::sqrt(b.prior.sigma2_p);
      for (double& v : value.values()) v = rng.normal(b.prior.mu_p, sd);
    }
    params.push_back({b.name, std::move(value), b.prior});
  }
  std::vector<StateBlock> state;
  for (const BlockLayout& b : layout.state) {
    const bool var = b.name.ends_with("running_var");
    state.push_back({b.name, Tensor(b.shape, var ? 1.0 : 0.0)});
  }
  return Network(arch, std::move(params), std::move(state));
}

Network zero_network(const Architecture& arch) {
  Network net = init_network(arch, 0);
  for (auto& b : net.mutable_params()) {
    std::fill(b.value.values().begin(), b.value.values().end(), 0.0);
  }
  return net;
}

ForwardResult Network::run_forward(const Tensor& batch, bool train_mode,
                                   std::vector<StateBlock>* running) const {
  if (batch.rank() != arch_.input_shape.size() + 1 ||
      !std::equal(arch_.input_shape.begin(), arch_.input_shape.end(),
                  batch.shape().begin() + 1)) {
    throw ConfigError("batch shape " + shape_to_string(batch.shape()) +
                      " does not match network input " +
                      shape_to_string(arch_.input_shape));
  }
  const std::size_t n = batch.dim(0);
  if (n == 0) throw ConfigError("empty batch");

  ForwardResult result;
  ForwardCache& cache = result.cache;
  cache.network_id = id_;
  cache.version = version_;
  cache.train_mode = train_mode;
  cache.batch = n;
  cache.inputs.reserve(arch_.layers.size());
  cache.normalized.resize(arch_.layers.size());
  cache.inv_std.resize(arch_.layers.size());

  Tensor x = batch;
  for (std::size_t li = 0; li < arch_.layers.size(); ++li) {
    const LayerSpec& l = arch_.layers[li];
    if (l.kind == LayerKind::Softmax) break;
    Shape out_shape{n};
    out_shape.insert(out_shape.end(), shapes_[li].begin(), shapes_[li].end());
    Tensor y(out_shape);
    const Slots& slot = slots_[li];

    switch (l.kind) {
      case LayerKind::Dense: {
        const auto& w = params_[slot.weight].value;
        const double* b =
            slot.bias >= 0 ? params_[slot.bias].value.data().data() : nullptr;
        for (std::size_t r = 0; r < n; ++r) {
          const double* xr = x.data().data() + r * l.n_in;
          double* yr = y.data().data() + r * l.n_out;
          for (std::size_t o = 0; o < l.n_out; ++o) {
            const double* wo = w.data().data() + o * l.n_in;
            double acc = b ? b[o] : 0.0;
            for (std::size_t i = 0; i < l.n_in; ++i) acc += wo[i] * xr[i];
            yr[o] = acc;
          }
        }
        break;
      }
      case LayerKind::Conv2D: {
        const Shape& in = li == 0 ? arch_.input_shape : shapes_[li - 1];
        const std::size_t C = in[0], H = in[1], W = in[2];
        const std::size_t O = shapes_[li][0], OH = shapes_[li][1],
                          OW = shapes_[li][2];
        const auto& w = params_[slot.weight].value;
        const double* b =
            slot.bias >= 0 ? params_[slot.bias].value.data().data() : nullptr;
        for (std::size_t s = 0; s < n; ++s) {
          const double* xs = x.data().data() + s * C * H * W;
          double* ys = y.data().data() + s * O * OH * OW;
          for (std::size_t o = 0; o < O; ++o) {
            for (std::size_t oy = 0; oy < OH; ++oy) {
              for (std::size_t ox = 0; ox < OW; ++ox) {
                double acc = b ? b[o] : 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                  for (std::size_t ky = 0; ky < l.kernel_h; ++ky) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * l.stride + ky) -
                        static_cast<std::ptrdiff_t>(l.padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t kx = 0; kx < l.kernel_w; ++kx) {
                      const std::ptrdiff_t ix =
                          static_cast<std::ptrdiff_t>(ox * l.stride + kx) -
                          static_cast<std::ptrdiff_t>(l.padding);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                      acc += w[((o * C + c) * l.kernel_h + ky) * l.kernel_w + kx] *
                             xs[(c * H + static_cast<std::size_t>(iy)) * W +
                                static_cast<std::size_t>(ix)];
                    }
                  }
                }
                ys[(o * OH + oy) * OW + ox] = acc;
              }
            }
          }
        }
        break;
      }
      case LayerKind::ReLU:
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::max(0.0, x[i]);
        break;
      case LayerKind::BatchNorm: {
        const ChannelView v = channel_view(x);
        const auto& gamma = params_[slot.weight].value;
        const auto& beta = params_[slot.bias].value;
        const auto& running_mean = state_[slot.running_mean].value;
        const auto& running_var = state_[slot.running_var].value;
        Tensor xhat(x.shape());
        std::vector<double> inv_std(v.c);
        const double m = static_cast<double>(v.n * v.s);
        for (std::size_t c = 0; c < v.c; ++c) {
          double mean, var;
          if (train_mode) {
            double sum = 0.0;
            for (std::size_t s = 0; s < v.n; ++s)
              for (std::size_t k = 0; k < v.s; ++k)
                sum += x[(s * v.c + c) * v.s + k];
            mean = sum / m;
            double sq = 0.0;
            for (std::size_t s = 0; s < v.n; ++s)
              for (std::size_t k = 0; k < v.s; ++k) {
                const double d = x[(s * v.c + c) * v.s + k] - mean;
                sq += d * d;
              }
            var = sq / m;
            if (running) {
              const double unbiased = m > 1.0 ? sq / (m - 1.0) : var;
              auto& rm = (*running)[slot.running_mean].value;
              auto& rv = (*running)[slot.running_var].value;
              rm[c] = (1.0 - l.momentum) * rm[c] + l.momentum * mean;
              rv[c] = (1.0 - l.momentum) * rv[c] + l.momentum * unbiased;
            }
          } else {
            mean = running_mean[c];
            var = running_var[c];
          }
          inv_std[c] = 1.0 / std::sqrt(var + l.epsilon);
          for (std::size_t s = 0; s < v.n; ++s)
            for (std::size_t k = 0; k < v.s; ++k) {
              const std::size_t idx = (s * v.c + c) * v.s + k;
              xhat[idx] = (x[idx] - mean) * inv_std[c];
              y[idx] = gamma[c] * xhat[idx] + beta[c];
            }
        }
        cache.normalized[li] = std::move(xhat);
        cache.inv_std[li] = std::move(inv_std);
        break;
      }
      case LayerKind::Softmax:
        break;
    }
    cache.inputs.push_back(std::move(x));
    x = std::move(y);
  }
  require_finite(x, "forward output");
  result.logits = std::move(x);
  return result;
}

ForwardResult forward(Network& net, const Tensor& batch, bool train_mode) {
  return net.run_forward(batch, train_mode, train_mode ? &net.state_ : nullptr);
}

Tensor predict_logits(const Network& net, const Tensor& batch) {
  return net.run_forward(batch, false, nullptr).logits;
}

Gradients backward(const Network& net, const ForwardCache& cache,
                   const Tensor& logits_grad) {
  if (cache.network_id != net.id_ || cache.version != net.version_) {
    throw std::logic_error(
        "backward: forward cache does not belong to the current parameters");
  }
  const std::size_t n = cache.batch;
  const std::size_t computed = cache.inputs.size();
  Shape expected{n};
  const Shape& out = net.shapes_[computed - 1];
  expected.insert(expected.end(), out.begin(), out.end());
  if (logits_grad.shape() != expected) {
    throw ConfigError("backward: upstream gradient shape " +
                      shape_to_string(logits_grad.shape()) + ", expected " +
                      shape_to_string(expected));
  }

  Gradients grads = net.zero_gradients();
  Tensor dy = logits_grad;
  for (std::size_t li = computed; li-- > 0;) {
    const LayerSpec& l = net.arch_.layers[li];
    const Tensor& x = cache.inputs[li];
    const Network::Slots& slot = net.slots_[li];
    Tensor dx(x.shape());

    switch (l.kind) {
      case LayerKind::Dense: {
        const auto& w = net.params_[slot.weight].value;
        auto& dw = grads.blocks[slot.weight];
        for (std::size_t r = 0; r < n; ++r) {
          const double* xr = x.data().data() + r * l.n_in;
          const double* dyr = dy.data().data() + r * l.n_out;
          double* dxr = dx.data().data() + r * l.n_in;
          for (std::size_t o = 0; o < l.n_out; ++o) {
            const double g = dyr[o];
            if (g == 0.0) continue;
            const double* wo = w.data().data() + o * l.n_in;
            double* dwo = dw.data().data() + o * l.n_in;
            for (std::size_t i = 0; i < l.n_in; ++i) {
              dwo[i] += g * xr[i];
              dxr[i] += g * wo[i];
            }
          }
        }
        if (slot.bias >= 0) {
          auto& db = grads.blocks[slot.bias];
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t o = 0; o < l.n_out; ++o)
              db[o] += dy[r * l.n_out + o];
        }
        break;
      }
      case LayerKind::Conv2D: {
        const Shape& in = li == 0 ? net.arch_.input_shape : net.shapes_[li - 1];
        const std::size_t C = in[0], H = in[1], W = in[2];
        const std::size_t O = net.shapes_[li][0], OH = net.shapes_[li][1],
                          OW = net.shapes_[li][2];
        const auto& w = net.params_[slot.weight].value;
        auto& dw = grads.blocks[slot.weight];
        for (std::size_t s = 0; s < n; ++s) {
          const double* xs = x.data().data() + s * C * H * W;
          double* dxs = dx.data().data() + s * C * H * W;
          const double* dys = dy.data().data() + s * O * OH * OW;
          for (std::size_t o = 0; o < O; ++o) {
            for (std::size_t oy = 0; oy < OH; ++oy) {
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const double g = dys[(o * OH + oy) * OW + ox];
                if (g == 0.0) continue;
                for (std::size_t c = 0; c < C; ++c) {
                  for (std::size_t ky = 0; ky < l.kernel_h; ++ky) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * l.stride + ky) -
                        static_cast<std::ptrdiff_t>(l.padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t kx = 0; kx < l.kernel_w; ++kx) {
                      const std::ptrdiff_t ix =
                          static_cast<std::ptrdiff_t>(ox * l.stride + kx) -
                          static_cast<std::ptrdiff_t>(l.padding);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                      const std::size_t widx =
                          ((o * C + c) * l.kernel_h + ky) * l.kernel_w + kx;
                      const std::size_t xidx =
                          (c * H + static_cast<std::size_t>(iy)) * W +
                          static_cast<std::size_t>(ix);
                      dw[widx] += g * xs[xidx];
                      dxs[xidx] += g * w[widx];
                    }
                  }
                }
              }
            }
          }
        }
        if (slot.bias >= 0) {
          auto& db = grads.blocks[slot.bias];
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t o = 0; o < O; ++o)
              for (std::size_t k = 0; k < OH * OW; ++k)
                db[o] += dy[(s * O + o) * OH * OW + k];
        }
        break;
      }
      case LayerKind::ReLU:
        for (std::size_t i = 0; i < x.size(); ++i)
          dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
        break;
      case LayerKind::BatchNorm: {
        const ChannelView v = channel_view(x);
        const auto& gamma = net.params_[slot.weight].value;
        auto& dgamma = grads.blocks[slot.weight];
        auto& dbeta = grads.blocks[slot.bias];
        const Tensor& xhat = cache.normalized[li];
        const auto& inv_std = cache.inv_std[li];
        const double m = static_cast<double>(v.n * v.s);
        for (std::size_t c = 0; c < v.c; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t s = 0; s < v.n; ++s)
            for (std::size_t k = 0; k < v.s; ++k) {
              const std::size_t idx = (s * v.c + c) * v.s + k;
              sum_dy += dy[idx];
              sum_dy_xhat += dy[idx] * xhat[idx];
            }
          dgamma[c] += sum_dy_xhat;
          dbeta[c] += sum_dy;
          const double scale = gamma[c] * inv_std[c];
          for (std::size_t s = 0; s < v.n; ++s)
            for (std::size_t k = 0; k < v.s; ++k) {
              const std::size_t idx = (s * v.c + c) * v.s + k;
              if (cache.train_mode) {
                dx[idx] = scale / m *
                          (m * dy[idx] - sum_dy - xhat[idx] * sum_dy_xhat);
              } else {
                dx[idx] = scale * dy[idx];
              }
            }
        }
        break;
      }
      case LayerKind::Softmax:
        break;
    }
    dy = std::move(dx);
  }
  return grads;
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw ConfigError("softmax expects (N, K) logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, logits.at(r, c));
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      out.at(r, c) = std::exp(logits.at(r, c) - mx);
      sum += out.at(r, c);
    }
    for (std::size_t c = 0; c < k; ++c) out.at(r, c) /= sum;
  }
  return out;
}

double cross_entropy(const Tensor& logits, std::span<const int> labels,
                     Tensor* logits_grad) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() ||
      labels.empty()) {
    throw ConfigError("cross_entropy: logits " +
                      shape_to_string(logits.shape()) + " vs " +
                      std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (logits_grad) *logits_grad = Tensor(logits.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ConfigError("cross_entropy: label " + std::to_string(y) +
                        " outside [0, " + std::to_string(k) + ")");
    }
    double mx = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, logits.at(r, c));
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) sum += std::exp(logits.at(r, c) - mx);
    const double lse = mx + std::log(sum);
    total += lse - logits.at(r, static_cast<std::size_t>(y));
    if (logits_grad) {
      for (std::size_t c = 0; c < k; ++c) {
        const double p = std::exp(logits.at(r, c) - lse);
        logits_grad->at(r, c) =
            (p - (c == static_cast<std::size_t>(y) ? 1.0 : 0.0)) /
            static_cast<double>(n);
      }
    }
  }
  const double loss = total / static_cast<double>(n);
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  return loss;
}

void sgd_step(Network& net, const Gradients& grads, double lr,
              double momentum) {
  if (!(lr >= 0.0) || !(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("sgd_step: need lr >= 0 and momentum in [0, 1)");
  }
  if (grads.blocks.size() != net.params_.size()) {
    throw ConfigError("sgd_step: gradient has wrong number of blocks");
  }
  for (std::size_t b = 0; b < grads.blocks.size(); ++b) {
    if (grads.blocks[b].shape() != net.params_[b].value.shape()) {
      throw ConfigError("sgd_step: gradient shape mismatch for '" +
                        net.params_[b].name + "'");
    }
  }
  if (!grads.all_finite()) throw NumericError("sgd_step: non-finite gradient");
  if (net.velocity_.size() != net.params_.size()) {
    net.velocity_.clear();
    for (const auto& p : net.params_) net.velocity_.emplace_back(p.value.shape());
  }
  for (std::size_t b = 0; b < grads.blocks.size(); ++b) {
    auto theta = net.params_[b].value.data();
    auto v = net.velocity_[b].data();
    auto g = grads.blocks[b].data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      theta[i] -= lr * v[i];
    }
  }
  ++net.version_;
}

}  // namespace dpe
