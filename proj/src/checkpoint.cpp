#include "dpe/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "json.hpp"

#include "dpe/error.hpp"
#include "dpe/io.hpp"

namespace dpe {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'D', 'P', 'E', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(const std::string& in, std::size_t offset) {
  if (offset + sizeof(T) > in.size()) throw ParseError("checkpoint truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i]))
         << (8 * i);
  }
  return static_cast<T>(v);
}

void put_doubles(std::string& out, std::span<const double> values) {
  for (double v : values) put_le(out, std::bit_cast<std::uint64_t>(v));
}

std::vector<double> get_doubles(const std::string& in, std::size_t offset,
                                std::size_t count) {
  if (offset + 8 * count > in.size()) throw ParseError("checkpoint payload truncated");
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = std::bit_cast<double>(get_le<std::uint64_t>(in, offset + 8 * i));
  }
  return out;
}

json layer_to_json(const LayerSpec& l) {
  json j{{"kind", std::string(to_string(l.kind))}};
  switch (l.kind) {
    case LayerKind::Dense:
      j["n_in"] = l.n_in;
      j["n_out"] = l.n_out;
      j["bias"] = l.bias;
      break;
    case LayerKind::Conv2D:
      j["in_channels"] = l.in_channels;
      j["out_channels"] = l.out_channels;
      j["kernel_w"] = l.kernel_w;
      j["kernel_h"] = l.kernel_h;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      j["bias"] = l.bias;
      break;
    case LayerKind::BatchNorm:
      j["channels"] = l.channels;
      j["momentum"] = l.momentum;
      j["epsilon"] = l.epsilon;
      break;
    default:
      break;
  }
  return j;
}

LayerSpec layer_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "dense") {
    return LayerSpec::dense(j.at("n_in"), j.at("n_out"), j.at("bias"));
  }
  if (kind == "conv") {
    return LayerSpec::conv2d(j.at("in_channels"), j.at("out_channels"),
                             j.at("kernel_w"), j.at("kernel_h"), j.at("stride"),
                             j.at("padding"), j.at("bias"));
  }
  if (kind == "bn") {
    return LayerSpec::batch_norm(j.at("channels"), j.at("momentum"),
                                 j.at("epsilon"));
  }
  if (kind == "relu") return LayerSpec::relu();
  if (kind == "softmax") return LayerSpec::softmax();
  throw ParseError("checkpoint: unknown layer kind '" + kind + "'");
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const EnsembleModel& model = ckpt.model;
  if (model.members.empty()) throw ConfigError("cannot save an empty ensemble");
  const Architecture& arch = model.architecture();

  json manifest;
  manifest["format"] = "dpe-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["architecture"]["input_shape"] = arch.input_shape;
  for (const auto& l : arch.layers) {
    manifest["architecture"]["layers"].push_back(layer_to_json(l));
  }
  manifest["ensemble_size"] = model.size();
  manifest["beta"] = model.beta;
  manifest["seed"] = model.seed;

  std::string payload;
  json blocks = json::array();
  auto add_block = [&](long long member, const std::string& kind,
                       const std::string& name, const Tensor& t) {
    blocks.push_back({{"member", member},
                      {"kind", kind},
                      {"name", name},
                      {"shape", t.shape()},
                      {"offset", payload.size()},
                      {"nbytes", 8 * t.size()}});
    put_doubles(payload, t.data());
  };
  for (std::size_t m = 0; m < model.size(); ++m) {
    for (const auto& b : model.members[m].params()) {
      add_block(static_cast<long long>(m), "param", b.name, b.value);
    }
    for (const auto& s : model.members[m].state()) {
      add_block(static_cast<long long>(m), "state", s.name, s.value);
    }
  }
  if (ckpt.standardizer) {
    const std::size_t w = ckpt.standardizer->mean.size();
    add_block(-1, "standardizer", "mean", Tensor({w}, ckpt.standardizer->mean));
    add_block(-1, "standardizer", "scale", Tensor({w}, ckpt.standardizer->scale));
  }
  manifest["blocks"] = std::move(blocks);

  const std::string text = manifest.dump();
  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out += payload;
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw ParseError("not a dpe checkpoint (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(bytes, 8);
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint version " + std::to_string(version) +
                     " is not supported (this build reads version " +
                     std::to_string(kCheckpointVersion) + ")");
  }
  const auto manifest_len = get_le<std::uint64_t>(bytes, 12);
  if (20 + manifest_len > bytes.size()) throw ParseError("checkpoint manifest truncated");
  const std::size_t payload_start = 20 + manifest_len;

  json manifest;
  try {
    manifest = json::parse(bytes.substr(20, manifest_len));
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint manifest: ") + e.what());
  }

  Checkpoint ckpt;
  try {
    if (manifest.at("version").get<std::uint32_t>() != version) {
      throw ParseError("checkpoint header and manifest versions disagree");
    }
    Architecture arch;
    arch.input_shape = manifest.at("architecture").at("input_shape").get<Shape>();
    for (const auto& l : manifest.at("architecture").at("layers")) {
      arch.layers.push_back(layer_from_json(l));
    }
    const std::size_t members = manifest.at("ensemble_size");
    if (members == 0) throw ParseError("checkpoint has no members");
    const Network templ = init_network(arch, 0);

    std::vector<std::vector<ParamBlock>> params(members, templ.params());
    std::vector<std::vector<StateBlock>> state(members, templ.state());
    std::vector<std::vector<char>> filled(members);
    Standardizer standardizer;
    bool has_mean = false, has_scale = false;

    for (const auto& b : manifest.at("blocks")) {
      const long long member = b.at("member");
      const std::string kind = b.at("kind");
      const std::string name = b.at("name");
      const Shape shape = b.at("shape").get<Shape>();
      const std::size_t offset = b.at("offset");
      const std::size_t nbytes = b.at("nbytes");
      if (nbytes != 8 * shape_size(shape)) {
        throw ParseError("checkpoint block '" + name + "' has inconsistent size");
      }
      auto values = get_doubles(bytes, payload_start + offset, shape_size(shape));
      if (kind == "standardizer") {
        (name == "mean" ? standardizer.mean : standardizer.scale) = std::move(values);
        (name == "mean" ? has_mean : has_scale) = true;
        continue;
      }
      if (member < 0 || static_cast<std::size_t>(member) >= members) {
        throw ParseError("checkpoint block '" + name + "' has a bad member index");
      }
      const auto m = static_cast<std::size_t>(member);
      Tensor t(shape, std::move(values));
      bool matched = false;
      if (kind == "param") {
        for (auto& p : params[m]) {
          if (p.name == name && p.value.shape() == shape) {
            p.value = std::move(t);
            matched = true;
            break;
          }
        }
      } else if (kind == "state") {
        for (auto& s : state[m]) {
          if (s.name == name && s.value.shape() == shape) {
            s.value = std::move(t);
            matched = true;
            break;
          }
        }
      }
      if (!matched) {
        throw ParseError("checkpoint block '" + name +
                         "' does not match the architecture");
      }
      filled[m].push_back(1);
    }
    for (std::size_t m = 0; m < members; ++m) {
      if (filled[m].size() != templ.params().size() + templ.state().size()) {
        throw ParseError("checkpoint member " + std::to_string(m) +
                         " is missing blocks");
      }
      ckpt.model.members.emplace_back(arch, std::move(params[m]),
                                      std::move(state[m]));
    }
    ckpt.model.beta = manifest.at("beta");
    ckpt.model.seed = manifest.at("seed");
    if (has_mean && has_scale) ckpt.standardizer = std::move(standardizer);
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint manifest: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::exception& e) {
    throw ParseError(e.what());
  }
  return deserialize_checkpoint(bytes);
}

}  // namespace dpe
