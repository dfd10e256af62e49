#include "dpe/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "dpe/error.hpp"
#include "dpe/io.hpp"
#include "dpe/random.hpp"

namespace dpe {

Shape Dataset::sample_shape() const {
  return Shape(features.shape().begin() + 1, features.shape().end());
}

Samples Dataset::subset(std::span<const std::size_t> indices) const {
  Samples s{features.gather_rows(indices), {}};
  s.y.reserve(indices.size());
  for (std::size_t i : indices) s.y.push_back(labels[i]);
  return s;
}

void Dataset::validate() const {
  if (features.rank() < 2 || features.dim(0) != labels.size()) {
    throw ConfigError("dataset features and labels disagree in length");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
      throw ConfigError("label " + std::to_string(y) + " outside [0, " +
                        std::to_string(n_classes) + ")");
    }
  }
  if (train_idx.empty() && val_idx.empty()) return;
  std::vector<char> seen(size(), 0);
  for (const auto* part : {&train_idx, &val_idx}) {
    for (std::size_t i : *part) {
      if (i >= size() || seen[i]) {
        throw ConfigError("dataset splits overlap or are out of range");
      }
      seen[i] = 1;
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    throw ConfigError("dataset splits do not cover every sample");
  }
}

Dataset gen_blobs(std::size_t n, std::size_t n_classes, std::size_t dim,
                  double spread, std::uint64_t seed) {
  if (n_classes < 2 || dim == 0 || n < n_classes) {
    throw ConfigError("blobs: need n >= classes >= 2 and dim >= 1");
  }
  if (!(spread > 0.0)) throw ConfigError("blobs: spread must be > 0");
  Rng rng(seed);
  std::vector<double> centers(n_classes * dim);
  for (double& c : centers) c = rng.uniform(-10.0, 10.0);
  Dataset d;
  d.n_classes = n_classes;
  d.features = Tensor({n, dim});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % n_classes;
    d.labels[i] = static_cast<int>(k);
    for (std::size_t j = 0; j < dim; ++j) {
      d.features.at(i, j) = centers[k * dim + j] + spread * rng.normal();
    }
  }
  return d;
}

namespace {

double linspace_at(double lo, double hi, std::size_t i, std::size_t count) {
  if (count <= 1) return lo;
  return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
}

void check_curve_args(std::size_t n, double noise, const char* what) {
  if (n < 2) throw ConfigError(std::string(what) + ": need n >= 2");
  if (!(noise >= 0.0)) throw ConfigError(std::string(what) + ": noise must be >= 0");
}

}  // namespace

Dataset gen_moons(std::size_t n, double noise, std::uint64_t seed) {
  check_curve_args(n, noise, "moons");
  Rng rng(seed);
  const std::size_t n_outer = n / 2, n_inner = n - n_outer;
  Dataset d;
  d.n_classes = 2;
  d.features = Tensor({n, 2});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool outer = i < n_outer;
    const std::size_t j = outer ? i : i - n_outer;
    const double t =
        linspace_at(0.0, std::numbers::pi, j, outer ? n_outer : n_inner);
    double x = outer ? std::cos(t) : 1.0 - std::cos(t);
    double y = outer ? std::sin(t) : 0.5 - std::sin(t);
    if (noise > 0.0) {
      x += noise * rng.normal();
      y += noise * rng.normal();
    }
    d.features.at(i, 0) = x;
    d.features.at(i, 1) = y;
    d.labels[i] = outer ? 0 : 1;
  }
  return d;
}

Dataset gen_spirals(std::size_t n, double noise, std::uint64_t seed) {
  check_curve_args(n, noise, "spirals");
  Rng rng(seed);
  const std::size_t n_first = n / 2, n_second = n - n_first;
  const double turns = 3.0 * std::numbers::pi;
  Dataset d;
  d.n_classes = 2;
  d.features = Tensor({n, 2});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool first = i < n_first;
    const std::size_t j = first ? i : i - n_first;
    const double t = linspace_at(0.25, 1.0, j, first ? n_first : n_second) * turns;
    const double sign = first ? 1.0 : -1.0;
    double x = sign * t * std::cos(t) / turns;
    double y = sign * t * std::sin(t) / turns;
    if (noise > 0.0) {
      x += noise * rng.normal();
      y += noise * rng.normal();
    }
    d.features.at(i, 0) = x;
    d.features.at(i, 1) = y;
    d.labels[i] = first ? 0 : 1;
  }
  return d;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size() && !s.empty();
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path,
                 const std::string& label_column) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ParseError(e.what());
  }
  if (text.starts_with("\xEF\xBB\xBF")) text.erase(0, 3);
  const std::string where = path.string();

  std::vector<std::string_view> lines;
  {
    std::string_view rest = text;
    while (!rest.empty()) {
      const std::size_t nl = rest.find('\n');
      lines.push_back(rest.substr(0, nl));
      if (nl == std::string_view::npos) break;
      rest.remove_prefix(nl + 1);
    }
  }
  if (lines.empty() || trim(lines[0]).empty()) {
    throw ParseError(where + ": missing header row");
  }
  const auto header = split_fields(lines[0]);
  const auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end()) {
    throw ParseError(where + ": no column named '" + label_column + "'");
  }
  const std::size_t label_col =
      static_cast<std::size_t>(label_it - header.begin());
  const std::size_t n_features = header.size() - 1;
  if (n_features == 0) throw ParseError(where + ": no feature columns");

  std::vector<double> values;
  std::vector<long long> raw_labels;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::size_t row = li + 1;  // 1-based line number, header is row 1
    if (trim(lines[li]).empty()) continue;
    const auto fields = split_fields(lines[li]);
    if (fields.size() != header.size()) {
      throw ParseError(where + ": row " + std::to_string(row) + ": expected " +
                       std::to_string(header.size()) + " fields, got " +
                       std::to_string(fields.size()));
    }
    for (std::size_t c = 0; c < fields.size(); ++c) {
      if (c == label_col) {
        long long lab;
        if (!parse_number(fields[c], lab)) {
          throw ParseError(where + ": row " + std::to_string(row) +
                           ", column '" + std::string(header[c]) +
                           "': label '" + std::string(fields[c]) +
                           "' is not an integer");
        }
        raw_labels.push_back(lab);
      } else {
        double v;
        if (!parse_number(fields[c], v) || !std::isfinite(v)) {
          throw ParseError(where + ": row " + std::to_string(row) +
                           ", column '" + std::string(header[c]) +
                           "': '" + std::string(fields[c]) +
                           "' is not a finite number");
        }
        values.push_back(v);
      }
    }
  }
  if (raw_labels.empty()) throw ParseError(where + ": no data rows");

  Dataset d;
  std::set<long long> distinct(raw_labels.begin(), raw_labels.end());
  int next = 0;
  for (long long v : distinct) d.label_mapping[v] = next++;
  d.n_classes = distinct.size();
  d.labels.reserve(raw_labels.size());
  for (long long v : raw_labels) d.labels.push_back(d.label_mapping.at(v));
  d.features = Tensor({raw_labels.size(), n_features}, std::move(values));
  return d;
}

std::string to_csv(const Dataset& data) {
  const std::size_t n = data.size();
  const std::size_t width = n ? data.features.size() / n : 0;
  std::vector<std::string> header;
  for (std::size_t j = 0; j < width; ++j) header.push_back("x" + std::to_string(j));
  header.push_back("label");
  CsvWriter csv(std::move(header));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> cells;
    cells.reserve(width + 1);
    for (std::size_t j = 0; j < width; ++j) {
      cells.push_back(format_double(data.features[i * width + j]));
    }
    cells.push_back(std::to_string(data.labels[i]));
    csv.row(std::move(cells));
  }
  return csv.str();
}

namespace {

std::uint32_t read_be32(const std::string& bytes, std::size_t offset,
                        const std::string& where) {
  if (offset + 4 > bytes.size()) {
    throw ParseError(where + ": truncated header");
  }
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  }
  return v;
}

std::string read_binary(const std::filesystem::path& path) {
  try {
    return read_file(path);
  } catch (const std::exception& e) {
    throw ParseError(e.what());
  }
}

}  // namespace

Dataset load_idx_images(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const std::string img_where = images_path.string();
  const std::string lab_where = labels_path.string();
  const std::string images = read_binary(images_path);
  const std::string labels = read_binary(labels_path);

  if (read_be32(images, 0, img_where) != 0x00000803) {
    throw ParseError(img_where + ": bad magic (expected 0x00000803)");
  }
  if (read_be32(labels, 0, lab_where) != 0x00000801) {
    throw ParseError(lab_where + ": bad magic (expected 0x00000801)");
  }
  const std::size_t n = read_be32(images, 4, img_where);
  const std::size_t h = read_be32(images, 8, img_where);
  const std::size_t w = read_be32(images, 12, img_where);
  const std::size_t n_labels = read_be32(labels, 4, lab_where);
  if (n != n_labels) {
    throw ParseError(img_where + " has " + std::to_string(n) + " images but " +
                     lab_where + " has " + std::to_string(n_labels) + " labels");
  }
  if (n == 0 || h == 0 || w == 0) throw ParseError(img_where + ": empty images");
  if (images.size() < 16 + n * h * w) {
    throw ParseError(img_where + ": truncated pixel data");
  }
  if (labels.size() < 8 + n) throw ParseError(lab_where + ": truncated labels");

  Dataset d;
  d.features = Tensor({n, 1, h, w});
  for (std::size_t i = 0; i < n * h * w; ++i) {
    d.features[i] = static_cast<unsigned char>(images[16 + i]) / 255.0;
  }
  d.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = static_cast<unsigned char>(labels[8 + i]);
    max_label = std::max(max_label, d.labels[i]);
  }
  d.n_classes = static_cast<std::size_t>(max_label) + 1;
  return d;
}

Dataset split(Dataset data, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("validation fraction must be in (0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_class(data.n_classes);
  for (std::size_t i = 0; i < data.size(); ++i) {
    by_class.at(static_cast<std::size_t>(data.labels[i])).push_back(i);
  }
  Rng rng(seed);
  data.train_idx.clear();
  data.val_idx.clear();
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.empty()) continue;
    rng.shuffle(members);
    const auto n_val = static_cast<std::size_t>(
        std::llround(val_fraction * static_cast<double>(members.size())));
    if (n_val == 0 || n_val == members.size()) {
      throw ConfigError("split leaves class " + std::to_string(c) +
                        " empty in one partition");
    }
    data.val_idx.insert(data.val_idx.end(), members.begin(),
                        members.begin() + static_cast<std::ptrdiff_t>(n_val));
    data.train_idx.insert(data.train_idx.end(),
                          members.begin() + static_cast<std::ptrdiff_t>(n_val),
                          members.end());
  }
  std::sort(data.train_idx.begin(), data.train_idx.end());
  std::sort(data.val_idx.begin(), data.val_idx.end());
  return data;
}

Standardizer Standardizer::fit(const Tensor& features,
                               std::span<const std::size_t> rows) {
  if (rows.empty()) throw ConfigError("cannot standardize on zero rows");
  const std::size_t width = features.size() / features.dim(0);
  Standardizer s;
  s.mean.assign(width, 0.0);
  s.scale.assign(width, 0.0);
  for (std::size_t r : rows)
    for (std::size_t j = 0; j < width; ++j) s.mean[j] += features[r * width + j];
  for (double& m : s.mean) m /= static_cast<double>(rows.size());
  for (std::size_t r : rows)
    for (std::size_t j = 0; j < width; ++j) {
      const double d = features[r * width + j] - s.mean[j];
      s.scale[j] += d * d;
    }
  for (double& v : s.scale) {
    v = std::sqrt(v / static_cast<double>(rows.size()));
    if (v < 1e-12) v = 1.0;
  }
  return s;
}

Tensor Standardizer::apply(const Tensor& features) const {
  Tensor out = features;
  const std::size_t width = mean.size();
  if (width == 0 || features.size() % width != 0) {
    throw ConfigError("standardizer width does not match features");
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t j = i % width;
    out[i] = (out[i] - mean[j]) / scale[j];
  }
  return out;
}

}  // namespace dpe
