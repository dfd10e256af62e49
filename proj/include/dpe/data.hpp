#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dpe/ensemble.hpp"
#include "dpe/tensor.hpp"

namespace dpe {

struct Dataset {
  Tensor features;  // (N, ...sample shape)
  std::vector<int> labels;
  std::size_t n_classes = 0;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;
  /// Original label value for each dense class id (CSV input only).
  std::map<long long, int> label_mapping;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  Samples subset(std::span<const std::size_t> indices) const;
  /// Throws ConfigError if labels or splits break the dataset invariants.
  void validate() const;
};

Dataset gen_blobs(std::size_t n, std::size_t n_classes, std::size_t dim,
                  double spread, std::uint64_t seed);
Dataset gen_moons(std::size_t n, double noise, std::uint64_t seed);
Dataset gen_spirals(std::size_t n, double noise, std::uint64_t seed);

/// Header row required; every column except `label_column` is a feature.
/// Labels are integers, re-indexed densely in increasing order.
Dataset load_csv(const std::filesystem::path& path,
                 const std::string& label_column);

/// Writes features and labels as CSV (x0..x{d-1},label). Flattens
/// non-flat samples.
std::string to_csv(const Dataset& data);

/// IDX image and label files (magic 0x00000803 / 0x00000801).
Dataset load_idx_images(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path);

/// Stratified seeded split; sets train_idx and val_idx.
Dataset split(Dataset data, double val_fraction, std::uint64_t seed);

/// Per-feature standardization fitted on a subset of rows.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const Tensor& features,
                          std::span<const std::size_t> rows);
  Tensor apply(const Tensor& features) const;
};

}  // namespace dpe
