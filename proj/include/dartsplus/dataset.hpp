#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dartsplus/rng.hpp"
#include "dartsplus/tensor.hpp"

namespace dartsplus {

// Labeled images stored as one contiguous NCHW buffer.
struct ImageDataset {
  std::size_t channels = 1;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t num_classes = 4;
  std::vector<double> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }

  // Gathers the listed samples into a [B, C, H, W] tensor and label vector.
  std::pair<Tensor, std::vector<int>> batch(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw std::invalid_argument("ImageDataset::batch: empty index list");
    Tensor x({indices.size(), channels, height, width});
    std::vector<int> y;
    auto dst = x.data();
    const std::size_t n = image_size();
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const std::size_t i = indices[b];
      if (i >= size()) throw std::out_of_range("ImageDataset::batch: index " + std::to_string(i));
      std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(i * n), n, dst.begin() + static_cast<std::ptrdiff_t>(b * n));
      y.push_back(labels[i]);
    }
    return {x, y};
  }
};

struct ToyTaskConfig {
  std::size_t samples = 512;
  std::size_t test_samples = 512;
  std::size_t image_size = 8;
  std::size_t num_classes = 4;
  double noise = 1.0;       // std of the per-pixel high-frequency noise
  double amplitude = 1.0;   // amplitude of the class pattern
};

// Each class is a plane wave with its own orientation; every sample gets a
// random phase plus i.i.d. pixel noise. Few samples and strong noise make the
// weights overfit the training half.
inline ImageDataset make_toy_dataset(const ToyTaskConfig& cfg, std::uint64_t seed) {
  if (cfg.samples == 0 || cfg.num_classes < 2 || cfg.image_size < 3)
    throw std::invalid_argument("make_toy_dataset: invalid configuration");
  Rng rng(seed);
  ImageDataset ds;
  ds.channels = 1;
  ds.height = ds.width = cfg.image_size;
  ds.num_classes = cfg.num_classes;
  const std::size_t px = cfg.image_size * cfg.image_size;
  ds.pixels.resize(cfg.samples * px);
  const double two_pi = 2.0 * std::numbers::pi;
  const double freq = 1.0 / static_cast<double>(cfg.image_size);
  for (std::size_t s = 0; s < cfg.samples; ++s) {
    const int label = static_cast<int>(s % cfg.num_classes);
    ds.labels.push_back(label);
    const double theta = std::numbers::pi * label / static_cast<double>(cfg.num_classes);
    const double kx = std::cos(theta), ky = std::sin(theta);
    const double phase = rng.uniform(0.0, two_pi);
    for (std::size_t y = 0; y < cfg.image_size; ++y)
      for (std::size_t x = 0; x < cfg.image_size; ++x) {
        const double wave = std::cos(two_pi * freq * (kx * static_cast<double>(x) + ky * static_cast<double>(y)) + phase);
        ds.pixels[s * px + y * cfg.image_size + x] = cfg.amplitude * wave + cfg.noise * rng.normal();
      }
  }
  return ds;
}

// Held-out set drawn from the same task with an independent stream.
inline ImageDataset make_toy_test_set(const ToyTaskConfig& cfg, std::uint64_t seed) {
  ToyTaskConfig test_cfg = cfg;
  test_cfg.samples = cfg.test_samples;
  return make_toy_dataset(test_cfg, Rng(seed).fork(0x7e57).next_u64());
}

struct DataSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Label-stratified disjoint split. Per class, floor(n_c * fraction) samples
// go to each side.
inline DataSplit split_data(const ImageDataset& ds, double train_fraction, double val_fraction, std::uint64_t seed) {
  if (ds.size() == 0) throw std::invalid_argument("split_data: empty dataset");
  if (!(train_fraction > 0 && train_fraction < 1 && val_fraction > 0 && val_fraction < 1) ||
      train_fraction + val_fraction > 1.0 + 1e-12)
    throw std::invalid_argument("split_data: fractions must lie in (0,1) and sum to at most 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  Rng rng(seed);
  DataSplit out;
  for (auto& [label, idx] : by_class) {
    if (idx.size() < 2)
      throw std::invalid_argument("split_data: class " + std::to_string(label) + " has fewer than 2 samples");
    rng.shuffle(idx.begin(), idx.end());
    const auto n = static_cast<double>(idx.size());
    auto n_train = static_cast<std::size_t>(std::floor(n * train_fraction + 1e-9));
    auto n_val = static_cast<std::size_t>(std::floor(n * val_fraction + 1e-9));
    n_train = std::max<std::size_t>(n_train, 1);
    n_val = std::max<std::size_t>(n_val, 1);
    if (n_train + n_val > idx.size()) n_val = idx.size() - n_train;
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.insert(out.val.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                   idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

}  // namespace dartsplus
