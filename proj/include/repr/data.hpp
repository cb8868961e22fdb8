// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "repr/tensor.hpp"

namespace repr {

/// Images and labels of one split, copied out contiguously.
struct Subset {
  Tensor images;
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

/**
 * Images [N, c, h, w] scaled to [0, 1] with integer labels and named index
 * splits. Splits are kept disjoint; add_split refuses overlap.
 */
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t num_classes = 10;
  std::map<std::string, std::vector<std::size_t>> splits;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  void add_split(const std::string& name, std::vector<std::size_t> indices);
  const std::vector<std::size_t>& split(const std::string& name) const;
  Subset materialize(const std::string& split_name) const;
  Subset materialize(const std::vector<std::size_t>& indices) const;

  /// Checks shapes, label range and split disjointness; throws ConfigError.
  void validate() const;
};

/// MNIST-style IDX pair (magic 0x00000803 for images, 0x00000801 for labels).
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

/// CIFAR-10 binary batches: records of 1 label byte + 3072 bytes holding the
/// R, G and B 32x32 planes.
Dataset load_cifar10_binary(const std::vector<std::string>& paths);
void write_cifar10_binary(const Dataset& ds, const std::string& path);

/// Appends b after a; splits of b are shifted by a.size().
Dataset concatenate(const Dataset& a, const Dataset& b);

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

/**
 * One epoch of batches over `split`, shuffled by (seed, epoch). The last
 * partial batch is kept. With `augment`, each image is flipped horizontally
 * with probability 0.5 and randomly cropped from a 4-pixel zero-padded copy,
 * keyed by (seed, epoch, index).
 */
std::vector<Batch> make_batches(const Dataset& ds, const std::string& split, std::size_t batch_size,
                                std::uint64_t seed, std::uint64_t epoch, bool augment);

} // namespace repr
