// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "noiselab/rng.hpp"
#include "noiselab/tensor.hpp"

namespace noiselab {

struct Dataset {
  Shape sample_shape;  // {features} or {c,h,w}
  std::vector<double> data;
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
  std::int64_t sample_numel() const { return shape_numel(sample_shape); }
  Tensor batch(const std::vector<int>& indices) const;
  std::vector<int> batch_labels(const std::vector<int>& indices) const;
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

struct DatasetSpec {
  enum class Kind { synthetic_blobs, synthetic_images, cifar10_binary };
  Kind kind = Kind::synthetic_blobs;
  int classes = 2;
  std::uint64_t seed = 7;
  // synthetic_blobs
  int features = 16;
  // synthetic_images
  int image_size = 8;
  int channels = 3;
  int train_samples = 512;
  int test_samples = 256;
  // cifar10_binary: a .bin file or a directory holding data_batch_*.bin and
  // test_batch.bin
  std::string path;
  int subset_size = 0;  // 0 = all available
  int test_size = 0;
};

std::string to_string(DatasetSpec::Kind k);
DatasetSpec::Kind dataset_kind_from_string(const std::string& s);

/// Loads or generates the dataset and standardizes it per channel/feature
/// with statistics computed on the training subset.
DatasetPair load_dataset(const DatasetSpec& spec);

/// Seeded Gaussian class blobs in feature space.
DatasetPair make_blobs(const DatasetSpec& spec);

/// Seeded image-like textures: each class mixes two class-specific smooth
/// basis patterns with random amplitudes plus pixel noise.
DatasetPair make_texture_images(const DatasetSpec& spec);

/// CIFAR-10 binary records: 1 label byte + 3*1024 pixel bytes, channel-major.
Dataset read_cifar10_records(const std::string& file, int max_records);

}  // namespace noiselab
