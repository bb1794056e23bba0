// SPDX-License-Identifier: Apache-2.0
#include "noiselab/dataset.hpp"

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace noiselab {
namespace {

constexpr int kCifarDim = 32;
constexpr int kCifarChannels = 3;
constexpr int kCifarRecord = 1 + kCifarChannels * kCifarDim * kCifarDim;

// Standardize per channel (images) or per feature (vectors) with statistics
// from the training subset.
void standardize(DatasetPair& pair) {
  Dataset& train = pair.train;
  const bool image = train.sample_shape.size() == 3;
  const int channels = image ? train.sample_shape[0] : train.sample_shape[0];
  const std::int64_t per_channel =
      image ? static_cast<std::int64_t>(train.sample_shape[1]) * train.sample_shape[2] : 1;
  const std::int64_t sample_len = train.sample_numel();

  std::vector<double> mean(static_cast<size_t>(channels), 0.0);
  std::vector<double> var(static_cast<size_t>(channels), 0.0);
  const std::int64_t n_per_channel = train.size() * per_channel;
  for (int s = 0; s < train.size(); ++s) {
    const double* base = train.data.data() + s * sample_len;
    for (int c = 0; c < channels; ++c) {
      for (std::int64_t i = 0; i < per_channel; ++i) mean[static_cast<size_t>(c)] += base[c * per_channel + i];
    }
  }
  for (auto& m : mean) m /= static_cast<double>(n_per_channel);
  for (int s = 0; s < train.size(); ++s) {
    const double* base = train.data.data() + s * sample_len;
    for (int c = 0; c < channels; ++c) {
      for (std::int64_t i = 0; i < per_channel; ++i) {
        const double d = base[c * per_channel + i] - mean[static_cast<size_t>(c)];
        var[static_cast<size_t>(c)] += d * d;
      }
    }
  }
  for (auto& v : var) v /= static_cast<double>(n_per_channel);

  auto apply = [&](Dataset& d) {
    for (int s = 0; s < d.size(); ++s) {
      double* base = d.data.data() + s * sample_len;
      for (int c = 0; c < channels; ++c) {
        const double m = mean[static_cast<size_t>(c)];
        const double sd = std::sqrt(var[static_cast<size_t>(c)]) + 1e-12;
        for (std::int64_t i = 0; i < per_channel; ++i) {
          base[c * per_channel + i] = (base[c * per_channel + i] - m) / sd;
        }
      }
    }
  };
  apply(pair.train);
  apply(pair.test);
}

}  // namespace

std::string to_string(DatasetSpec::Kind k) {
  switch (k) {
    case DatasetSpec::Kind::synthetic_blobs: return "synthetic_blobs";
    case DatasetSpec::Kind::synthetic_images: return "synthetic_images";
    case DatasetSpec::Kind::cifar10_binary: return "cifar10_binary";
  }
  return "?";
}

DatasetSpec::Kind dataset_kind_from_string(const std::string& s) {
  if (s == "synthetic_blobs") return DatasetSpec::Kind::synthetic_blobs;
  if (s == "synthetic_images") return DatasetSpec::Kind::synthetic_images;
  if (s == "cifar10_binary") return DatasetSpec::Kind::cifar10_binary;
  throw ConfigError("unknown dataset kind '" + s + "'");
}

Tensor Dataset::batch(const std::vector<int>& indices) const {
  const std::int64_t len = sample_numel();
  Shape shape{static_cast<int>(indices.size())};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  Tensor out(shape);
  auto& v = out.mutable_values();
  for (size_t b = 0; b < indices.size(); ++b) {
    const double* src = data.data() + static_cast<std::int64_t>(indices[b]) * len;
    std::copy(src, src + len, v.data() + static_cast<std::int64_t>(b) * len);
  }
  return out;
}

std::vector<int> Dataset::batch_labels(const std::vector<int>& indices) const {
  std::vector<int> out(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) out[i] = labels[static_cast<size_t>(indices[i])];
  return out;
}

DatasetPair make_blobs(const DatasetSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic blobs need at least 2 classes");
  if (spec.features < 1) throw ConfigError("synthetic blobs need at least 1 feature");
  Rng rng = Rng(spec.seed).stream("blobs");

  // Class means on a sphere, orthogonalized where the dimension allows so
  // the classes stay linearly separable against unit noise.
  const double radius = 5.0;
  std::vector<std::vector<double>> means(static_cast<size_t>(spec.classes));
  for (size_t c = 0; c < means.size(); ++c) {
    auto& m = means[c];
    m.resize(static_cast<size_t>(spec.features));
    for (auto& v : m) v = rng.gaussian();
    for (size_t prev = 0; prev < c && prev < static_cast<size_t>(spec.features); ++prev) {
      double dot = 0.0, nn = 0.0;
      for (int f = 0; f < spec.features; ++f) {
        dot += m[static_cast<size_t>(f)] * means[prev][static_cast<size_t>(f)];
        nn += means[prev][static_cast<size_t>(f)] * means[prev][static_cast<size_t>(f)];
      }
      for (int f = 0; f < spec.features; ++f) {
        m[static_cast<size_t>(f)] -= dot / nn * means[prev][static_cast<size_t>(f)];
      }
    }
    double norm = 0.0;
    for (double v : m) norm += v * v;
    norm = std::sqrt(norm) + 1e-12;
    for (auto& v : m) v *= radius / norm;
  }

  auto fill = [&](Dataset& d, int count) {
    d.sample_shape = Shape{spec.features};
    d.data.resize(static_cast<size_t>(count) * spec.features);
    d.labels.resize(static_cast<size_t>(count));
    for (int s = 0; s < count; ++s) {
      const int label = s % spec.classes;
      d.labels[static_cast<size_t>(s)] = label;
      double* base = d.data.data() + static_cast<std::int64_t>(s) * spec.features;
      for (int f = 0; f < spec.features; ++f) {
        base[f] = means[static_cast<size_t>(label)][static_cast<size_t>(f)] + rng.gaussian();
      }
    }
  };
  DatasetPair pair;
  fill(pair.train, spec.train_samples);
  fill(pair.test, spec.test_samples);
  standardize(pair);
  return pair;
}

DatasetPair make_texture_images(const DatasetSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic images need at least 2 classes");
  if (spec.image_size < 3) throw ConfigError("synthetic images need image_size >= 3");
  if (spec.channels < 1) throw ConfigError("synthetic images need at least 1 channel");
  Rng rng = Rng(spec.seed).stream("textures");

  const int s = spec.image_size;
  const int ch = spec.channels;
  const std::int64_t plane = static_cast<std::int64_t>(s) * s;
  const std::int64_t sample_len = ch * plane;

  // Shared bank of smooth sinusoid gratings; each class is a mixture of a
  // few of them, so classes overlap and the task does not saturate
  // immediately.
  struct Basis {
    double fx, fy, phase, chphase;
  };
  const int bank_size = std::max(2 * spec.classes, 6);
  const int mix_count = 3;
  std::vector<Basis> bank(static_cast<size_t>(bank_size));
  for (auto& b : bank) {
    b.fx = 0.5 + rng.uniform01() * 2.5;
    b.fy = 0.5 + rng.uniform01() * 2.5;
    b.phase = rng.uniform(0.0, 6.283185307179586);
    b.chphase = rng.uniform(0.0, 6.283185307179586);
  }
  struct Mixture {
    int basis[3];
    double weight[3];
  };
  std::vector<Mixture> classes(static_cast<size_t>(spec.classes));
  for (auto& m : classes) {
    for (int k = 0; k < mix_count; ++k) {
      m.basis[k] = static_cast<int>(rng.below(static_cast<std::uint64_t>(bank_size)));
      m.weight[k] = 0.6 + 0.8 * rng.uniform01();
      if (rng.uniform01() < 0.5) m.weight[k] = -m.weight[k];
    }
  }
  auto pattern_value = [&](const Basis& b, int c, int y, int x) {
    const double t = 6.283185307179586 * (b.fx * x + b.fy * y) / static_cast<double>(s);
    return std::cos(t + b.phase + b.chphase * c);
  };

  auto fill = [&](Dataset& d, int count) {
    d.sample_shape = Shape{ch, s, s};
    d.data.resize(static_cast<size_t>(count) * sample_len);
    d.labels.resize(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
      const int label = i % spec.classes;
      d.labels[static_cast<size_t>(i)] = label;
      const auto& m = classes[static_cast<size_t>(label)];
      double amp[3];
      for (int k = 0; k < mix_count; ++k) amp[k] = m.weight[k] * (1.0 + 0.5 * rng.gaussian());
      double* base = d.data.data() + static_cast<std::int64_t>(i) * sample_len;
      for (int c = 0; c < ch; ++c) {
        for (int y = 0; y < s; ++y) {
          for (int x = 0; x < s; ++x) {
            double v = 0.6 * rng.gaussian();
            for (int k = 0; k < mix_count; ++k) {
              v += amp[k] * pattern_value(bank[static_cast<size_t>(m.basis[k])], c, y, x);
            }
            base[c * plane + y * s + x] = v;
          }
        }
      }
    }
  };
  DatasetPair pair;
  fill(pair.train, spec.train_samples);
  fill(pair.test, spec.test_samples);
  standardize(pair);
  return pair;
}

Dataset read_cifar10_records(const std::string& file, int max_records) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open CIFAR-10 binary file " + file);
  in.seekg(0, std::ios::end);
  const std::int64_t bytes = in.tellg();
  in.seekg(0, std::ios::beg);
  if (bytes % kCifarRecord != 0) {
    throw DataError("CIFAR-10 file " + file + " length " + std::to_string(bytes) +
                    " is not a multiple of " + std::to_string(kCifarRecord));
  }
  std::int64_t records = bytes / kCifarRecord;
  if (max_records > 0) records = std::min<std::int64_t>(records, max_records);

  Dataset d;
  d.sample_shape = Shape{kCifarChannels, kCifarDim, kCifarDim};
  d.data.resize(static_cast<size_t>(records) * (kCifarRecord - 1));
  d.labels.resize(static_cast<size_t>(records));
  std::vector<unsigned char> rec(kCifarRecord);
  for (std::int64_t r = 0; r < records; ++r) {
    in.read(reinterpret_cast<char*>(rec.data()), kCifarRecord);
    if (!in) throw DataError("short read in CIFAR-10 file " + file);
    if (rec[0] > 9) {
      throw DataError("CIFAR-10 label byte " + std::to_string(rec[0]) + " out of range in " + file);
    }
    d.labels[static_cast<size_t>(r)] = rec[0];
    double* base = d.data.data() + r * (kCifarRecord - 1);
    for (int i = 0; i < kCifarRecord - 1; ++i) base[i] = static_cast<double>(rec[static_cast<size_t>(i) + 1]) / 255.0;
  }
  return d;
}

DatasetPair load_dataset(const DatasetSpec& spec) {
  switch (spec.kind) {
    case DatasetSpec::Kind::synthetic_blobs: return make_blobs(spec);
    case DatasetSpec::Kind::synthetic_images: return make_texture_images(spec);
    case DatasetSpec::Kind::cifar10_binary: break;
  }

  namespace fs = std::filesystem;
  DatasetPair pair;
  if (fs::is_directory(spec.path)) {
    Dataset train;
    for (int i = 1; i <= 5; ++i) {
      const std::string f = spec.path + "/data_batch_" + std::to_string(i) + ".bin";
      if (!fs::exists(f)) continue;
      const int remaining =
          spec.subset_size > 0 ? spec.subset_size - train.size() : -1;
      if (spec.subset_size > 0 && remaining <= 0) break;
      Dataset part = read_cifar10_records(f, remaining > 0 ? remaining : 0);
      if (train.size() == 0) {
        train = std::move(part);
      } else {
        train.data.insert(train.data.end(), part.data.begin(), part.data.end());
        train.labels.insert(train.labels.end(), part.labels.begin(), part.labels.end());
      }
    }
    if (train.size() == 0) throw DataError("no data_batch_*.bin records found in " + spec.path);
    if (spec.subset_size > 0 && train.size() < spec.subset_size) {
      throw DataError("requested subset of " + std::to_string(spec.subset_size) +
                      " records but only " + std::to_string(train.size()) + " are available");
    }
    pair.train = std::move(train);
    pair.test = read_cifar10_records(spec.path + "/test_batch.bin", spec.test_size);
  } else {
    // single file: first subset_size records train, next test_size records test
    Dataset all = read_cifar10_records(spec.path, 0);
    const int want_train = spec.subset_size > 0 ? spec.subset_size : all.size();
    const int want_test = spec.test_size;
    if (want_train > all.size() || want_train + want_test > all.size()) {
      throw DataError("requested subset of " + std::to_string(want_train + want_test) +
                      " records but file holds " + std::to_string(all.size()));
    }
    const std::int64_t len = all.sample_numel();
    pair.train.sample_shape = all.sample_shape;
    pair.train.data.assign(all.data.begin(), all.data.begin() + want_train * len);
    pair.train.labels.assign(all.labels.begin(), all.labels.begin() + want_train);
    pair.test.sample_shape = all.sample_shape;
    if (want_test > 0) {
      pair.test.data.assign(all.data.begin() + want_train * len,
                            all.data.begin() + (want_train + want_test) * len);
      pair.test.labels.assign(all.labels.begin() + want_train,
                              all.labels.begin() + want_train + want_test);
    } else {
      pair.test = pair.train;
    }
  }
  if (spec.subset_size > 0 && pair.train.size() > spec.subset_size) {
    const std::int64_t len = pair.train.sample_numel();
    pair.train.data.resize(static_cast<size_t>(spec.subset_size) * len);
    pair.train.labels.resize(static_cast<size_t>(spec.subset_size));
  }
  standardize(pair);
  return pair;
}

}  // namespace noiselab
