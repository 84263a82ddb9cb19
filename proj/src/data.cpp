#include "esprune/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "esprune/random.hpp"

namespace esprune {

namespace {

constexpr int kCifarChannels = 3;
constexpr int kCifarSide = 32;
constexpr int kCifarPixels = kCifarChannels * kCifarSide * kCifarSide;

int label_bytes(CifarFormat format) { return format == CifarFormat::cifar10 ? 1 : 2; }
int label_limit(CifarFormat format) { return format == CifarFormat::cifar10 ? 10 : 100; }

Dataset empty_like(const Dataset& data, int count) {
  Dataset out;
  out.images = Tensor<float>({count, data.channels(), data.height(), data.width()});
  out.num_classes = data.num_classes;
  return out;
}

}  // namespace

Dataset load_cifar_binary(const std::string& path, CifarFormat format) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                         std::istreambuf_iterator<char>());
  const std::size_t record = kCifarPixels + label_bytes(format);
  if (bytes.size() % record != 0) {
    throw DataError(path + ": size " + std::to_string(bytes.size()) +
                    " bytes is not a multiple of the " + std::to_string(record) +
                    "-byte record size");
  }
  const int count = static_cast<int>(bytes.size() / record);
  Dataset data;
  data.num_classes = label_limit(format);
  data.images = Tensor<float>({count, kCifarChannels, kCifarSide, kCifarSide});
  data.labels.resize(count);
  for (int i = 0; i < count; ++i) {
    const unsigned char* rec = bytes.data() + i * record;
    const int label = rec[label_bytes(format) - 1];
    if (label >= data.num_classes) {
      throw DataError(path + ": record " + std::to_string(i) + " has label " +
                      std::to_string(label) + " >= " + std::to_string(data.num_classes));
    }
    data.labels[i] = label;
    float* dst = data.images.data() + std::int64_t{i} * kCifarPixels;
    const unsigned char* pixels = rec + label_bytes(format);
    for (int p = 0; p < kCifarPixels; ++p) dst[p] = pixels[p] / 255.0f;
  }
  return data;
}

Dataset load_cifar_binary(const std::vector<std::string>& paths, CifarFormat format) {
  std::vector<Dataset> parts;
  int total = 0;
  for (const auto& path : paths) {
    parts.push_back(load_cifar_binary(path, format));
    total += parts.back().size();
  }
  Dataset out;
  out.num_classes = label_limit(format);
  out.images = Tensor<float>({total, kCifarChannels, kCifarSide, kCifarSide});
  std::int64_t offset = 0;
  for (const auto& part : parts) {
    std::copy_n(part.images.data(), part.images.size(), out.images.data() + offset);
    offset += part.images.size();
    out.labels.insert(out.labels.end(), part.labels.begin(), part.labels.end());
  }
  return out;
}

Dataset load_cifar_path(const std::string& path, CifarFormat format) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(path)) return load_cifar_binary(path, format);
  std::vector<std::string> files;
  if (format == CifarFormat::cifar10) {
    for (int i = 1; i <= 5; ++i) {
      files.push_back((fs::path(path) / ("data_batch_" + std::to_string(i) + ".bin")).string());
    }
  } else {
    files.push_back((fs::path(path) / "train.bin").string());
  }
  return load_cifar_binary(files, format);
}

std::vector<std::uint8_t> encode_cifar_binary(const Dataset& data, CifarFormat format) {
  if (data.channels() != kCifarChannels || data.height() != kCifarSide ||
      data.width() != kCifarSide) {
    throw DataError("CIFAR records hold 3x32x32 images");
  }
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(data.size()) * (kCifarPixels + label_bytes(format)));
  for (int i = 0; i < data.size(); ++i) {
    if (format == CifarFormat::cifar100) out.push_back(0);
    out.push_back(static_cast<std::uint8_t>(data.labels[i]));
    const float* src = data.images.data() + std::int64_t{i} * kCifarPixels;
    for (int p = 0; p < kCifarPixels; ++p) {
      out.push_back(static_cast<std::uint8_t>(
          std::lround(std::clamp(src[p], 0.0f, 1.0f) * 255.0f)));
    }
  }
  return out;
}

Dataset subset(const Dataset& data, std::span<const int> indices) {
  Dataset out = empty_like(data, static_cast<int>(indices.size()));
  const std::int64_t features = std::int64_t{data.channels()} * data.height() * data.width();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int src = indices[i];
    if (src < 0 || src >= data.size()) throw DataError("subset index out of range");
    std::copy_n(data.images.data() + src * features, features,
                out.images.data() + static_cast<std::int64_t>(i) * features);
    out.labels.push_back(data.labels[src]);
  }
  return out;
}

std::vector<int> class_histogram(const Dataset& data) {
  std::vector<int> counts(data.num_classes, 0);
  for (int label : data.labels) ++counts.at(label);
  return counts;
}

std::vector<int> stratified_indices(const Dataset& data, int per_class, std::uint64_t seed) {
  if (per_class < 0) throw DataError("per_class must be >= 0");
  std::vector<std::vector<int>> by_class(data.num_classes);
  for (int i = 0; i < data.size(); ++i) by_class.at(data.labels[i]).push_back(i);
  Rng rng(seed);
  std::vector<int> chosen;
  chosen.reserve(static_cast<std::size_t>(per_class) * data.num_classes);
  for (int c = 0; c < data.num_classes; ++c) {
    auto& members = by_class[c];
    if (static_cast<int>(members.size()) < per_class) {
      throw DataError("class " + std::to_string(c) + " has " +
                      std::to_string(members.size()) + " examples, " +
                      std::to_string(per_class) + " requested");
    }
    std::shuffle(members.begin(), members.end(), rng);
    chosen.insert(chosen.end(), members.begin(), members.begin() + per_class);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

Dataset stratified_sample(const Dataset& data, int per_class, std::uint64_t seed) {
  const std::vector<int> chosen = stratified_indices(data, per_class, seed);
  return subset(data, chosen);
}

Dataset synthetic(int num_classes, int per_class, int image_size, std::uint64_t seed) {
  if (num_classes < 1 || per_class < 1 || image_size < 1) {
    throw DataError("synthetic dataset dimensions must be >= 1");
  }
  constexpr int kChannels = 3;
  constexpr float kNoise = 0.2f;
  constexpr float kBackground = 0.5f;
  Rng rng(seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  const int plane = image_size * image_size;

  // Class means: one coloured blob on a grey background.
  std::vector<std::vector<float>> means(num_classes, std::vector<float>(kChannels * plane));
  for (int k = 0; k < num_classes; ++k) {
    float colour[kChannels];
    for (float& v : colour) v = 0.1f + 0.8f * unit(rng);
    const float cy = image_size * (0.25f + 0.5f * unit(rng));
    const float cx = image_size * (0.25f + 0.5f * unit(rng));
    const float spread = image_size * (0.15f + 0.15f * unit(rng));
    for (int y = 0; y < image_size; ++y) {
      for (int x = 0; x < image_size; ++x) {
        const float d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        const float weight = std::exp(-d2 / (2 * spread * spread));
        for (int c = 0; c < kChannels; ++c) {
          means[k][c * plane + y * image_size + x] =
              kBackground + (colour[c] - kBackground) * weight;
        }
      }
    }
  }

  Dataset data;
  data.num_classes = num_classes;
  const int count = num_classes * per_class;
  data.images = Tensor<float>({count, kChannels, image_size, image_size});
  data.labels.resize(count);
  std::normal_distribution<float> noise(0.0f, kNoise);
  for (int i = 0; i < count; ++i) {
    const int label = i % num_classes;
    data.labels[i] = label;
    float* dst = data.images.data() + std::int64_t{i} * kChannels * plane;
    for (int p = 0; p < kChannels * plane; ++p) {
      dst[p] = std::clamp(means[label][p] + noise(rng), 0.0f, 1.0f);
    }
  }
  return data;
}

void normalize_channels(Dataset& data, std::span<const float> mean,
                        std::span<const float> stddev) {
  const int channels = data.channels();
  if (static_cast<int>(mean.size()) != channels || static_cast<int>(stddev.size()) != channels) {
    throw DataError("normalization needs one mean and std per channel");
  }
  const std::int64_t plane = std::int64_t{data.height()} * data.width();
  auto m = data.images.matrix(std::int64_t{data.size()} * channels, plane);
  for (std::int64_t r = 0; r < m.rows(); ++r) {
    const int c = static_cast<int>(r % channels);
    m.row(r) = (m.row(r).array() - mean[c]) / stddev[c];
  }
}

}  // namespace esprune
