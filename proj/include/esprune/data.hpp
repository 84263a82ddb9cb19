#ifndef ESPRUNE_DATA_HPP_
#define ESPRUNE_DATA_HPP_

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "esprune/tensor.hpp"

namespace esprune {

/// Labelled images, shape (count, channels, height, width), pixels in [0,1].
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  int num_classes = 0;

  int size() const { return static_cast<int>(labels.size()); }
  int channels() const { return images.rank() == 4 ? images.dim(1) : 0; }
  int height() const { return images.rank() == 4 ? images.dim(2) : 0; }
  int width() const { return images.rank() == 4 ? images.dim(3) : 0; }
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CifarFormat { cifar10, cifar100 };

/// Reads one CIFAR binary batch file. CIFAR-100 records carry a coarse and a
/// fine label byte; the fine label is kept.
Dataset load_cifar_binary(const std::string& path,
                          CifarFormat format = CifarFormat::cifar10);

/// Concatenates several batch files in order.
Dataset load_cifar_binary(const std::vector<std::string>& paths,
                          CifarFormat format = CifarFormat::cifar10);

/// Loads a file, or the standard training batches when `path` is a directory
/// (data_batch_1..5.bin for CIFAR-10, train.bin for CIFAR-100).
Dataset load_cifar_path(const std::string& path,
                        CifarFormat format = CifarFormat::cifar10);

/// Encodes records in the CIFAR binary layout (pixels rounded to bytes).
std::vector<std::uint8_t> encode_cifar_binary(const Dataset& data,
                                              CifarFormat format = CifarFormat::cifar10);

/// Selects rows in the given order.
Dataset subset(const Dataset& data, std::span<const int> indices);

/// Indices behind stratified_sample, ascending.
std::vector<int> stratified_indices(const Dataset& data, int per_class,
                                    std::uint64_t seed);

/// `per_class` images of every class, chosen uniformly without replacement.
/// Selected images keep their original relative order.
Dataset stratified_sample(const Dataset& data, int per_class, std::uint64_t seed);

/// Per-class Gaussian-blob images with distinct class means and fixed noise.
Dataset synthetic(int num_classes, int per_class, int image_size, std::uint64_t seed);

/// Subtracts a per-channel mean and divides by a per-channel std.
void normalize_channels(Dataset& data, std::span<const float> mean,
                        std::span<const float> stddev);

std::vector<int> class_histogram(const Dataset& data);

}  // namespace esprune

#endif  // ESPRUNE_DATA_HPP_
