#ifndef ESPRUNE_MODEL_IO_HPP_
#define ESPRUNE_MODEL_IO_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "esprune/engine.hpp"

namespace esprune {

// A saved model is a directory holding
//   arch.txt          architecture document
//   weights.bin       raw little-endian parameter values, layer by layer
//   weights.manifest  dtype, byte count, CRC-32 and one line per tensor
//                     (layer id, tensor name, shape, byte offset)

inline constexpr const char* kArchFile = "arch.txt";
inline constexpr const char* kWeightsFile = "weights.bin";
inline constexpr const char* kManifestFile = "weights.manifest";

struct TensorRecord {
  int layer = 0;
  std::string name;  // "weight" or "bias"
  Shape shape;
  std::int64_t offset = 0;
};

struct WeightManifest {
  std::string dtype;  // "f32" or "f64"
  std::int64_t bytes = 0;
  std::uint32_t crc32 = 0;
  std::vector<TensorRecord> tensors;
};

template <typename Scalar>
void save_model(const std::string& dir, const Model<Scalar>& model);

/// Loads a saved model, converting from the stored precision if needed.
/// Throws FormatError on a missing file, size or checksum mismatch, or
/// tensors that disagree with the architecture.
template <typename Scalar>
Model<Scalar> load_model(const std::string& dir);

WeightManifest read_manifest(const std::string& path);

}  // namespace esprune

#endif  // ESPRUNE_MODEL_IO_HPP_
