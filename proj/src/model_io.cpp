#include "esprune/model_io.hpp"

#include <algorithm>
#include <bit>
#include <boost/crc.hpp>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

#include "text_format.hpp"

namespace esprune {

namespace fs = std::filesystem;

namespace {

template <typename Scalar>
constexpr const char* dtype_name() {
  return sizeof(Scalar) == 4 ? "f32" : "f64";
}

template <typename Scalar>
void append_le(std::vector<unsigned char>& out, const Tensor<Scalar>& t) {
  const std::size_t start = out.size();
  out.resize(start + t.size() * sizeof(Scalar));
  std::memcpy(out.data() + start, t.data(), t.size() * sizeof(Scalar));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t at = start; at < out.size(); at += sizeof(Scalar)) {
      std::reverse(out.begin() + at, out.begin() + at + sizeof(Scalar));
    }
  }
}

template <typename Stored, typename Scalar>
Tensor<Scalar> read_le(const std::vector<unsigned char>& bytes, const TensorRecord& rec) {
  const std::int64_t count = shape_size(rec.shape);
  typename Tensor<Stored>::Vector values(count);
  const unsigned char* src = bytes.data() + rec.offset;
  for (std::int64_t i = 0; i < count; ++i) {
    unsigned char raw[sizeof(Stored)];
    std::memcpy(raw, src + i * sizeof(Stored), sizeof(Stored));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(Stored));
    Stored v;
    std::memcpy(&v, raw, sizeof(Stored));
    values[i] = v;
  }
  return Tensor<Scalar>(rec.shape, values.template cast<Scalar>());
}

std::uint32_t crc32_of(const std::vector<unsigned char>& bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

std::string shape_field(const Shape& shape) {
  if (shape.empty()) return "-";
  return text::join_ints(shape);
}

}  // namespace

template <typename Scalar>
void save_model(const std::string& dir, const Model<Scalar>& model) {
  check_params(model);
  fs::create_directories(dir);
  save_arch((fs::path(dir) / kArchFile).string(), model.arch);

  std::vector<unsigned char> blob;
  WeightManifest manifest;
  manifest.dtype = dtype_name<Scalar>();
  for (int id = 0; id < static_cast<int>(model.params.size()); ++id) {
    const auto& p = model.params[id];
    for (const auto& [name, tensor] :
         {std::pair<const char*, const Tensor<Scalar>*>{"weight", &p.weight},
          {"bias", &p.bias}}) {
      if (tensor->empty()) continue;
      manifest.tensors.push_back(
          {id, name, tensor->shape(), static_cast<std::int64_t>(blob.size())});
      append_le(blob, *tensor);
    }
  }
  manifest.bytes = static_cast<std::int64_t>(blob.size());
  manifest.crc32 = crc32_of(blob);

  {
    std::ofstream os(fs::path(dir) / kWeightsFile, std::ios::binary);
    os.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!os.flush()) throw FormatError("failed writing weights to " + dir);
  }
  std::ofstream os(fs::path(dir) / kManifestFile, std::ios::binary);
  os << "esprune-weights 1\n";
  os << "dtype " << manifest.dtype << '\n';
  os << "bytes " << manifest.bytes << '\n';
  os << "crc32 " << std::hex << std::setw(8) << std::setfill('0') << manifest.crc32 << std::dec
     << '\n';
  os << "tensors " << manifest.tensors.size() << '\n';
  for (const auto& t : manifest.tensors) {
    os << "tensor " << t.layer << ' ' << t.name << ' ' << shape_field(t.shape) << ' ' << t.offset
       << '\n';
  }
  if (!os.flush()) throw FormatError("failed writing manifest to " + dir);
}

WeightManifest read_manifest(const std::string& path) {
  using namespace text;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open manifest " + path);
  WeightManifest m;
  int version = 0;
  if (!(expect_record(is, "esprune-weights") >> version) || version != 1) {
    throw FormatError(path + ": unsupported manifest version");
  }
  expect_record(is, "dtype") >> m.dtype;
  if (m.dtype != "f32" && m.dtype != "f64") throw FormatError(path + ": unknown dtype");
  if (!(expect_record(is, "bytes") >> m.bytes)) throw FormatError(path + ": bad byte count");
  if (!(expect_record(is, "crc32") >> std::hex >> m.crc32)) throw FormatError(path + ": bad crc32");
  std::size_t count = 0;
  if (!(expect_record(is, "tensors") >> count)) throw FormatError(path + ": bad tensor count");
  for (std::size_t k = 0; k < count; ++k) {
    auto rec = expect_record(is, "tensor");
    TensorRecord t;
    std::string shape;
    if (!(rec >> t.layer >> t.name >> shape >> t.offset)) {
      throw FormatError(path + ": bad tensor record " + std::to_string(k));
    }
    t.shape = split_ints(shape, "shape");
    m.tensors.push_back(std::move(t));
  }
  return m;
}

template <typename Scalar>
Model<Scalar> load_model(const std::string& dir) {
  const WeightManifest manifest = read_manifest((fs::path(dir) / kManifestFile).string());
  Model<Scalar> model{load_arch((fs::path(dir) / kArchFile).string()), {}};

  std::ifstream is(fs::path(dir) / kWeightsFile, std::ios::binary);
  if (!is) throw FormatError("cannot open weights in " + dir);
  const std::vector<unsigned char> blob((std::istreambuf_iterator<char>(is)),
                                        std::istreambuf_iterator<char>());
  if (static_cast<std::int64_t>(blob.size()) != manifest.bytes) {
    throw FormatError(dir + ": weight blob has " + std::to_string(blob.size()) +
                      " bytes, manifest says " + std::to_string(manifest.bytes));
  }
  if (crc32_of(blob) != manifest.crc32) {
    throw FormatError(dir + ": weight blob checksum mismatch");
  }

  const std::size_t width = manifest.dtype == "f32" ? 4 : 8;
  model.params.resize(model.arch.layers.size());
  for (const TensorRecord& rec : manifest.tensors) {
    const std::int64_t end = rec.offset + shape_size(rec.shape) * static_cast<std::int64_t>(width);
    if (rec.layer < 0 || rec.layer >= static_cast<int>(model.params.size()) || rec.offset < 0 ||
        end > manifest.bytes) {
      throw FormatError(dir + ": tensor record for layer " + std::to_string(rec.layer) +
                        " is out of range");
    }
    Tensor<Scalar> t = width == 4 ? read_le<float, Scalar>(blob, rec)
                                  : read_le<double, Scalar>(blob, rec);
    auto& p = model.params[rec.layer];
    if (rec.name == "weight") {
      p.weight = std::move(t);
    } else if (rec.name == "bias") {
      p.bias = std::move(t);
    } else {
      throw FormatError(dir + ": unknown tensor name '" + rec.name + "'");
    }
  }
  try {
    check_params(model);
  } catch (const ShapeError& e) {
    throw FormatError(dir + ": " + e.what());
  }
  return model;
}

template void save_model(const std::string&, const Model<float>&);
template void save_model(const std::string&, const Model<double>&);
template Model<float> load_model<float>(const std::string&);
template Model<double> load_model<double>(const std::string&);

}  // namespace esprune
