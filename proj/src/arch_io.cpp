#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "esprune/arch.hpp"
#include "text_format.hpp"

namespace esprune {

using namespace text;

namespace {

constexpr std::string_view kMagic = "esprune-arch";
constexpr int kVersion = 1;

}  // namespace

void write_arch(std::ostream& os, const ArchSpec& arch) {
  os << kMagic << ' ' << kVersion << '\n';
  os << "family " << to_string(arch.family) << '\n';
  os << "input " << arch.input.channels << ' ' << arch.input.height << ' '
     << arch.input.width << '\n';
  os << "num_classes " << arch.num_classes << '\n';
  os << "growth_rate " << arch.growth_rate << '\n';
  os << "initial_width " << arch.initial_width << '\n';
  os << "blocks_per_stage " << join_ints(arch.blocks_per_stage) << '\n';
  os << "layers " << arch.layers.size() << '\n';
  for (std::size_t id = 0; id < arch.layers.size(); ++id) {
    const LayerSpec& l = arch.layers[id];
    if (l.name.empty() || l.name.find_first_of(" \t\n\r=") != std::string::npos) {
      throw FormatError("layer " + std::to_string(id) +
                        " name must be non-empty without spaces or '='");
    }
    os << "layer " << id << ' ' << to_string(l.kind) << " name=" << l.name
       << " filters=" << l.filters << " kernel=" << l.kernel_h << 'x'
       << l.kernel_w << " stride=" << l.stride << " padding=" << l.padding
       << " bias=" << (l.bias ? 1 : 0) << " inputs=" << join_ints(l.inputs)
       << " map=" << join_ints(l.channel_map) << '\n';
  }
}

ArchSpec read_arch(std::istream& is) {
  ArchSpec arch;
  {
    auto rec = expect_record(is, kMagic);
    int version = 0;
    if (!(rec >> version) || version != kVersion) {
      throw FormatError("unsupported architecture document version");
    }
  }
  {
    auto rec = expect_record(is, "family");
    std::string family;
    rec >> family;
    arch.family = family_from_string(family);
  }
  {
    auto rec = expect_record(is, "input");
    if (!(rec >> arch.input.channels >> arch.input.height >> arch.input.width)) {
      throw FormatError("bad input record");
    }
  }
  auto read_scalar = [&](std::string_view key, int& value) {
    auto rec = expect_record(is, key);
    if (!(rec >> value)) throw FormatError("bad " + std::string(key) + " record");
  };
  read_scalar("num_classes", arch.num_classes);
  read_scalar("growth_rate", arch.growth_rate);
  read_scalar("initial_width", arch.initial_width);
  {
    auto rec = expect_record(is, "blocks_per_stage");
    std::string list;
    rec >> list;
    arch.blocks_per_stage = split_ints(list, "blocks_per_stage");
  }
  int count = 0;
  read_scalar("layers", count);
  if (count < 0) throw FormatError("negative layer count");
  arch.layers.reserve(count);
  for (int id = 0; id < count; ++id) {
    auto rec = expect_record(is, "layer");
    int stated_id = -1;
    std::string kind;
    if (!(rec >> stated_id >> kind) || stated_id != id) {
      throw FormatError("layer records must be numbered in order (expected " +
                        std::to_string(id) + ")");
    }
    LayerSpec l;
    l.kind = layer_kind_from_string(kind);
    std::string token;
    const auto next = [&](std::string_view key) {
      if (!(rec >> token)) {
        throw FormatError("layer " + std::to_string(id) + " is missing '" +
                          std::string(key) + "'");
      }
      return field_value(token, key);
    };
    l.name = std::string(next("name"));
    l.filters = parse_int(next("filters"), "filters");
    {
      const std::string_view kernel = next("kernel");
      const auto x = kernel.find('x');
      if (x == std::string_view::npos) throw FormatError("bad kernel field");
      l.kernel_h = parse_int(kernel.substr(0, x), "kernel");
      l.kernel_w = parse_int(kernel.substr(x + 1), "kernel");
    }
    l.stride = parse_int(next("stride"), "stride");
    l.padding = parse_int(next("padding"), "padding");
    l.bias = parse_int(next("bias"), "bias") != 0;
    l.inputs = split_ints(next("inputs"), "inputs");
    l.channel_map = split_ints(next("map"), "map");
    if (rec >> token) {
      throw FormatError("layer " + std::to_string(id) + " has trailing field '" +
                        token + "'");
    }
    arch.layers.push_back(std::move(l));
  }
  return arch;
}

std::string arch_to_string(const ArchSpec& arch) {
  std::ostringstream os;
  write_arch(os, arch);
  return os.str();
}

ArchSpec arch_from_string(std::string_view text) {
  std::istringstream is{std::string(text)};
  return read_arch(is);
}

void save_arch(const std::string& path, const ArchSpec& arch) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  write_arch(os, arch);
  if (!os.flush()) throw FormatError("failed writing " + path);
}

ArchSpec load_arch(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_arch(is);
}

}  // namespace esprune
