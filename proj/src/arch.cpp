#include "esprune/arch.hpp"

#include <algorithm>
#include <array>
#include <ostream>
#include <sstream>
#include <utility>

namespace esprune {

namespace {

constexpr std::array<std::pair<Family, std::string_view>, 3> kFamilyNames{{
    {Family::cnn, "cnn"},
    {Family::resnet, "resnet"},
    {Family::densenet, "densenet"},
}};

constexpr std::array<std::pair<LayerKind, std::string_view>, 10> kKindNames{{
    {LayerKind::conv, "conv"},
    {LayerKind::batch_norm, "batch_norm"},
    {LayerKind::relu, "relu"},
    {LayerKind::max_pool, "max_pool"},
    {LayerKind::avg_pool, "avg_pool"},
    {LayerKind::global_pool, "global_pool"},
    {LayerKind::fully_connected, "fully_connected"},
    {LayerKind::residual_add, "residual_add"},
    {LayerKind::concat, "concat"},
    {LayerKind::shortcut, "shortcut"},
}};

std::string describe(const FeatureShape& shape) {
  std::ostringstream os;
  os << shape;
  return os.str();
}

int window_out(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

}  // namespace

std::string_view to_string(Family family) {
  for (const auto& [value, name] : kFamilyNames) {
    if (value == family) return name;
  }
  return "?";
}

std::string_view to_string(LayerKind kind) {
  for (const auto& [value, name] : kKindNames) {
    if (value == kind) return name;
  }
  return "?";
}

Family family_from_string(std::string_view text) {
  for (const auto& [value, name] : kFamilyNames) {
    if (name == text) return value;
  }
  throw FormatError("unknown architecture family '" + std::string(text) + "'");
}

LayerKind layer_kind_from_string(std::string_view text) {
  for (const auto& [value, name] : kKindNames) {
    if (name == text) return value;
  }
  throw FormatError("unknown layer kind '" + std::string(text) + "'");
}

std::ostream& operator<<(std::ostream& os, const FeatureShape& shape) {
  return os << '(' << shape.channels << ',' << shape.height << ','
            << shape.width << ')';
}

FeatureShape input_shape_of(const ArchSpec& arch,
                            const std::vector<FeatureShape>& shapes,
                            int layer) {
  const LayerSpec& spec = arch.layers[layer];
  if (spec.inputs.empty()) return arch.input;
  if (spec.kind == LayerKind::concat) {
    FeatureShape out = shapes[spec.inputs.front()];
    out.channels = 0;
    for (int id : spec.inputs) out.channels += shapes[id].channels;
    return out;
  }
  return shapes[spec.inputs.front()];
}

std::vector<FeatureShape> propagate_shapes(const ArchSpec& arch) {
  if (arch.input.channels < 1 || arch.input.height < 1 || arch.input.width < 1) {
    throw ShapeError(-1, "input shape " + describe(arch.input) + " is empty");
  }
  std::vector<FeatureShape> shapes;
  shapes.reserve(arch.layers.size());
  const int count = static_cast<int>(arch.layers.size());
  for (int id = 0; id < count; ++id) {
    const LayerSpec& layer = arch.layers[id];
    for (int producer : layer.inputs) {
      if (producer < 0 || producer >= id) {
        throw ShapeError(id, "input " + std::to_string(producer) +
                                 " is not an earlier layer");
      }
    }
    const bool multi_input =
        layer.kind == LayerKind::residual_add || layer.kind == LayerKind::concat;
    if (!multi_input && layer.inputs.size() > 1) {
      throw ShapeError(id, std::string(to_string(layer.kind)) +
                               " takes a single input");
    }
    if (layer.kind == LayerKind::residual_add && layer.inputs.size() < 2) {
      throw ShapeError(id, "residual_add needs at least two inputs");
    }

    const FeatureShape in = layer.inputs.empty() ? arch.input
                                                 : shapes[layer.inputs.front()];
    FeatureShape out = in;
    switch (layer.kind) {
      case LayerKind::conv: {
        if (layer.filters < 1 || layer.kernel_h < 1 || layer.kernel_w < 1 ||
            layer.stride < 1 || layer.padding < 0) {
          throw ShapeError(id, "conv needs filters, kernel and stride >= 1");
        }
        out = {layer.filters,
               window_out(in.height, layer.kernel_h, layer.stride, layer.padding),
               window_out(in.width, layer.kernel_w, layer.stride, layer.padding)};
        break;
      }
      case LayerKind::batch_norm:
      case LayerKind::relu:
        break;
      case LayerKind::max_pool:
      case LayerKind::avg_pool: {
        if (layer.kernel_h < 1 || layer.kernel_w < 1 || layer.stride < 1 ||
            layer.padding != 0) {
          throw ShapeError(id, "pooling needs kernel and stride >= 1, no padding");
        }
        out = {in.channels, window_out(in.height, layer.kernel_h, layer.stride, 0),
               window_out(in.width, layer.kernel_w, layer.stride, 0)};
        break;
      }
      case LayerKind::global_pool:
        out = {in.channels, 1, 1};
        break;
      case LayerKind::fully_connected:
        if (layer.filters < 1) {
          throw ShapeError(id, "fully_connected needs filters >= 1");
        }
        out = {layer.filters, 1, 1};
        break;
      case LayerKind::residual_add:
        for (int producer : layer.inputs) {
          if (!(shapes[producer] == in)) {
            throw ShapeError(id, "residual_add shape mismatch: " + describe(in) +
                                     " vs " + describe(shapes[producer]));
          }
        }
        break;
      case LayerKind::concat:
        out.channels = 0;
        for (int producer : layer.inputs) {
          const FeatureShape& s = shapes[producer];
          if (s.height != in.height || s.width != in.width) {
            throw ShapeError(id, "concat spatial mismatch: " + describe(in) +
                                     " vs " + describe(s));
          }
          out.channels += s.channels;
        }
        if (layer.inputs.empty()) out.channels = in.channels;
        break;
      case LayerKind::shortcut: {
        if (layer.filters < 1 || layer.stride < 1) {
          throw ShapeError(id, "shortcut needs filters and stride >= 1");
        }
        if (static_cast<int>(layer.channel_map.size()) != in.channels) {
          throw ShapeError(id, "shortcut channel map has " +
                                   std::to_string(layer.channel_map.size()) +
                                   " entries for input " + describe(in));
        }
        std::vector<bool> used(layer.filters, false);
        for (int target : layer.channel_map) {
          if (target < -1 || target >= layer.filters) {
            throw ShapeError(id, "shortcut channel target out of range");
          }
          if (target >= 0) {
            if (used[target]) throw ShapeError(id, "shortcut target used twice");
            used[target] = true;
          }
        }
        out = {layer.filters, (in.height + layer.stride - 1) / layer.stride,
               (in.width + layer.stride - 1) / layer.stride};
        break;
      }
    }
    if (out.channels < 1 || out.height < 1 || out.width < 1) {
      throw ShapeError(id, "output shape " + describe(out) + " is empty");
    }
    shapes.push_back(out);
  }
  return shapes;
}

FlopsReport count_flops(const ArchSpec& arch) {
  const std::vector<FeatureShape> shapes = propagate_shapes(arch);
  FlopsReport report;
  const int count = static_cast<int>(arch.layers.size());
  for (int id = 0; id < count; ++id) {
    const LayerSpec& layer = arch.layers[id];
    const FeatureShape in = input_shape_of(arch, shapes, id);
    const FeatureShape& out = shapes[id];
    std::int64_t flops = 0;
    if (layer.kind == LayerKind::conv) {
      flops = std::int64_t{layer.kernel_h} * layer.kernel_w * in.channels *
              out.channels * out.height * out.width;
    } else if (layer.kind == LayerKind::fully_connected) {
      flops = in.size() * layer.filters;
    }
    report.per_layer.push_back({id, flops});
    report.total += flops;
  }
  return report;
}

int weight_layer_count(const ArchSpec& arch) {
  return static_cast<int>(std::count_if(
      arch.layers.begin(), arch.layers.end(), [](const LayerSpec& l) {
        return l.kind == LayerKind::conv || l.kind == LayerKind::fully_connected;
      }));
}

}  // namespace esprune
