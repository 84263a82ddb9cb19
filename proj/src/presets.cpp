#include <algorithm>
#include <cmath>
#include <utility>

#include "esprune/arch.hpp"

namespace esprune {

namespace {

constexpr int kPool = -1;

class ArchBuilder {
 public:
  ArchBuilder(Family family, FeatureShape input, int num_classes) {
    arch_.family = family;
    arch_.input = input;
    arch_.num_classes = num_classes;
  }

  ArchSpec& arch() { return arch_; }
  ArchSpec take() { return std::move(arch_); }

  int conv(std::string name, int input, int filters, int kernel, int stride,
           int padding, bool bias = false) {
    LayerSpec l;
    l.kind = LayerKind::conv;
    l.name = std::move(name);
    l.filters = filters;
    l.kernel_h = l.kernel_w = kernel;
    l.stride = stride;
    l.padding = padding;
    l.bias = bias;
    return add(std::move(l), {input});
  }

  int unary(LayerKind kind, std::string name, int input) {
    LayerSpec l;
    l.kind = kind;
    l.name = std::move(name);
    return add(std::move(l), {input});
  }

  int pool(LayerKind kind, std::string name, int input, int kernel, int stride) {
    LayerSpec l;
    l.kind = kind;
    l.name = std::move(name);
    l.kernel_h = l.kernel_w = kernel;
    l.stride = stride;
    return add(std::move(l), {input});
  }

  int fully_connected(std::string name, int input, int outputs) {
    LayerSpec l;
    l.kind = LayerKind::fully_connected;
    l.name = std::move(name);
    l.filters = outputs;
    l.bias = true;
    return add(std::move(l), {input});
  }

  int merge(LayerKind kind, std::string name, std::vector<int> inputs) {
    LayerSpec l;
    l.kind = kind;
    l.name = std::move(name);
    return add(std::move(l), std::move(inputs));
  }

  int shortcut(std::string name, int input, int in_channels, int out_channels,
               int stride) {
    LayerSpec l;
    l.kind = LayerKind::shortcut;
    l.name = std::move(name);
    l.filters = out_channels;
    l.stride = stride;
    const int offset = (out_channels - in_channels) / 2;
    for (int c = 0; c < in_channels; ++c) l.channel_map.push_back(c + offset);
    return add(std::move(l), {input});
  }

  // conv -> batch_norm -> relu
  int conv_bn_relu(const std::string& name, int input, int filters, int kernel,
                   int stride, int padding) {
    const int c = conv(name, input, filters, kernel, stride, padding);
    const int b = unary(LayerKind::batch_norm, name + ".bn", c);
    return unary(LayerKind::relu, name + ".relu", b);
  }

 private:
  int add(LayerSpec layer, std::vector<int> inputs) {
    for (int id : inputs) {
      if (id >= 0) layer.inputs.push_back(id);
    }
    arch_.layers.push_back(std::move(layer));
    return static_cast<int>(arch_.layers.size()) - 1;
  }

  ArchSpec arch_;
};

ArchSpec make_vgg(const std::vector<int>& config, int image_size, int classes) {
  ArchBuilder b(Family::cnn, {3, image_size, image_size}, classes);
  int x = -1;
  int conv_index = 0;
  int pool_index = 0;
  for (int width : config) {
    if (width == kPool) {
      x = b.pool(LayerKind::max_pool, "pool" + std::to_string(++pool_index), x, 2, 2);
    } else {
      x = b.conv_bn_relu("conv" + std::to_string(++conv_index), x, width, 3, 1, 1);
    }
  }
  x = b.fully_connected("fc1", x, 512);
  x = b.unary(LayerKind::relu, "fc1.relu", x);
  x = b.fully_connected("fc2", x, 512);
  x = b.unary(LayerKind::relu, "fc2.relu", x);
  b.fully_connected("fc3", x, classes);
  return b.take();
}

ArchSpec make_plain(int image_size, int classes) {
  ArchBuilder b(Family::cnn, {3, image_size, image_size}, classes);
  int x = b.conv_bn_relu("conv1", -1, 8, 3, 1, 1);
  x = b.pool(LayerKind::max_pool, "pool1", x, 2, 2);
  x = b.conv_bn_relu("conv2", x, 16, 3, 1, 1);
  x = b.pool(LayerKind::max_pool, "pool2", x, 2, 2);
  x = b.conv_bn_relu("conv3", x, 16, 3, 1, 1);
  x = b.conv_bn_relu("conv4", x, 32, 3, 1, 1);
  x = b.unary(LayerKind::global_pool, "gap", x);
  b.fully_connected("fc", x, classes);
  return b.take();
}

// CIFAR-style ResNet: identity shortcuts, zero-padded and subsampled at
// stage transitions.
ArchSpec make_resnet(const std::vector<int>& widths, const std::vector<int>& blocks,
                     int image_size, int classes) {
  ArchBuilder b(Family::resnet, {3, image_size, image_size}, classes);
  b.arch().blocks_per_stage = blocks;
  int stream = b.conv_bn_relu("stem", -1, widths.front(), 3, 1, 1);
  int channels = widths.front();
  for (std::size_t s = 0; s < widths.size(); ++s) {
    const int width = widths[s];
    for (int k = 0; k < blocks[s]; ++k) {
      const std::string prefix =
          "s" + std::to_string(s + 1) + ".b" + std::to_string(k + 1);
      const int stride = (s > 0 && k == 0) ? 2 : 1;
      int x = b.conv_bn_relu(prefix + ".conv1", stream, width, 3, stride, 1);
      x = b.conv(prefix + ".conv2", x, width, 3, 1, 1);
      x = b.unary(LayerKind::batch_norm, prefix + ".conv2.bn", x);
      int identity = stream;
      if (stride != 1 || channels != width) {
        identity = b.shortcut(prefix + ".shortcut", stream, channels, width, stride);
      }
      x = b.merge(LayerKind::residual_add, prefix + ".add", {x, identity});
      stream = b.unary(LayerKind::relu, prefix + ".relu", x);
      channels = width;
    }
  }
  stream = b.unary(LayerKind::global_pool, "gap", stream);
  b.fully_connected("fc", stream, classes);
  return b.take();
}

// Pre-activation DenseNet with bottleneck layers. Transitions pool first,
// then apply a 1x1 conv.
ArchSpec make_densenet(const std::vector<int>& blocks, int growth, int initial,
                       double compression, int image_size, int classes) {
  ArchBuilder b(Family::densenet, {3, image_size, image_size}, classes);
  b.arch().growth_rate = growth;
  b.arch().initial_width = initial;
  b.arch().blocks_per_stage = blocks;
  int stream = b.conv("stem", -1, initial, 3, 1, 1);
  int channels = initial;
  for (std::size_t d = 0; d < blocks.size(); ++d) {
    for (int i = 0; i < blocks[d]; ++i) {
      const std::string prefix =
          "d" + std::to_string(d + 1) + ".l" + std::to_string(i + 1);
      int x = b.unary(LayerKind::batch_norm, prefix + ".bn1", stream);
      x = b.unary(LayerKind::relu, prefix + ".relu1", x);
      x = b.conv(prefix + ".bottleneck", x, 4 * growth, 1, 1, 0);
      x = b.unary(LayerKind::batch_norm, prefix + ".bn2", x);
      x = b.unary(LayerKind::relu, prefix + ".relu2", x);
      x = b.conv(prefix + ".conv", x, growth, 3, 1, 1);
      stream = b.merge(LayerKind::concat, prefix + ".concat", {stream, x});
      channels += growth;
    }
    if (d + 1 < blocks.size()) {
      const std::string prefix = "t" + std::to_string(d + 1);
      int x = b.unary(LayerKind::batch_norm, prefix + ".bn", stream);
      x = b.unary(LayerKind::relu, prefix + ".relu", x);
      x = b.pool(LayerKind::avg_pool, prefix + ".pool", x, 2, 2);
      channels = std::max(1, static_cast<int>(std::floor(channels * compression)));
      stream = b.conv(prefix + ".conv", x, channels, 1, 1, 0);
    }
  }
  int x = b.unary(LayerKind::batch_norm, "final.bn", stream);
  x = b.unary(LayerKind::relu, "final.relu", x);
  x = b.unary(LayerKind::global_pool, "gap", x);
  b.fully_connected("fc", x, classes);
  return b.take();
}

}  // namespace

std::vector<std::string> preset_names() {
  return {"vgg16",      "vgg19",    "resnet56",    "resnet110", "densenet50",
          "densenet100", "tiny_cnn", "tiny_resnet", "tiny_densenet"};
}

ArchSpec build_preset(std::string_view name, const PresetOptions& options) {
  const int classes = options.num_classes;
  if (classes < 1) throw FormatError("num_classes must be >= 1");
  const auto size = [&](int fallback) {
    return options.image_size > 0 ? options.image_size : fallback;
  };
  const auto growth = [&](int fallback) {
    return options.growth_rate > 0 ? options.growth_rate : fallback;
  };
  const auto initial = [&](int fallback) {
    return options.initial_width > 0 ? options.initial_width : fallback;
  };

  if (name == "vgg16") {
    return make_vgg({64, 64, kPool, 128, 128, kPool, 256, 256, 256, kPool, 512, 512,
                     512, kPool, 512, 512, 512, kPool},
                    size(32), classes);
  }
  if (name == "vgg19") {
    return make_vgg({64, 64, kPool, 128, 128, kPool, 256, 256, 256, 256, kPool, 512,
                     512, 512, 512, kPool, 512, 512, 512, 512, kPool},
                    size(32), classes);
  }
  if (name == "resnet56") return make_resnet({16, 32, 64}, {9, 9, 9}, size(32), classes);
  if (name == "resnet110") {
    return make_resnet({16, 32, 64}, {18, 18, 18}, size(32), classes);
  }
  if (name == "densenet50") {
    const int k = growth(12);
    return make_densenet({7, 8, 8}, k, initial(2 * k), options.compression, size(32),
                         classes);
  }
  if (name == "densenet100") {
    const int k = growth(12);
    return make_densenet({16, 16, 16}, k, initial(2 * k), options.compression,
                         size(32), classes);
  }
  if (name == "tiny_cnn") return make_plain(size(16), classes);
  if (name == "tiny_resnet") return make_resnet({8, 16}, {2, 2}, size(16), classes);
  if (name == "tiny_densenet") {
    const int k = growth(4);
    return make_densenet({2, 1}, k, initial(2 * k), options.compression, size(16),
                         classes);
  }
  throw FormatError("unknown preset '" + std::string(name) + "'");
}

}  // namespace esprune
