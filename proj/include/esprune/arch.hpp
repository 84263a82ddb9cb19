#ifndef ESPRUNE_ARCH_HPP_
#define ESPRUNE_ARCH_HPP_

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace esprune {

enum class Family { cnn, resnet, densenet };

enum class LayerKind {
  conv,
  batch_norm,
  relu,
  max_pool,
  avg_pool,
  global_pool,
  fully_connected,
  residual_add,
  concat,
  shortcut,
};

std::string_view to_string(Family family);
std::string_view to_string(LayerKind kind);
Family family_from_string(std::string_view text);
LayerKind layer_kind_from_string(std::string_view text);

/// Channels x height x width of one sample's feature map.
struct FeatureShape {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::int64_t size() const {
    return std::int64_t{channels} * height * width;
  }
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

std::ostream& operator<<(std::ostream& os, const FeatureShape& shape);

/// One node of the layer graph.
///
/// `inputs` holds ids of earlier layers; an empty list means the layer reads
/// the network input. `filters` is the output width of conv and
/// fully_connected layers and the output channel count of a shortcut.
/// A shortcut subsamples its input by `stride` and routes input channel i to
/// output channel `channel_map[i]` (-1 drops it); unmapped outputs are zero.
struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::string name;
  int filters = 0;
  int kernel_h = 0;
  int kernel_w = 0;
  int stride = 1;
  int padding = 0;
  bool bias = false;
  std::vector<int> inputs;
  std::vector<int> channel_map;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ArchSpec {
  Family family = Family::cnn;
  FeatureShape input;
  int num_classes = 0;
  int growth_rate = 0;
  int initial_width = 0;
  std::vector<int> blocks_per_stage;
  std::vector<LayerSpec> layers;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

/// Raised when a layer's inputs do not fit together.
class ShapeError : public std::runtime_error {
 public:
  ShapeError(int layer, const std::string& what)
      : std::runtime_error("layer " + std::to_string(layer) + ": " + what),
        layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Output shape of every layer, indexed by layer id.
std::vector<FeatureShape> propagate_shapes(const ArchSpec& arch);

/// Shape entering a layer: its single producer's output, the network input,
/// or (for concat) the channel sum of its producers.
FeatureShape input_shape_of(const ArchSpec& arch,
                            const std::vector<FeatureShape>& shapes, int layer);

struct FlopsReport {
  struct Entry {
    int layer = 0;
    std::int64_t flops = 0;
  };
  std::vector<Entry> per_layer;
  std::int64_t total = 0;
};

/// Multiply-accumulate count of one forward pass over a single input.
FlopsReport count_flops(const ArchSpec& arch);

/// Number of conv and fully connected layers.
int weight_layer_count(const ArchSpec& arch);

struct PresetOptions {
  int num_classes = 10;
  /// Overrides the preset's input height and width when positive.
  int image_size = 0;
  /// DenseNet growth rate and stem width; zero keeps the preset default.
  int growth_rate = 0;
  int initial_width = 0;
  /// DenseNet transition output fraction.
  double compression = 1.0;
};

std::vector<std::string> preset_names();
ArchSpec build_preset(std::string_view name, const PresetOptions& options = {});

// Line-oriented text document, one record per layer.
void write_arch(std::ostream& os, const ArchSpec& arch);
ArchSpec read_arch(std::istream& is);
std::string arch_to_string(const ArchSpec& arch);
ArchSpec arch_from_string(std::string_view text);
void save_arch(const std::string& path, const ArchSpec& arch);
ArchSpec load_arch(const std::string& path);

}  // namespace esprune

#endif  // ESPRUNE_ARCH_HPP_
