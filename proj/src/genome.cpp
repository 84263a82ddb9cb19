#include "esprune/genome.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "text_format.hpp"

namespace esprune {

namespace {

bool is_pointwise(LayerKind kind) {
  return kind == LayerKind::batch_norm || kind == LayerKind::relu;
}

// Walks upstream through batch_norm/relu layers. Returns -1 at the input.
int skip_pointwise(const ArchSpec& arch, int id) {
  while (id >= 0 && is_pointwise(arch.layers[id].kind)) {
    const auto& inputs = arch.layers[id].inputs;
    id = inputs.empty() ? -1 : inputs.front();
  }
  return id;
}

bool is_conv(const ArchSpec& arch, int id) {
  return id >= 0 && arch.layers[id].kind == LayerKind::conv;
}

std::string layer_label(const ArchSpec& arch, int id) {
  return std::to_string(id) + " (" + arch.layers[id].name + ")";
}

void append_segment(GenomeLayout& layout, int string_index, int length,
                    std::vector<int> targets) {
  Segment s;
  const auto in_string = std::count_if(layout.segments.begin(), layout.segments.end(),
                                       [&](const Segment& x) { return x.string_index == string_index; });
  s.id = std::string(1, static_cast<char>('A' + string_index)) + std::to_string(in_string);
  s.string_index = string_index;
  s.offset = layout.total_bits;
  s.length = length;
  std::sort(targets.begin(), targets.end());
  s.targets = std::move(targets);
  layout.total_bits += length;
  layout.segments.push_back(std::move(s));
}

void require_covered(const ArchSpec& arch, const std::set<int>& encoded,
                     const std::set<int>& fixed) {
  for (int id = 0; id < static_cast<int>(arch.layers.size()); ++id) {
    if (is_conv(arch, id) && !encoded.count(id) && !fixed.count(id)) {
      throw GenomeError("conv layer " + layer_label(arch, id) +
                        " does not belong to a recognised block");
    }
  }
}

GenomeLayout cnn_layout(const ArchSpec& arch) {
  GenomeLayout layout;
  layout.family = Family::cnn;
  layout.string_count = 1;
  for (int id = 0; id < static_cast<int>(arch.layers.size()); ++id) {
    if (is_conv(arch, id)) append_segment(layout, 0, arch.layers[id].filters, {id});
  }
  return layout;
}

GenomeLayout resnet_layout(const ArchSpec& arch) {
  struct Block {
    int first;
    int second;
  };
  std::vector<Block> blocks;
  std::vector<std::vector<int>> stage_targets;
  std::vector<int> stage_of(arch.layers.size(), -1);
  std::set<int> encoded;
  int stem = -1;

  for (int id = 0; id < static_cast<int>(arch.layers.size()); ++id) {
    const LayerSpec& layer = arch.layers[id];
    if (layer.kind != LayerKind::residual_add) continue;
    if (layer.inputs.size() != 2) {
      throw GenomeError("residual_add " + layer_label(arch, id) + " must have two inputs");
    }
    const int second = skip_pointwise(arch, layer.inputs[0]);
    if (!is_conv(arch, second) || arch.layers[second].inputs.empty()) {
      throw GenomeError("residual_add " + layer_label(arch, id) +
                        " main path does not end in a conv");
    }
    const int first = skip_pointwise(arch, arch.layers[second].inputs.front());
    if (!is_conv(arch, first)) {
      throw GenomeError("residual block ending at " + layer_label(arch, id) +
                        " does not have two convs");
    }
    const int side = skip_pointwise(arch, layer.inputs[1]);
    int stage = -1;
    if (side >= 0 && arch.layers[side].kind == LayerKind::residual_add) {
      stage = stage_of[side];
    } else if (side >= 0 && arch.layers[side].kind == LayerKind::shortcut) {
      stage = static_cast<int>(stage_targets.size());
      stage_targets.push_back({side});
    } else if (is_conv(arch, side) && stem < 0 && stage_targets.empty()) {
      stem = side;
      stage = 0;
      stage_targets.push_back({side});
    }
    if (stage < 0) {
      throw GenomeError("cannot trace the identity path of " + layer_label(arch, id));
    }
    stage_of[id] = stage;
    blocks.push_back({first, second});
    stage_targets[stage].push_back(second);
    encoded.insert(first);
    encoded.insert(second);
  }
  if (blocks.empty()) throw GenomeError("resnet architecture has no residual blocks");

  GenomeLayout layout;
  layout.family = Family::resnet;
  layout.string_count = 2;
  std::sort(blocks.begin(), blocks.end(),
            [](const Block& a, const Block& b) { return a.first < b.first; });
  for (const Block& b : blocks) append_segment(layout, 0, arch.layers[b.first].filters, {b.first});
  for (auto& targets : stage_targets) {
    const int width = arch.layers[targets.back()].filters;
    for (int t : targets) {
      if (arch.layers[t].filters != width) {
        throw GenomeError("layer " + layer_label(arch, t) + " has " +
                          std::to_string(arch.layers[t].filters) +
                          " channels but its stage is " + std::to_string(width) + " wide");
      }
    }
    append_segment(layout, 1, width, targets);
  }
  std::set<int> fixed;
  if (stem >= 0) fixed.insert(stem);
  require_covered(arch, encoded, fixed);
  return layout;
}

GenomeLayout densenet_layout(const ArchSpec& arch) {
  std::vector<int> bottlenecks;
  std::vector<int> convs;
  for (int id = 0; id < static_cast<int>(arch.layers.size()); ++id) {
    const LayerSpec& layer = arch.layers[id];
    if (layer.kind != LayerKind::concat) continue;
    if (layer.inputs.size() != 2) {
      throw GenomeError("concat " + layer_label(arch, id) + " must have two inputs");
    }
    const int conv = layer.inputs.back();
    if (!is_conv(arch, conv) || arch.layers[conv].inputs.empty()) {
      throw GenomeError("concat " + layer_label(arch, id) + " does not take a conv output");
    }
    const int bottleneck = skip_pointwise(arch, arch.layers[conv].inputs.front());
    if (!is_conv(arch, bottleneck)) {
      throw GenomeError("dense layer " + layer_label(arch, conv) + " has no bottleneck conv");
    }
    bottlenecks.push_back(bottleneck);
    convs.push_back(conv);
  }
  if (convs.empty()) throw GenomeError("densenet architecture has no dense layers");
  GenomeLayout layout;
  layout.family = Family::densenet;
  layout.string_count = 2;
  for (int id : bottlenecks) append_segment(layout, 0, arch.layers[id].filters, {id});
  for (int id : convs) append_segment(layout, 1, arch.layers[id].filters, {id});
  return layout;
}

std::vector<int> all_channels(int count) {
  std::vector<int> out(count);
  std::iota(out.begin(), out.end(), 0);
  return out;
}

// Surviving channels entering a layer, as indices into its base input.
std::vector<int> input_kept(const ArchSpec& base, const std::vector<FeatureShape>& shapes,
                            const PruningPlan& plan, int id) {
  const LayerSpec& layer = base.layers[id];
  if (layer.inputs.empty()) return all_channels(base.input.channels);
  if (layer.kind != LayerKind::concat) return plan.kept[layer.inputs.front()];
  std::vector<int> out;
  int offset = 0;
  for (int producer : layer.inputs) {
    for (int c : plan.kept[producer]) out.push_back(c + offset);
    offset += shapes[producer].channels;
  }
  return out;
}

}  // namespace

GenomeLayout layout_for(const ArchSpec& arch) {
  propagate_shapes(arch);
  switch (arch.family) {
    case Family::cnn:
      return cnn_layout(arch);
    case Family::resnet:
      return resnet_layout(arch);
    case Family::densenet:
      return densenet_layout(arch);
  }
  throw GenomeError("unsupported architecture family");
}

Genome::Genome(std::shared_ptr<const GenomeLayout> layout, std::vector<bool> bits)
    : layout_(std::move(layout)), bits_(std::move(bits)) {
  if (!layout_) throw GenomeError("genome needs a layout");
  if (static_cast<int>(bits_.size()) != layout_->total_bits) {
    throw GenomeError("genome has " + std::to_string(bits_.size()) + " bits, layout needs " +
                      std::to_string(layout_->total_bits));
  }
  for (const Segment& s : layout_->segments) {
    if (count_set(s) == 0) throw GenomeError("segment " + s.id + " has no set bit");
  }
}

Genome Genome::all_ones(std::shared_ptr<const GenomeLayout> layout) {
  const int bits = layout->total_bits;
  return Genome(std::move(layout), std::vector<bool>(bits, true));
}

int Genome::count_set() const {
  return static_cast<int>(std::count(bits_.begin(), bits_.end(), true));
}

int Genome::count_set(const Segment& segment) const {
  return static_cast<int>(std::count(bits_.begin() + segment.offset,
                                     bits_.begin() + segment.offset + segment.length, true));
}

std::vector<int> Genome::kept(const Segment& segment) const {
  std::vector<int> out;
  for (int i = 0; i < segment.length; ++i) {
    if (bits_[segment.offset + i]) out.push_back(i);
  }
  return out;
}

std::string Genome::string_text(int string_index) const {
  std::string out;
  for (const Segment& s : layout_->segments) {
    if (s.string_index != string_index) continue;
    for (int i = 0; i < s.length; ++i) out += bits_[s.offset + i] ? '1' : '0';
  }
  return out;
}

int hamming_distance(const Genome& a, const Genome& b) {
  if (a.bits().size() != b.bits().size()) throw GenomeError("genome lengths differ");
  int d = 0;
  for (std::size_t i = 0; i < a.bits().size(); ++i) d += a.bits()[i] != b.bits()[i];
  return d;
}

PruningPlan plan_pruning(const Genome& genome, const ArchSpec& base) {
  if (!(genome.layout() == layout_for(base))) {
    throw GenomeError("genome layout does not match the architecture");
  }
  const auto shapes = propagate_shapes(base);
  const int count = static_cast<int>(base.layers.size());
  std::vector<const Segment*> governing(count, nullptr);
  for (const Segment& s : genome.layout().segments) {
    for (int t : s.targets) governing[t] = &s;
  }

  PruningPlan plan;
  plan.kept.resize(count);
  for (int id = 0; id < count; ++id) {
    const LayerSpec& layer = base.layers[id];
    if (const Segment* s = governing[id]) {
      if (s->length != shapes[id].channels) {
        throw GenomeError("segment " + s->id + " does not match layer " + std::to_string(id));
      }
      plan.kept[id] = genome.kept(*s);
      continue;
    }
    switch (layer.kind) {
      case LayerKind::conv:
      case LayerKind::fully_connected:
      case LayerKind::shortcut:
        plan.kept[id] = all_channels(shapes[id].channels);
        break;
      case LayerKind::residual_add:
        plan.kept[id] = plan.kept[layer.inputs.front()];
        for (int producer : layer.inputs) {
          if (plan.kept[producer] != plan.kept[id]) {
            throw GenomeError("residual_add " + std::to_string(id) +
                              " inputs keep different channels");
          }
        }
        break;
      default:
        plan.kept[id] = input_kept(base, shapes, plan, id);
        break;
    }
  }
  return plan;
}

ArchSpec decode(const Genome& genome, const ArchSpec& base) {
  const PruningPlan plan = plan_pruning(genome, base);
  const auto shapes = propagate_shapes(base);
  ArchSpec out = base;
  for (int id = 0; id < static_cast<int>(out.layers.size()); ++id) {
    LayerSpec& layer = out.layers[id];
    const auto& kept = plan.kept[id];
    if (layer.kind == LayerKind::conv || layer.kind == LayerKind::fully_connected) {
      layer.filters = static_cast<int>(kept.size());
    } else if (layer.kind == LayerKind::shortcut) {
      const auto in = input_kept(base, shapes, plan, id);
      const auto& base_map = base.layers[id].channel_map;
      layer.channel_map.clear();
      for (int c : in) {
        const int target = base_map[c];
        const auto it = std::lower_bound(kept.begin(), kept.end(), target);
        const bool survives = target >= 0 && it != kept.end() && *it == target;
        layer.channel_map.push_back(survives ? static_cast<int>(it - kept.begin()) : -1);
      }
      layer.filters = static_cast<int>(kept.size());
    }
  }
  propagate_shapes(out);
  return out;
}

template <typename Scalar>
Model<Scalar> transfer_weights(const Model<Scalar>& base, const Genome& genome) {
  try {
    check_params(base);
  } catch (const ShapeError& e) {
    throw GenomeError(std::string("base weights do not match their architecture: ") + e.what());
  }
  const PruningPlan plan = plan_pruning(genome, base.arch);
  const auto shapes = propagate_shapes(base.arch);
  Model<Scalar> out{decode(genome, base.arch), {}};
  out.params.resize(base.params.size());
  for (int id = 0; id < static_cast<int>(base.arch.layers.size()); ++id) {
    const LayerSpec& layer = base.arch.layers[id];
    const LayerParams<Scalar>& src = base.params[id];
    LayerParams<Scalar>& dst = out.params[id];
    const auto& kept_out = plan.kept[id];
    const int n_out = static_cast<int>(kept_out.size());
    if (layer.kind == LayerKind::conv) {
      const auto kept_in = input_kept(base.arch, shapes, plan, id);
      const int n_in = static_cast<int>(kept_in.size());
      const int base_in = src.weight.dim(1);
      const int window = layer.kernel_h * layer.kernel_w;
      dst.weight = Tensor<Scalar>({n_out, n_in, layer.kernel_h, layer.kernel_w});
      for (int o = 0; o < n_out; ++o) {
        for (int i = 0; i < n_in; ++i) {
          const Scalar* from = src.weight.data() +
                               (std::int64_t{kept_out[o]} * base_in + kept_in[i]) * window;
          std::copy_n(from, window, dst.weight.data() + (std::int64_t{o} * n_in + i) * window);
        }
      }
    } else if (layer.kind == LayerKind::fully_connected) {
      const auto kept_in = input_kept(base.arch, shapes, plan, id);
      const FeatureShape in = input_shape_of(base.arch, shapes, id);
      const std::int64_t plane = std::int64_t{in.height} * in.width;
      const std::int64_t n_features = static_cast<std::int64_t>(kept_in.size()) * plane;
      dst.weight = Tensor<Scalar>({n_out, static_cast<int>(n_features)});
      const auto from = src.weight.matrix(src.weight.dim(0), src.weight.dim(1));
      auto to = dst.weight.matrix(n_out, n_features);
      for (int o = 0; o < n_out; ++o) {
        for (std::size_t i = 0; i < kept_in.size(); ++i) {
          to.row(o).segment(i * plane, plane) =
              from.row(kept_out[o]).segment(kept_in[i] * plane, plane);
        }
      }
    } else if (layer.kind == LayerKind::batch_norm) {
      dst.weight = Tensor<Scalar>({n_out});
      for (int o = 0; o < n_out; ++o) dst.weight[o] = src.weight[kept_out[o]];
    }
    if (!src.bias.empty()) {
      dst.bias = Tensor<Scalar>({n_out});
      for (int o = 0; o < n_out; ++o) dst.bias[o] = src.bias[kept_out[o]];
    }
  }
  return out;
}

template Model<float> transfer_weights(const Model<float>&, const Genome&);
template Model<double> transfer_weights(const Model<double>&, const Genome&);

Genome mutate(const Genome& genome, double p_m, Rng& rng, MutationStats* stats) {
  if (!(p_m >= 0.0 && p_m <= 1.0)) {
    throw std::invalid_argument("mutation probability must lie in [0, 1]");
  }
  std::vector<bool> bits = genome.bits();
  MutationStats local;
  std::bernoulli_distribution flip(p_m);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (flip(rng)) {
      bits[i] = !bits[i];
      ++local.flips;
    }
  }
  for (const Segment& s : genome.layout().segments) {
    const auto first = bits.begin() + s.offset;
    if (std::find(first, first + s.length, true) == first + s.length) {
      std::uniform_int_distribution<int> pick(0, s.length - 1);
      bits[s.offset + pick(rng)] = true;
      ++local.repairs;
    }
  }
  if (stats) *stats = local;
  return Genome(genome.layout_ptr(), std::move(bits));
}

void write_genome(std::ostream& os, const Genome& genome) {
  const GenomeLayout& layout = genome.layout();
  os << "esprune-genome 1\n";
  os << "family " << to_string(layout.family) << '\n';
  os << "strings " << layout.string_count << '\n';
  os << "total_bits " << layout.total_bits << '\n';
  os << "segments " << layout.segments.size() << '\n';
  for (const Segment& s : layout.segments) {
    std::string bits;
    for (int i = 0; i < s.length; ++i) bits += genome[s.offset + i] ? '1' : '0';
    os << "segment " << s.id << " string=" << s.string_index << " offset=" << s.offset
       << " length=" << s.length << " targets=" << text::join_ints(s.targets)
       << " bits=" << bits << '\n';
  }
}

Genome read_genome(std::istream& is) {
  using namespace text;
  auto layout = std::make_shared<GenomeLayout>();
  int version = 0;
  if (!(expect_record(is, "esprune-genome") >> version) || version != 1) {
    throw FormatError("unsupported genome document version");
  }
  {
    std::string family;
    expect_record(is, "family") >> family;
    layout->family = family_from_string(family);
  }
  const auto read_int = [&](std::string_view key) {
    int value = 0;
    if (!(expect_record(is, key) >> value)) throw FormatError("bad " + std::string(key));
    return value;
  };
  layout->string_count = read_int("strings");
  layout->total_bits = read_int("total_bits");
  const int count = read_int("segments");
  if (layout->string_count < 1 || layout->string_count > 2 || layout->total_bits < 0 ||
      count < 0) {
    throw FormatError("bad genome header");
  }
  std::vector<bool> bits;
  for (int k = 0; k < count; ++k) {
    auto rec = expect_record(is, "segment");
    Segment s;
    std::string token;
    const auto next = [&](std::string_view key) {
      if (!(rec >> token)) throw FormatError("segment record missing '" + std::string(key) + "'");
      return field_value(token, key);
    };
    if (!(rec >> s.id)) throw FormatError("segment record missing id");
    s.string_index = parse_int(next("string"), "string");
    s.offset = parse_int(next("offset"), "offset");
    s.length = parse_int(next("length"), "length");
    s.targets = split_ints(next("targets"), "targets");
    const std::string_view text = next("bits");
    if (s.offset != static_cast<int>(bits.size()) || s.length < 1 ||
        static_cast<int>(text.size()) != s.length || s.string_index < 0 ||
        s.string_index >= layout->string_count ||
        (!layout->segments.empty() && s.string_index < layout->segments.back().string_index)) {
      throw FormatError("segment " + s.id + " does not continue the bit layout");
    }
    for (char ch : text) {
      if (ch != '0' && ch != '1') throw FormatError("segment " + s.id + " has non-binary bits");
      bits.push_back(ch == '1');
    }
    layout->segments.push_back(std::move(s));
  }
  if (static_cast<int>(bits.size()) != layout->total_bits) {
    throw FormatError("segments cover " + std::to_string(bits.size()) + " of " +
                      std::to_string(layout->total_bits) + " bits");
  }
  return Genome(std::move(layout), std::move(bits));
}

std::string genome_to_string(const Genome& genome) {
  std::ostringstream os;
  write_genome(os, genome);
  return os.str();
}

Genome genome_from_string(const std::string& text) {
  std::istringstream is(text);
  return read_genome(is);
}

}  // namespace esprune
