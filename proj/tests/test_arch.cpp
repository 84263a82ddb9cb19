#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "esprune/arch.hpp"
#include "esprune/genome.hpp"

using namespace esprune;

namespace {

ArchSpec single_conv(FeatureShape input, int filters, int kernel, int stride, int padding) {
  ArchSpec a;
  a.family = Family::cnn;
  a.input = input;
  a.num_classes = filters;
  LayerSpec conv;
  conv.kind = LayerKind::conv;
  conv.name = "conv";
  conv.filters = filters;
  conv.kernel_h = conv.kernel_w = kernel;
  conv.stride = stride;
  conv.padding = padding;
  a.layers.push_back(conv);
  return a;
}

int count_kind(const ArchSpec& a, LayerKind kind) {
  return static_cast<int>(std::count_if(a.layers.begin(), a.layers.end(),
                                        [&](const LayerSpec& l) { return l.kind == kind; }));
}

}  // namespace

TEST_CASE("padded 3x3 conv keeps spatial size") {
  const auto shapes = propagate_shapes(single_conv({3, 32, 32}, 8, 3, 1, 1));
  CHECK(shapes.back() == FeatureShape{8, 32, 32});
}

TEST_CASE("strided conv output follows the window formula") {
  // (32 + 2 - 3) / 2 + 1 = 16
  CHECK(propagate_shapes(single_conv({3, 32, 32}, 4, 3, 2, 1)).back() == FeatureShape{4, 16, 16});
  // (7 - 3) / 2 + 1 = 3
  CHECK(propagate_shapes(single_conv({1, 7, 7}, 2, 3, 2, 0)).back() == FeatureShape{2, 3, 3});
}

TEST_CASE("vgg16 preset: 13 convs, FC head, feature map 512x1x1 before the head") {
  const ArchSpec vgg = build_preset("vgg16");
  CHECK(vgg.input == FeatureShape{3, 32, 32});
  CHECK(count_kind(vgg, LayerKind::conv) == 13);
  CHECK(count_kind(vgg, LayerKind::fully_connected) == 3);
  CHECK(weight_layer_count(vgg) == 16);
  const auto shapes = propagate_shapes(vgg);
  const auto fc = std::find_if(vgg.layers.begin(), vgg.layers.end(), [](const LayerSpec& l) {
    return l.kind == LayerKind::fully_connected;
  });
  REQUIRE(fc != vgg.layers.end());
  // Five 2x2 pools halve 32 down to 1.
  CHECK(shapes[fc->inputs.at(0)] == FeatureShape{512, 1, 1});
}

TEST_CASE("resnet56 preset: 27 residual blocks in stages of width 16, 32, 64") {
  const ArchSpec r = build_preset("resnet56");
  CHECK(r.blocks_per_stage == std::vector<int>{9, 9, 9});
  CHECK(count_kind(r, LayerKind::residual_add) == 27);
  CHECK(weight_layer_count(r) == 56);
  const auto shapes = propagate_shapes(r);
  std::vector<int> widths;
  for (std::size_t id = 0; id < r.layers.size(); ++id) {
    if (r.layers[id].kind != LayerKind::residual_add) continue;
    if (widths.empty() || widths.back() != shapes[id].channels) {
      widths.push_back(shapes[id].channels);
    }
  }
  CHECK(widths == std::vector<int>{16, 32, 64});
}

TEST_CASE("presets match the published layer counts") {
  const std::vector<std::pair<std::string, int>> expected = {
      {"vgg16", 16}, {"vgg19", 19}, {"resnet56", 56},
      {"resnet110", 110}, {"densenet50", 50}, {"densenet100", 100}};
  for (const auto& [name, layers] : expected) {
    CAPTURE(name);
    CHECK(weight_layer_count(build_preset(name)) == layers);
  }
}

TEST_CASE("tiny_cnn has four conv layers") {
  CHECK(count_kind(build_preset("tiny_cnn"), LayerKind::conv) == 4);
}

TEST_CASE("unknown preset is rejected") {
  CHECK_THROWS_AS(build_preset("alexnet"), FormatError);
}

TEST_CASE("every preset propagates and its FC head matches the flattened feature map") {
  for (const auto& name : preset_names()) {
    CAPTURE(name);
    const ArchSpec a = build_preset(name);
    const auto shapes = propagate_shapes(a);
    REQUIRE(shapes.size() == a.layers.size());
    for (std::size_t id = 0; id < a.layers.size(); ++id) {
      if (a.layers[id].kind != LayerKind::fully_connected) continue;
      const auto& producer = shapes[a.layers[id].inputs.at(0)];
      CHECK(input_shape_of(a, shapes, static_cast<int>(id)).size() == producer.size());
      break;
    }
    CHECK(shapes.back() == FeatureShape{a.num_classes, 1, 1});
  }
}

TEST_CASE("dense block layer i sees k0 + k * (i - 1) channels") {
  for (const char* name : {"densenet50", "densenet100", "tiny_densenet"}) {
    CAPTURE(name);
    const ArchSpec a = build_preset(name);
    const auto shapes = propagate_shapes(a);
    const GenomeLayout layout = layout_for(a);
    // Bottleneck convs of the first block, in order: their batch-norm input
    // is the block's running concatenation.
    const int first_block = a.blocks_per_stage.at(0);
    for (int i = 1; i <= first_block; ++i) {
      const Segment& seg = layout.segments.at(i - 1);
      REQUIRE(seg.string_index == 0);
      const int bottleneck = seg.targets.at(0);
      // bottleneck <- relu <- batch_norm <- stream
      const int bn = a.layers[a.layers[bottleneck].inputs[0]].inputs[0];
      const FeatureShape in = input_shape_of(a, shapes, bn);
      CHECK(in.channels == a.initial_width + a.growth_rate * (i - 1));
    }
  }
}

TEST_CASE("residual_add with mismatched inputs reports the layer and both shapes") {
  ArchSpec a = single_conv({3, 8, 8}, 4, 3, 1, 1);
  LayerSpec down = a.layers[0];
  down.name = "down";
  down.stride = 2;
  a.layers.push_back(down);
  LayerSpec add;
  add.kind = LayerKind::residual_add;
  add.name = "add";
  add.inputs = {0, 1};
  a.layers.push_back(add);
  try {
    propagate_shapes(a);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(e.layer() == 2);
    const std::string what = e.what();
    CHECK(what.find("(4,8,8)") != std::string::npos);
    CHECK(what.find("(4,4,4)") != std::string::npos);
  }
}

TEST_CASE("structural errors are rejected") {
  SUBCASE("forward reference") {
    ArchSpec a = single_conv({3, 8, 8}, 4, 3, 1, 1);
    a.layers[0].inputs = {0};
    CHECK_THROWS_AS(propagate_shapes(a), ShapeError);
  }
  SUBCASE("zero filters") {
    CHECK_THROWS_AS(propagate_shapes(single_conv({3, 8, 8}, 0, 3, 1, 1)), ShapeError);
  }
  SUBCASE("kernel larger than the padded input") {
    CHECK_THROWS_AS(propagate_shapes(single_conv({3, 2, 2}, 4, 5, 1, 0)), ShapeError);
  }
  SUBCASE("concat with different spatial sizes") {
    ArchSpec a = single_conv({3, 8, 8}, 4, 3, 1, 1);
    LayerSpec down = a.layers[0];
    down.stride = 2;
    a.layers.push_back(down);
    LayerSpec cat;
    cat.kind = LayerKind::concat;
    cat.inputs = {0, 1};
    a.layers.push_back(cat);
    CHECK_THROWS_AS(propagate_shapes(a), ShapeError);
  }
}

TEST_CASE("concat sums channels") {
  ArchSpec a = single_conv({3, 8, 8}, 4, 3, 1, 1);
  LayerSpec second = a.layers[0];
  second.filters = 6;
  a.layers.push_back(second);
  LayerSpec cat;
  cat.kind = LayerKind::concat;
  cat.inputs = {0, 1};
  a.layers.push_back(cat);
  CHECK(propagate_shapes(a).back() == FeatureShape{10, 8, 8});
}

TEST_CASE("unit conv costs one FLOP") {
  const FlopsReport r = count_flops(single_conv({1, 1, 1}, 1, 1, 1, 0));
  CHECK(r.total == 1);
}

TEST_CASE("conv and FC costs follow the multiply-accumulate formula") {
  ArchSpec a = single_conv({3, 8, 8}, 4, 3, 1, 1);
  LayerSpec fc;
  fc.kind = LayerKind::fully_connected;
  fc.filters = 5;
  fc.inputs = {0};
  a.layers.push_back(fc);
  const FlopsReport r = count_flops(a);
  REQUIRE(r.per_layer.size() == 2);
  CHECK(r.per_layer[0].flops == 3 * 3 * 3 * 4 * 8 * 8);
  CHECK(r.per_layer[1].flops == 4 * 8 * 8 * 5);
}

TEST_CASE("FLOPs of the full-size presets") {
  const std::vector<std::tuple<std::string, double, double>> table = {
      {"vgg16", 3.15e8, 0.05},    {"vgg19", 4.01e8, 0.05},
      {"resnet56", 1.27e8, 0.05}, {"resnet110", 2.57e8, 0.05},
      {"densenet50", 0.93e8, 0.10}, {"densenet100", 3.05e8, 0.10}};
  for (const auto& [name, reference, tolerance] : table) {
    CAPTURE(name);
    const double total = static_cast<double>(count_flops(build_preset(name)).total);
    CHECK(std::abs(total - reference) / reference <= tolerance);
  }
}

TEST_CASE("FLOPs total is the order-independent sum of per-layer entries") {
  for (const auto& name : preset_names()) {
    CAPTURE(name);
    const FlopsReport r = count_flops(build_preset(name));
    std::int64_t forward = 0, backward = 0;
    for (const auto& e : r.per_layer) forward += e.flops;
    for (auto it = r.per_layer.rbegin(); it != r.per_layer.rend(); ++it) backward += it->flops;
    CHECK(r.total == forward);
    CHECK(r.total == backward);
    CHECK(count_flops(build_preset(name)).total == r.total);
  }
}

TEST_CASE("removing a filter from any conv strictly lowers FLOPs") {
  for (const char* name : {"tiny_cnn", "tiny_resnet", "tiny_densenet", "vgg16"}) {
    CAPTURE(name);
    const ArchSpec base = build_preset(name);
    const std::int64_t total = count_flops(base).total;
    int checked = 0;
    for (std::size_t id = 0; id < base.layers.size(); ++id) {
      if (base.layers[id].kind != LayerKind::conv || base.layers[id].filters < 2) continue;
      ArchSpec smaller = base;
      --smaller.layers[id].filters;
      try {
        propagate_shapes(smaller);
      } catch (const ShapeError&) {
        continue;  // residual second layers change only together with their stage
      }
      CHECK(count_flops(smaller).total < total);
      ++checked;
    }
    CHECK(checked > 0);
  }
}

TEST_CASE("architecture documents round-trip exactly") {
  for (const auto& name : preset_names()) {
    CAPTURE(name);
    const ArchSpec a = build_preset(name);
    const std::string text = arch_to_string(a);
    const ArchSpec back = arch_from_string(text);
    CHECK(back == a);
    CHECK(arch_to_string(back) == text);
  }
}

TEST_CASE("preset options change class count, image size and growth") {
  PresetOptions o;
  o.num_classes = 100;
  o.image_size = 16;
  const ArchSpec a = build_preset("tiny_cnn", o);
  CHECK(a.num_classes == 100);
  CHECK(a.input == FeatureShape{3, 16, 16});
  CHECK(propagate_shapes(a).back() == FeatureShape{100, 1, 1});

  PresetOptions d;
  d.growth_rate = 6;
  d.compression = 0.5;
  const ArchSpec dn = build_preset("tiny_densenet", d);
  CHECK(dn.growth_rate == 6);
  CHECK_NOTHROW(propagate_shapes(dn));
}

TEST_CASE("malformed architecture documents are rejected") {
  const std::string good = arch_to_string(build_preset("tiny_cnn"));
  SUBCASE("bad header") { CHECK_THROWS_AS(arch_from_string("not-an-arch 1\n"), FormatError); }
  SUBCASE("unknown kind") {
    std::string text = good;
    text.replace(text.find(" conv "), 6, " convolution ");
    CHECK_THROWS_AS(arch_from_string(text), FormatError);
  }
  SUBCASE("truncated") {
    CHECK_THROWS_AS(arch_from_string(good.substr(0, good.size() / 2)), FormatError);
  }
  SUBCASE("comments and blank lines are ignored") {
    CHECK(arch_from_string("# header\n\n" + good) == build_preset("tiny_cnn"));
  }
}
