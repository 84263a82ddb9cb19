#include <doctest.h>

#include <map>
#include <numeric>
#include <sstream>

#include "esprune/genome.hpp"
#include "reference.hpp"
#include "support.hpp"

using namespace esprune;
using support::shared_layout;

namespace {

ArchSpec two_conv_cnn(int a, int b) {
  ArchSpec arch;
  arch.family = Family::cnn;
  arch.input = {3, 8, 8};
  arch.num_classes = 4;
  LayerSpec c1;
  c1.kind = LayerKind::conv;
  c1.name = "c1";
  c1.filters = a;
  c1.kernel_h = c1.kernel_w = 3;
  c1.padding = 1;
  LayerSpec c2 = c1;
  c2.name = "c2";
  c2.filters = b;
  c2.inputs = {0};
  LayerSpec gap;
  gap.kind = LayerKind::global_pool;
  gap.inputs = {1};
  LayerSpec fc;
  fc.kind = LayerKind::fully_connected;
  fc.filters = 4;
  fc.bias = true;
  fc.inputs = {2};
  arch.layers = {c1, c2, gap, fc};
  return arch;
}

std::vector<bool> bits_with(const Genome& g, const Segment& seg, std::vector<int> cleared) {
  std::vector<bool> bits = g.bits();
  for (int b : cleared) bits[seg.offset + b] = false;
  return bits;
}

}  // namespace

TEST_CASE("two conv layers of 32 and 64 filters need 96 bits in one string") {
  const GenomeLayout layout = layout_for(two_conv_cnn(32, 64));
  CHECK(layout.string_count == 1);
  CHECK(layout.total_bits == 96);
  REQUIRE(layout.segments.size() == 2);
  CHECK(layout.segments[0].length == 32);
  CHECK(layout.segments[1].length == 64);
}

TEST_CASE("resnet56 string B has three tied stage segments of 112 bits in total") {
  const ArchSpec r = build_preset("resnet56");
  const GenomeLayout layout = layout_for(r);
  CHECK(layout.string_count == 2);
  std::vector<Segment> b;
  std::vector<Segment> a;
  for (const auto& s : layout.segments) (s.string_index == 1 ? b : a).push_back(s);
  REQUIRE(b.size() == 3);
  CHECK(b[0].length + b[1].length + b[2].length == 112);
  CHECK(b[0].length == 16);
  CHECK(b[1].length == 32);
  CHECK(b[2].length == 64);
  for (const auto& s : b) CHECK(s.tied());
  CHECK(a.size() == 27);
  // Stage 1 governs the stem plus nine second layers; later stages govern
  // nine second layers plus the downsampling shortcut.
  CHECK(b[0].targets.size() == 10);
  CHECK(r.layers[b[0].targets[0]].name == "stem");
  CHECK(b[1].targets.size() == 10);
  const int shortcuts = static_cast<int>(std::count_if(
      b[1].targets.begin(), b[1].targets.end(),
      [&](int t) { return r.layers[t].kind == LayerKind::shortcut; }));
  CHECK(shortcuts == 1);
}

TEST_CASE("tiny_densenet has one string-A segment per bottleneck") {
  const ArchSpec d = build_preset("tiny_densenet");
  const GenomeLayout layout = layout_for(d);
  int a = 0, b = 0;
  for (const auto& s : layout.segments) {
    CHECK_FALSE(s.tied());
    const LayerSpec& target = d.layers[s.targets[0]];
    if (s.string_index == 0) {
      ++a;
      CHECK(target.kernel_h == 1);
      CHECK(s.length == 4 * d.growth_rate);
    } else {
      ++b;
      CHECK(target.kernel_h == 3);
      CHECK(s.length == d.growth_rate);
    }
  }
  CHECK(a == 3);
  CHECK(b == 3);
}

TEST_CASE("segments partition the bit range") {
  for (const auto& name : preset_names()) {
    CAPTURE(name);
    const GenomeLayout layout = layout_for(build_preset(name));
    int next = 0;
    int string_index = 0;
    for (const auto& s : layout.segments) {
      CHECK(s.offset == next);
      CHECK(s.length >= 1);
      CHECK(s.string_index >= string_index);
      string_index = s.string_index;
      next += s.length;
    }
    CHECK(next == layout.total_bits);
  }
}

TEST_CASE("the all-ones genome decodes to the base architecture") {
  for (const auto& name : preset_names()) {
    CAPTURE(name);
    const ArchSpec base = build_preset(name);
    const Genome g = Genome::all_ones(shared_layout(base));
    CHECK(decode(g, base) == base);
    CHECK(count_flops(decode(g, base)).total == count_flops(base).total);
  }
}

TEST_CASE("keeping half the bits of every cnn segment halves every conv") {
  const ArchSpec base = build_preset("tiny_cnn");
  const auto layout = shared_layout(base);
  std::vector<bool> bits(layout->total_bits);
  for (const auto& s : layout->segments) {
    for (int b = 0; b < s.length; b += 2) bits[s.offset + b] = true;
  }
  const ArchSpec pruned = decode(Genome(layout, bits), base);
  for (std::size_t id = 0; id < base.layers.size(); ++id) {
    if (base.layers[id].kind != LayerKind::conv) continue;
    CHECK(pruned.layers[id].filters * 2 == base.layers[id].filters);
  }
  CHECK_NOTHROW(propagate_shapes(pruned));
}

TEST_CASE("clearing four bits of a tied 16-bit segment drops every stage member to 12") {
  const ArchSpec base = build_preset("resnet56");
  const auto layout = shared_layout(base);
  const Genome ones = Genome::all_ones(layout);
  const Segment* stage1 = nullptr;
  for (const auto& s : layout->segments) {
    if (s.string_index == 1 && s.length == 16) stage1 = &s;
  }
  REQUIRE(stage1 != nullptr);
  const Genome g(layout, bits_with(ones, *stage1, {1, 5, 9, 13}));
  const ArchSpec pruned = decode(g, base);
  for (int target : stage1->targets) CHECK(pruned.layers[target].filters == 12);
  const auto shapes = propagate_shapes(pruned);
  for (std::size_t id = 0; id < pruned.layers.size(); ++id) {
    if (pruned.layers[id].kind == LayerKind::residual_add && base.layers[id].name.rfind("s1.", 0) == 0) {
      CHECK(shapes[id].channels == 12);
    }
  }
}

TEST_CASE("decoded FLOPs never exceed the base, with equality only for all ones") {
  support::Rng rng(7);
  for (const auto& name : preset_names()) {
    CAPTURE(name);
    const ArchSpec base = build_preset(name);
    const auto layout = shared_layout(base);
    const std::int64_t total = count_flops(base).total;
    for (int trial = 0; trial < 20; ++trial) {
      const Genome g = support::random_genome(layout, rng);
      const std::int64_t f = count_flops(decode(g, base)).total;
      CHECK(f <= total);
      CHECK((f == total) == (g.count_set() == layout->total_bits));
    }
  }
}

TEST_CASE("random genomes decode to shape-valid architectures") {
  support::Rng rng(11);
  for (const char* name : {"tiny_cnn", "tiny_resnet", "tiny_densenet", "resnet56", "densenet50"}) {
    CAPTURE(name);
    const ArchSpec base = build_preset(name);
    const auto layout = shared_layout(base);
    for (int trial = 0; trial < 50; ++trial) {
      const ArchSpec pruned = decode(support::random_genome(layout, rng), base);
      CHECK_NOTHROW(propagate_shapes(pruned));
    }
  }
}

TEST_CASE("a genome of the wrong layout is rejected") {
  const ArchSpec base = build_preset("tiny_cnn");
  const Genome other = Genome::all_ones(shared_layout(build_preset("tiny_resnet")));
  CHECK_THROWS_AS(decode(other, base), GenomeError);
}

TEST_CASE("genome construction enforces length and non-empty segments") {
  const auto layout = shared_layout(build_preset("tiny_cnn"));
  CHECK_THROWS_AS(Genome(layout, std::vector<bool>(layout->total_bits - 1, true)), GenomeError);
  std::vector<bool> bits(layout->total_bits, true);
  const Segment& s = layout->segments[1];
  for (int b = 0; b < s.length; ++b) bits[s.offset + b] = false;
  CHECK_THROWS_AS(Genome(layout, bits), GenomeError);
}

TEST_CASE("transfer of the all-ones genome copies every weight") {
  for (const char* name : {"tiny_cnn", "tiny_resnet", "tiny_densenet"}) {
    CAPTURE(name);
    const ArchSpec base = build_preset(name);
    const auto model = init_model<double>(base, 3);
    const auto copy = transfer_weights(model, Genome::all_ones(shared_layout(base)));
    CHECK(copy.arch == model.arch);
    CHECK(copy.params == model.params);
  }
}

TEST_CASE("removing one filter removes one input slice from the next layer") {
  const ArchSpec base = two_conv_cnn(5, 6);
  const auto model = init_model<double>(base, 9);
  const auto layout = shared_layout(base);
  const Genome g(layout, bits_with(Genome::all_ones(layout), layout->segments[0], {2}));
  const auto pruned = transfer_weights(model, g);
  const auto& w0 = model.params[0].weight;
  const auto& w1 = model.params[1].weight;
  const auto& p0 = pruned.params[0].weight;
  const auto& p1 = pruned.params[1].weight;
  CHECK(p0.shape() == Shape{4, 3, 3, 3});
  CHECK(p1.shape() == Shape{6, 4, 3, 3});
  const int kept[4] = {0, 1, 3, 4};
  for (int f = 0; f < 4; ++f)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) CHECK(p0.at(f, c, y, x) == w0.at(kept[f], c, y, x));
  for (int f = 0; f < 6; ++f)
    for (int c = 0; c < 4; ++c)
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) CHECK(p1.at(f, c, y, x) == w1.at(f, kept[c], y, x));
}

TEST_CASE("pruned models match the channel-excised base forward") {
  support::Rng rng(21);
  for (const char* name : {"tiny_cnn", "tiny_resnet", "tiny_densenet"}) {
    CAPTURE(name);
    const ArchSpec base = build_preset(name);
    const auto layout = shared_layout(base);
    const auto model = init_model<double>(base, 5);
    const auto x = reference::random_input(3, base.input, 17);
    for (int trial = 0; trial < 5; ++trial) {
      const Genome g = support::random_genome(layout, rng);
      bool consistent = false;
      const auto masks = reference::genome_masks(g, base, &consistent);
      CHECK(consistent);
      const auto expected = reference::forward_all(model, x, masks);
      const auto actual = forward_all(transfer_weights(model, g), reference::to_tensor(x));
      for (std::size_t id = 0; id < base.layers.size(); ++id) {
        CAPTURE(id);
        CHECK(reference::excised_difference(actual[id], expected[id], masks[id]) < 1e-8);
      }
    }
  }
}

TEST_CASE("mutation with probability 0 is the identity") {
  const auto layout = shared_layout(build_preset("tiny_resnet"));
  support::Rng rng(1);
  const Genome g = support::random_genome(layout, rng);
  MutationStats stats;
  CHECK(mutate(g, 0.0, rng, &stats) == g);
  CHECK(stats.flips == 0);
  CHECK(stats.repairs == 0);
}

TEST_CASE("mutation with probability 1 flips every bit then repairs emptied segments") {
  const auto layout = shared_layout(build_preset("tiny_cnn"));
  const Genome ones = Genome::all_ones(layout);
  support::Rng rng(2);
  MutationStats stats;
  const Genome m = mutate(ones, 1.0, rng, &stats);
  CHECK(stats.flips == layout->total_bits);
  CHECK(stats.repairs == static_cast<int>(layout->segments.size()));
  for (const auto& s : layout->segments) CHECK(m.count_set(s) == 1);

  // A segment that keeps some bits after flipping needs no repair.
  std::vector<bool> half(layout->total_bits);
  for (int i = 0; i < layout->total_bits; i += 2) half[i] = true;
  const Genome h(layout, half);
  MutationStats hs;
  const Genome flipped = mutate(h, 1.0, rng, &hs);
  CHECK(hs.repairs == 0);
  for (int i = 0; i < layout->total_bits; ++i) CHECK(flipped[i] != h[i]);
}

TEST_CASE("mean Hamming distance at p_m 0.1 over 1000 bits") {
  ArchSpec arch = two_conv_cnn(500, 500);
  const auto layout = shared_layout(arch);
  REQUIRE(layout->total_bits == 1000);
  const Genome ones = Genome::all_ones(layout);
  support::Rng rng(3);
  double sum = 0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) sum += hamming_distance(ones, mutate(ones, 0.1, rng));
  const double mean = sum / trials;
  CHECK(mean >= 95.0);
  CHECK(mean <= 105.0);
}

TEST_CASE("mutation is reproducible and repair never exceeds its budget") {
  const auto layout = shared_layout(build_preset("tiny_densenet"));
  support::Rng seeds(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::uint64_t seed = seeds();
    support::Rng a(seed), b(seed), pick(seed ^ 0x5555);
    const Genome g = support::random_genome(layout, pick);
    const double p = std::uniform_real_distribution<double>(0, 1)(pick);
    MutationStats stats;
    const Genome ma = mutate(g, p, a, &stats);
    CHECK(ma == mutate(g, p, b));
    CHECK(hamming_distance(g, ma) <= stats.flips + stats.repairs);
    for (const auto& s : layout->segments) CHECK(ma.count_set(s) >= 1);
  }
}

TEST_CASE("invalid mutation probability is rejected") {
  const auto layout = shared_layout(build_preset("tiny_cnn"));
  support::Rng rng(5);
  CHECK_THROWS_AS(mutate(Genome::all_ones(layout), 1.5, rng), std::invalid_argument);
  CHECK_THROWS_AS(mutate(Genome::all_ones(layout), -0.1, rng), std::invalid_argument);
}

TEST_CASE("genome documents round-trip exactly") {
  support::Rng rng(6);
  for (const char* name : {"tiny_cnn", "tiny_resnet", "tiny_densenet", "resnet56"}) {
    CAPTURE(name);
    const Genome g = support::random_genome(shared_layout(build_preset(name)), rng);
    const std::string text = genome_to_string(g);
    const Genome back = genome_from_string(text);
    CHECK(back == g);
    CHECK(genome_to_string(back) == text);
  }
}

TEST_CASE("corrupt genome documents are rejected") {
  const Genome g = Genome::all_ones(shared_layout(build_preset("tiny_cnn")));
  std::string text = genome_to_string(g);
  SUBCASE("an emptied segment") {
    const auto at = text.find("bits=");
    const auto end = text.find('\n', at);
    text.replace(at + 5, end - at - 5, std::string(end - at - 5, '0'));
    CHECK_THROWS(genome_from_string(text));
  }
  SUBCASE("a non-binary digit") {
    text[text.find("bits=") + 5] = '2';
    CHECK_THROWS(genome_from_string(text));
  }
}
