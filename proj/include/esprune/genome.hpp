#ifndef ESPRUNE_GENOME_HPP_
#define ESPRUNE_GENOME_HPP_

#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "esprune/arch.hpp"
#include "esprune/engine.hpp"
#include "esprune/random.hpp"

namespace esprune {

class GenomeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A run of bits selecting the output channels of its target layers.
/// Tied segments govern several layers with one shared filter subset.
struct Segment {
  std::string id;
  int string_index = 0;  // 0 = string A, 1 = string B
  int offset = 0;
  int length = 0;
  std::vector<int> targets;

  bool tied() const { return targets.size() > 1; }
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Bit layout of one architecture. Segments are stored string by string and
/// partition [0, total_bits).
///
///  - cnn: one string, one segment per conv layer.
///  - resnet: string A has one segment per block's first conv; string B has
///    one segment per stage shared by every block's second conv, the stem
///    (first stage) and the downsampling shortcut (later stages).
///  - densenet: string A has one segment per bottleneck conv, string B one
///    per 3x3 conv. Stem and transition convs are not encoded.
struct GenomeLayout {
  Family family = Family::cnn;
  int string_count = 1;
  int total_bits = 0;
  std::vector<Segment> segments;

  friend bool operator==(const GenomeLayout&, const GenomeLayout&) = default;
};

GenomeLayout layout_for(const ArchSpec& arch);

/// Bit vector over a layout. Every segment keeps at least one set bit.
class Genome {
 public:
  Genome(std::shared_ptr<const GenomeLayout> layout, std::vector<bool> bits);

  static Genome all_ones(std::shared_ptr<const GenomeLayout> layout);

  const GenomeLayout& layout() const { return *layout_; }
  const std::shared_ptr<const GenomeLayout>& layout_ptr() const { return layout_; }
  const std::vector<bool>& bits() const { return bits_; }
  bool operator[](int i) const { return bits_[i]; }

  int count_set() const;
  int count_set(const Segment& segment) const;
  /// Positions of set bits within the segment.
  std::vector<int> kept(const Segment& segment) const;
  /// Bits of string 0 or 1 as '0'/'1' text.
  std::string string_text(int string_index) const;

  friend bool operator==(const Genome& a, const Genome& b) {
    return a.bits_ == b.bits_ && *a.layout_ == *b.layout_;
  }

 private:
  std::shared_ptr<const GenomeLayout> layout_;
  std::vector<bool> bits_;
};

int hamming_distance(const Genome& a, const Genome& b);

/// Surviving output channels of every layer, as indices into the base
/// layer's channels.
struct PruningPlan {
  std::vector<std::vector<int>> kept;
};

PruningPlan plan_pruning(const Genome& genome, const ArchSpec& base);

/// Architecture keeping only the filters whose bits are set.
ArchSpec decode(const Genome& genome, const ArchSpec& base);

/// Copies surviving filters (and the matching input slices of their
/// consumers) out of the base weights. Nothing is re-initialized.
template <typename Scalar>
Model<Scalar> transfer_weights(const Model<Scalar>& base, const Genome& genome);

struct MutationStats {
  int flips = 0;
  int repairs = 0;
};

/// Flips every bit independently with probability p_m, then sets one
/// uniformly chosen bit in any segment left empty.
Genome mutate(const Genome& genome, double p_m, Rng& rng, MutationStats* stats = nullptr);

// Segment-annotated text document.
void write_genome(std::ostream& os, const Genome& genome);
Genome read_genome(std::istream& is);
std::string genome_to_string(const Genome& genome);
Genome genome_from_string(const std::string& text);

}  // namespace esprune

#endif  // ESPRUNE_GENOME_HPP_
