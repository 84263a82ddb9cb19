#ifndef ESPRUNE_EVOLVE_HPP_
#define ESPRUNE_EVOLVE_HPP_

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "esprune/data.hpp"
#include "esprune/engine.hpp"
#include "esprune/genome.hpp"

namespace esprune {

enum class Variant { plus, comma };

std::string_view to_string(Variant variant);
Variant variant_from_string(std::string_view text);

/// Evolution parameters. Defaults: offspring 20, generations 10, p_m 0.1,
/// 5 evaluation epochs at 0.1, 50 fine-tuning epochs at 0.01.
struct ESConfig {
  int lambda_size = 20;
  int generations = 10;
  double p_m = 0.1;
  int e_eval = 5;
  double alpha_eval = 0.1;
  int e_fine = 50;
  double alpha_fine = 0.01;
  Variant variant = Variant::plus;
  std::uint64_t seed = 0;

  int batch_size = 64;
  /// Images in the evaluation subset, split evenly across classes.
  int subset_size = 1000;
  /// Concurrent evaluations.
  int workers = 1;

  /// Throws std::invalid_argument on an out-of-range field.
  void validate() const;
};

struct Individual {
  Genome genome;
  double f1 = 1.0;
  std::int64_t f2 = 0;
  bool evaluated = false;
  int id = 0;
  std::optional<int> parent_id;
  /// Weights after evaluation; kept while the individual survives.
  std::shared_ptr<const Model<float>> model;
};

struct TriSolution {
  Individual knee;
  Individual heavy;
  Individual light;
};

struct Objectives {
  double f1 = 0.0;
  double f2 = 0.0;
};

/// Population indices picked by knee and boundary selection.
struct TriIndex {
  int knee = 0;
  int heavy = 0;
  int light = 0;
  friend bool operator==(const TriIndex&, const TriIndex&) = default;
};

/// heavy = argmin f1, light = argmin f2, knee = argmin of the summed
/// min-max normalized objectives. An objective with max == min contributes 0.
/// Ties go to the lowest index.
TriIndex select_knee_boundary(std::span<const Objectives> population);

TriSolution knee_boundary_select(std::span<const Individual> population);

/// 3 + lambda_size copies of the all-ones genome, each mutated with p_m.
/// Ids are 0, 1, 2, ...
std::vector<Individual> init_population(int lambda_size, const ArchSpec& base, double p_m,
                                        std::uint64_t seed);

/// lambda_size offspring, each a mutation of one parent drawn uniformly from
/// the three selected solutions. Ids start at `first_id`.
std::vector<Individual> make_offspring(const TriSolution& parents, const ESConfig& config,
                                       int generation, int first_id);

/// Prunes the base model by the genome, trains it for e_eval epochs on the
/// subset and records (training error, FLOPs). Evaluated individuals are
/// returned unchanged.
Individual evaluate(Individual individual, const Model<float>& base_model,
                    const Dataset& subset, const ESConfig& config);

struct TraceRow {
  int generation = 0;
  int id = 0;
  std::optional<int> parent_id;
  double f1 = 0.0;
  std::int64_t f2 = 0;
  int bits_set = 0;
  int total_bits = 0;
};

void write_trace_header(std::ostream& os);
void write_trace_row(std::ostream& os, const TraceRow& row);

/// One knee-and-boundary selection.
struct SelectionRecord {
  int round = 0;
  std::vector<Objectives> pool;
  std::vector<int> pool_ids;
  TriIndex picked;
};

struct FinalSolution {
  std::string role;
  Individual individual;
  Model<float> model;
  /// Training error on the full dataset after fine-tuning.
  double f1 = 1.0;
};

struct RunResult {
  std::int64_t base_flops = 0;
  std::vector<TraceRow> trace;
  std::vector<SelectionRecord> rounds;
  TriSolution selected;
  std::vector<FinalSolution> solutions;  // knee, heavy, light
};

using TraceSink = std::function<void(const TraceRow&)>;

/// Evolves pruned variants of `base_model`.
///
/// The initial population is evaluated and logged as generation 0. Each of
/// the `generations` rounds selects knee/heavy/light from the pool and
/// evaluates a new offspring batch; the pool for the next round is the three
/// selected parents plus the batch (plus) or the batch alone (comma). A last
/// selection over the final pool yields the solutions, which are fine-tuned
/// on the whole dataset. Every evaluated individual is passed to `sink` as
/// soon as its generation is complete.
RunResult run(const Model<float>& base_model, const Dataset& data, const ESConfig& config,
              const TraceSink& sink = {});

}  // namespace esprune

#endif  // ESPRUNE_EVOLVE_HPP_
