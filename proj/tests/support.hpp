// Helpers shared by the unit and acceptance tests.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "esprune/arch.hpp"
#include "esprune/data.hpp"
#include "esprune/engine.hpp"
#include "esprune/evolve.hpp"
#include "esprune/genome.hpp"

namespace support {

using namespace esprune;

inline std::shared_ptr<const GenomeLayout> shared_layout(const ArchSpec& arch) {
  return std::make_shared<const GenomeLayout>(layout_for(arch));
}

/// Genome with a random density between sparse and dense, repaired by mutate.
inline Genome random_genome(const std::shared_ptr<const GenomeLayout>& layout, Rng& rng) {
  std::uniform_real_distribution<double> density(0.05, 0.95);
  return mutate(Genome::all_ones(layout), density(rng), rng);
}

/// Knee/heavy/light by a direct reading of the selection rule: normalize each
/// objective to [0, 1] over the population, sum, take the first minimum.
inline TriIndex brute_force_select(const std::vector<Objectives>& pop) {
  std::vector<double> f1, f2;
  for (const auto& p : pop) {
    f1.push_back(p.f1);
    f2.push_back(p.f2);
  }
  const auto normalized = [](const std::vector<double>& f) {
    const double lo = *std::min_element(f.begin(), f.end());
    const double hi = *std::max_element(f.begin(), f.end());
    std::vector<double> out(f.size(), 0.0);
    if (hi == lo) return out;
    for (std::size_t k = 0; k < f.size(); ++k) out[k] = (f[k] - lo) / (hi - lo);
    return out;
  };
  const auto n1 = normalized(f1);
  const auto n2 = normalized(f2);
  std::vector<double> dist(pop.size());
  for (std::size_t k = 0; k < pop.size(); ++k) dist[k] = n1[k] + n2[k];
  const auto first_min = [](const std::vector<double>& v) {
    return static_cast<int>(std::min_element(v.begin(), v.end()) - v.begin());
  };
  return {first_min(dist), first_min(f1), first_min(f2)};
}

/// Random population with f1 in [0, 1] and f2 in [1, 1e9]. With `with_ties`,
/// about half the populations come from a coarse grid so that ties are common.
inline std::vector<Objectives> random_objectives(int size, Rng& rng, bool with_ties = true) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_real_distribution<double> uf2(1.0, 1e9);
  std::uniform_int_distribution<int> grid(0, 4);
  const bool coarse = with_ties && u01(rng) < 0.5;
  std::vector<Objectives> pop(size);
  for (auto& p : pop) {
    if (coarse) {
      p.f1 = grid(rng) * 0.25;
      p.f2 = 1.0 + grid(rng) * 2.5e8;
    } else {
      p.f1 = u01(rng);
      p.f2 = uf2(rng);
    }
  }
  return pop;
}

/// Base model for desk-scale runs: tiny_cnn trained from scratch.
inline Model<float> trained_tiny_cnn(const Dataset& data, std::uint64_t seed, int epochs = 20) {
  PresetOptions opts;
  opts.num_classes = data.num_classes;
  opts.image_size = data.height();
  TrainConfig tc;
  tc.epochs = epochs;
  tc.learning_rate = 0.1;
  tc.seed = seed;
  return train(init_model<float>(build_preset("tiny_cnn", opts), seed), data, tc);
}

/// Fresh scratch directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("esprune_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary);
  os << bytes;
}

}  // namespace support
