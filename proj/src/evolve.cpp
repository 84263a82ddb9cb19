#include "esprune/evolve.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <stdexcept>
#include <thread>

namespace esprune {

namespace {

// Independent random streams of one run.
enum Stream : std::uint64_t {
  kInitStream = 1,
  kOffspringStream = 2,
  kEvalStream = 3,
  kSubsetStream = 4,
  kFineStream = 5,
};

template <typename Fn>
void parallel_for(int count, int workers, Fn&& fn) {
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

void check_ordering(const TriSolution& s) {
  if (!(s.heavy.f1 <= s.knee.f1 && s.heavy.f1 <= s.light.f1 && s.light.f2 <= s.knee.f2 &&
        s.light.f2 <= s.heavy.f2)) {
    throw std::logic_error("knee/heavy/light ordering violated");
  }
}

TraceRow trace_row(const Individual& ind, int generation) {
  return {generation,  ind.id, ind.parent_id, ind.f1, ind.f2, ind.genome.count_set(),
          ind.genome.layout().total_bits};
}

}  // namespace

std::string_view to_string(Variant variant) {
  return variant == Variant::plus ? "plus" : "comma";
}

Variant variant_from_string(std::string_view text) {
  if (text == "plus") return Variant::plus;
  if (text == "comma") return Variant::comma;
  throw std::invalid_argument("variant must be 'plus' or 'comma'");
}

void ESConfig::validate() const {
  if (lambda_size < 1) throw std::invalid_argument("lambda_size must be >= 1");
  if (generations < 1) throw std::invalid_argument("generations must be >= 1");
  if (!(p_m >= 0.0 && p_m <= 1.0)) throw std::invalid_argument("p_m must lie in [0, 1]");
  if (e_eval < 0 || e_fine < 0) throw std::invalid_argument("epochs must be >= 0");
  if (!(alpha_eval > 0) || !(alpha_fine > 0)) {
    throw std::invalid_argument("learning rates must be > 0");
  }
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (subset_size < 1) throw std::invalid_argument("subset_size must be >= 1");
  if (workers < 1) throw std::invalid_argument("workers must be >= 1");
}

TriIndex select_knee_boundary(std::span<const Objectives> population) {
  if (population.empty()) throw std::invalid_argument("selection from an empty population");
  TriIndex picked;
  double min_f1 = population[0].f1, max_f1 = population[0].f1;
  double min_f2 = population[0].f2, max_f2 = population[0].f2;
  for (std::size_t k = 1; k < population.size(); ++k) {
    const Objectives& p = population[k];
    if (p.f1 < min_f1) {
      min_f1 = p.f1;
      picked.heavy = static_cast<int>(k);
    }
    if (p.f2 < min_f2) {
      min_f2 = p.f2;
      picked.light = static_cast<int>(k);
    }
    max_f1 = std::max(max_f1, p.f1);
    max_f2 = std::max(max_f2, p.f2);
  }
  const double range_f1 = max_f1 - min_f1;
  const double range_f2 = max_f2 - min_f2;
  double best = 0.0;
  for (std::size_t k = 0; k < population.size(); ++k) {
    const double d1 = range_f1 > 0 ? (population[k].f1 - min_f1) / range_f1 : 0.0;
    const double d2 = range_f2 > 0 ? (population[k].f2 - min_f2) / range_f2 : 0.0;
    const double distance = d1 + d2;
    if (k == 0 || distance < best) {
      best = distance;
      picked.knee = static_cast<int>(k);
    }
  }
  return picked;
}

TriSolution knee_boundary_select(std::span<const Individual> population) {
  std::vector<Objectives> objectives;
  objectives.reserve(population.size());
  for (const Individual& ind : population) {
    if (!ind.evaluated) {
      throw std::invalid_argument("individual " + std::to_string(ind.id) + " is not evaluated");
    }
    objectives.push_back({ind.f1, static_cast<double>(ind.f2)});
  }
  const TriIndex picked = select_knee_boundary(objectives);
  return {population[picked.knee], population[picked.heavy], population[picked.light]};
}

std::vector<Individual> init_population(int lambda_size, const ArchSpec& base, double p_m,
                                        std::uint64_t seed) {
  if (lambda_size < 1) throw std::invalid_argument("lambda_size must be >= 1");
  const auto layout = std::make_shared<const GenomeLayout>(layout_for(base));
  const Genome original = Genome::all_ones(layout);
  std::vector<Individual> population;
  for (int i = 0; i < 3 + lambda_size; ++i) {
    Rng rng = child_rng(seed, {kInitStream, static_cast<std::uint64_t>(i)});
    population.push_back(Individual{mutate(original, p_m, rng), 1.0, 0, false, i, {}, nullptr});
  }
  return population;
}

std::vector<Individual> make_offspring(const TriSolution& parents, const ESConfig& config,
                                       int generation, int first_id) {
  const Individual* choices[3] = {&parents.knee, &parents.heavy, &parents.light};
  std::vector<Individual> offspring;
  offspring.reserve(config.lambda_size);
  for (int i = 0; i < config.lambda_size; ++i) {
    Rng rng = child_rng(config.seed, {kOffspringStream, static_cast<std::uint64_t>(generation),
                                      static_cast<std::uint64_t>(i)});
    std::uniform_int_distribution<int> pick(0, 2);
    const Individual& parent = *choices[pick(rng)];
    offspring.push_back(Individual{mutate(parent.genome, config.p_m, rng), 1.0, 0, false,
                                   first_id + i, parent.id, nullptr});
  }
  return offspring;
}

Individual evaluate(Individual individual, const Model<float>& base_model,
                    const Dataset& subset, const ESConfig& config) {
  if (individual.evaluated) return individual;
  if (subset.size() == 0) throw std::invalid_argument("evaluation subset is empty");
  Model<float> pruned = transfer_weights(base_model, individual.genome);
  individual.f2 = count_flops(pruned.arch).total;
  TrainConfig train_config;
  train_config.epochs = config.e_eval;
  train_config.learning_rate = config.alpha_eval;
  train_config.batch_size = config.batch_size;
  train_config.seed =
      child_seed(config.seed, {kEvalStream, static_cast<std::uint64_t>(individual.id)});
  pruned = train(std::move(pruned), subset, train_config);
  individual.f1 = error_rate(pruned, subset, config.batch_size);
  individual.model = std::make_shared<const Model<float>>(std::move(pruned));
  individual.evaluated = true;
  return individual;
}

void write_trace_header(std::ostream& os) {
  os << "generation\tid\tparent_id\tf1\tf2\tbits_set\ttotal_bits\n";
}

void write_trace_row(std::ostream& os, const TraceRow& row) {
  os << row.generation << '\t' << row.id << '\t';
  if (row.parent_id) {
    os << *row.parent_id;
  } else {
    os << '-';
  }
  os << '\t' << std::setprecision(17) << row.f1 << '\t' << row.f2 << '\t' << row.bits_set
     << '\t' << row.total_bits << '\n';
}

RunResult run(const Model<float>& base_model, const Dataset& data, const ESConfig& config,
              const TraceSink& sink) {
  config.validate();
  if (data.size() == 0) throw std::invalid_argument("training data is empty");
  if (data.num_classes != base_model.arch.num_classes) {
    throw std::invalid_argument("dataset has " + std::to_string(data.num_classes) +
                                " classes, model expects " +
                                std::to_string(base_model.arch.num_classes));
  }
  check_params(base_model);

  const int per_class = config.subset_size / data.num_classes;
  const Dataset sample =
      stratified_sample(data, per_class, child_seed(config.seed, {kSubsetStream}));

  std::vector<TraceRow> trace;
  std::vector<SelectionRecord> rounds;
  const auto evaluate_batch = [&](std::vector<Individual>& batch, int generation) {
    parallel_for(static_cast<int>(batch.size()), config.workers, [&](int i) {
      batch[i] = evaluate(std::move(batch[i]), base_model, sample, config);
    });
    for (const Individual& ind : batch) {
      trace.push_back(trace_row(ind, generation));
      if (sink) sink(trace.back());
    }
  };
  const auto select = [&](const std::vector<Individual>& pool) {
    SelectionRecord record;
    record.round = static_cast<int>(rounds.size());
    for (const Individual& ind : pool) {
      record.pool.push_back({ind.f1, static_cast<double>(ind.f2)});
      record.pool_ids.push_back(ind.id);
    }
    record.picked = select_knee_boundary(record.pool);
    TriSolution chosen{pool[record.picked.knee], pool[record.picked.heavy],
                       pool[record.picked.light]};
    check_ordering(chosen);
    rounds.push_back(std::move(record));
    return chosen;
  };

  std::vector<Individual> pool =
      init_population(config.lambda_size, base_model.arch, config.p_m, config.seed);
  evaluate_batch(pool, 0);
  int next_id = static_cast<int>(pool.size());

  for (int generation = 1; generation <= config.generations; ++generation) {
    const TriSolution parents = select(pool);
    std::vector<Individual> offspring = make_offspring(parents, config, generation, next_id);
    next_id += config.lambda_size;
    evaluate_batch(offspring, generation);
    pool.clear();
    if (config.variant == Variant::plus) {
      for (const Individual* p : {&parents.knee, &parents.heavy, &parents.light}) {
        const bool seen = std::any_of(pool.begin(), pool.end(),
                                      [&](const Individual& q) { return q.id == p->id; });
        if (!seen) pool.push_back(*p);
      }
    }
    pool.insert(pool.end(), std::make_move_iterator(offspring.begin()),
                std::make_move_iterator(offspring.end()));
  }
  TriSolution selected = select(pool);

  std::vector<FinalSolution> solutions;
  const Individual* roles[3] = {&selected.knee, &selected.heavy, &selected.light};
  const char* names[3] = {"knee", "heavy", "light"};
  for (int r = 0; r < 3; ++r) {
    TrainConfig fine;
    fine.epochs = config.e_fine;
    fine.learning_rate = config.alpha_fine;
    fine.batch_size = config.batch_size;
    fine.seed = child_seed(config.seed, {kFineStream, static_cast<std::uint64_t>(r)});
    Model<float> tuned = train(*roles[r]->model, data, fine);
    const double f1 = error_rate(tuned, data, config.batch_size);
    solutions.push_back({names[r], *roles[r], std::move(tuned), f1});
  }

  return RunResult{count_flops(base_model.arch).total, std::move(trace), std::move(rounds),
                   std::move(selected), std::move(solutions)};
}

}  // namespace esprune
