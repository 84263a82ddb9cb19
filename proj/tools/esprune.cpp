// esprune command-line tool: FLOPs queries, pruning runs, artifact inspection.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "esprune/arch.hpp"
#include "esprune/data.hpp"
#include "esprune/engine.hpp"
#include "esprune/evolve.hpp"
#include "esprune/genome.hpp"
#include "esprune/model_io.hpp"

#ifndef ESPRUNE_VERSION
#define ESPRUNE_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace esprune;

namespace {

constexpr const char* kGenomeFile = "genome.txt";
constexpr const char* kBaseArchFile = "base_arch.txt";
constexpr const char* kSolutionFile = "solution.txt";

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

bool is_preset(const std::string& name) {
  for (const auto& p : preset_names()) {
    if (p == name) return true;
  }
  return false;
}

ArchSpec resolve_arch(const std::string& arg, const PresetOptions& options = {}) {
  if (is_preset(arg)) return build_preset(arg, options);
  if (!fs::exists(arg)) {
    throw FormatError("'" + arg + "' is neither a preset nor an architecture file");
  }
  return load_arch(arg);
}

double percent_pruned(std::int64_t flops, std::int64_t base_flops) {
  return 100.0 * (1.0 - static_cast<double>(flops) / static_cast<double>(base_flops));
}

// ---- flops ---------------------------------------------------------------

int cmd_flops(const std::string& arch_arg, bool as_json) {
  const ArchSpec arch = resolve_arch(arch_arg);
  const FlopsReport report = count_flops(arch);
  const auto shapes = propagate_shapes(arch);
  if (as_json) {
    json doc;
    doc["arch"] = arch_arg;
    doc["family"] = std::string(to_string(arch.family));
    doc["weight_layers"] = weight_layer_count(arch);
    json layers = json::array();
    for (const auto& e : report.per_layer) {
      const LayerSpec& l = arch.layers[e.layer];
      layers.push_back({{"id", e.layer},
                        {"name", l.name},
                        {"kind", std::string(to_string(l.kind))},
                        {"flops", e.flops}});
    }
    doc["layers"] = layers;
    doc["total"] = report.total;
    std::cout << doc.dump(2) << '\n';
    return 0;
  }
  std::cout << std::left << std::setw(6) << "id" << std::setw(22) << "name" << std::setw(16)
            << "kind" << std::setw(16) << "output" << "flops\n";
  for (const auto& e : report.per_layer) {
    const LayerSpec& l = arch.layers[e.layer];
    std::ostringstream shape;
    shape << shapes[e.layer];
    std::cout << std::setw(6) << e.layer << std::setw(22) << l.name << std::setw(16)
              << to_string(l.kind) << std::setw(16) << shape.str() << e.flops << '\n';
  }
  std::cout << "total " << report.total << " (" << std::scientific << std::setprecision(3)
            << static_cast<double>(report.total) << ")\n";
  return 0;
}

// ---- prune ---------------------------------------------------------------

struct PruneOptions {
  std::string arch = "tiny_cnn";
  std::string data;
  std::string synthetic;
  std::string weights;
  int base_epochs = 20;
  double base_lr = 0.1;
  std::string variant = "plus";
  std::string out = "esprune_run";
  ESConfig config;
};

struct SyntheticSpec {
  int num_classes = 0;
  int per_class = 0;
  int image_size = 0;
  std::uint64_t seed = 0;
};

SyntheticSpec parse_synthetic(const std::string& text) {
  SyntheticSpec s;
  char c1 = 0, c2 = 0, c3 = 0;
  std::istringstream is(text);
  if (!(is >> s.num_classes >> c1 >> s.per_class >> c2 >> s.image_size >> c3 >> s.seed) ||
      c1 != ',' || c2 != ',' || c3 != ',' || !(is >> std::ws).eof()) {
    throw std::invalid_argument("--synthetic expects classes,per_class,image_size,seed");
  }
  if (s.num_classes < 1 || s.per_class < 1 || s.image_size < 1) {
    throw std::invalid_argument("--synthetic counts must be >= 1");
  }
  return s;
}

fs::path resolve_out(const std::string& out) {
  fs::path p(out);
  if (p.is_relative()) {
    if (const char* root = std::getenv("ESPRUNE_OUTPUT_ROOT"); root && *root) {
      p = fs::path(root) / p;
    }
  }
  return p;
}

json config_json(const ESConfig& c) {
  return {{"lambda", c.lambda_size},       {"generations", c.generations},
          {"p_m", c.p_m},                  {"e_eval", c.e_eval},
          {"alpha_eval", c.alpha_eval},    {"e_fine", c.e_fine},
          {"alpha_fine", c.alpha_fine},    {"variant", std::string(to_string(c.variant))},
          {"seed", c.seed},                {"batch_size", c.batch_size},
          {"subset_size", c.subset_size},  {"workers", c.workers}};
}

void write_json(const fs::path& path, const json& doc) {
  std::ofstream os(path);
  os << doc.dump(2) << '\n';
  if (!os.flush()) throw std::runtime_error("failed writing " + path.string());
}

void save_solution(const fs::path& dir, const FinalSolution& s, const ArchSpec& base,
                   std::int64_t base_flops) {
  save_model(dir.string(), s.model);
  save_arch((dir / kBaseArchFile).string(), base);
  {
    std::ofstream os(dir / kGenomeFile);
    write_genome(os, s.individual.genome);
    if (!os.flush()) throw std::runtime_error("failed writing genome to " + dir.string());
  }
  std::ofstream os(dir / kSolutionFile);
  os << "role " << s.role << '\n'
     << "id " << s.individual.id << '\n'
     << "f1 " << std::setprecision(17) << s.f1 << '\n'
     << "f2 " << s.individual.f2 << '\n'
     << "base_flops " << base_flops << '\n';
  if (!os.flush()) throw std::runtime_error("failed writing solution info to " + dir.string());
}

int cmd_prune(PruneOptions opt, const std::map<std::string, bool>& overridden) {
  if (opt.data.empty() == opt.synthetic.empty()) {
    throw std::invalid_argument("exactly one of --data or --synthetic is required");
  }
  opt.config.variant = variant_from_string(opt.variant);
  opt.config.validate();
  if (opt.base_epochs < 0) throw std::invalid_argument("--base-epochs must be >= 0");
  if (!(opt.base_lr > 0)) throw std::invalid_argument("--base-lr must be > 0");

  Dataset data;
  json dataset_doc;
  if (!opt.synthetic.empty()) {
    const SyntheticSpec s = parse_synthetic(opt.synthetic);
    data = synthetic(s.num_classes, s.per_class, s.image_size, s.seed);
    dataset_doc = {{"synthetic",
                    {{"classes", s.num_classes},
                     {"per_class", s.per_class},
                     {"image_size", s.image_size},
                     {"seed", s.seed}}}};
  } else {
    data = load_cifar_path(opt.data);
    dataset_doc = {{"path", fs::absolute(opt.data).string()}, {"images", data.size()}};
  }

  PresetOptions preset;
  preset.num_classes = data.num_classes;
  preset.image_size = data.height();
  ArchSpec arch = resolve_arch(opt.arch, preset);

  const fs::path out = resolve_out(opt.out);
  if (fs::exists(out) && !fs::is_empty(out)) {
    throw std::invalid_argument("output directory " + out.string() + " is not empty");
  }
  fs::create_directories(out);

  json manifest;
  manifest["tool"] = "esprune";
  manifest["version"] = ESPRUNE_VERSION;
  manifest["started_at"] = utc_now();
  manifest["arch"] = is_preset(opt.arch) ? json{{"preset", opt.arch}}
                                         : json{{"path", fs::absolute(opt.arch).string()}};
  manifest["dataset"] = dataset_doc;
  manifest["base_model"] =
      opt.weights.empty()
          ? json{{"init_seed", opt.config.seed}, {"epochs", opt.base_epochs},
                 {"learning_rate", opt.base_lr}}
          : json{{"weights", fs::absolute(opt.weights).string()}};
  manifest["config"] = config_json(opt.config);
  json overrides = json::array();
  for (const auto& [flag, set] : overridden) {
    if (set) overrides.push_back(flag);
  }
  manifest["overrides"] = overrides;
  manifest["output"] = fs::absolute(out).string();
  write_json(out / "manifest.json", manifest);

  Model<float> base;
  if (!opt.weights.empty()) {
    base = load_model<float>(opt.weights);
    if (!(base.arch == arch)) {
      throw std::invalid_argument("weights in " + opt.weights + " do not match --arch " +
                                  opt.arch);
    }
  } else {
    TrainConfig tc;
    tc.epochs = opt.base_epochs;
    tc.learning_rate = opt.base_lr;
    tc.batch_size = opt.config.batch_size;
    tc.seed = opt.config.seed;
    std::cerr << "training base model for " << opt.base_epochs << " epochs\n";
    base = train(init_model<float>(arch, opt.config.seed), data, tc);
    std::cerr << "base error " << error_rate(base, data, tc.batch_size) << '\n';
  }

  std::ofstream trace(out / "trace.tsv");
  write_trace_header(trace);
  trace.flush();
  int last_generation = -1;
  const auto sink = [&](const TraceRow& row) {
    write_trace_row(trace, row);
    trace.flush();
    if (row.generation != last_generation) {
      last_generation = row.generation;
      std::cerr << "generation " << row.generation << " evaluated\n";
    }
  };

  const RunResult result = run(base, data, opt.config, sink);
  if (!trace) throw std::runtime_error("failed writing trace");
  trace.close();

  std::ofstream summary(out / "summary.tsv");
  summary << "role\tid\tf1\tf2\tflops_pruned_pct\n";
  for (const FinalSolution& s : result.solutions) {
    save_solution(out / s.role, s, arch, result.base_flops);
    summary << s.role << '\t' << s.individual.id << '\t' << std::setprecision(6) << s.f1 << '\t'
            << s.individual.f2 << '\t' << std::fixed << std::setprecision(2)
            << percent_pruned(s.individual.f2, result.base_flops) << std::defaultfloat << '\n';
  }
  if (!summary.flush()) throw std::runtime_error("failed writing summary");

  manifest["finished_at"] = utc_now();
  write_json(out / "manifest.json", manifest);

  std::cout << "base FLOPs " << result.base_flops << '\n';
  for (const FinalSolution& s : result.solutions) {
    std::cout << std::left << std::setw(6) << s.role << " id " << s.individual.id << "  error "
              << std::setprecision(4) << s.f1 << "  FLOPs " << s.individual.f2 << "  pruned "
              << std::fixed << std::setprecision(2)
              << percent_pruned(s.individual.f2, result.base_flops) << "%" << std::defaultfloat
              << '\n';
  }
  return 0;
}

// ---- inspect -------------------------------------------------------------

std::map<std::string, std::string> read_solution(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  std::map<std::string, std::string> fields;
  std::string key, value;
  while (is >> key >> value) fields[key] = value;
  for (const char* k : {"role", "id", "f1", "f2", "base_flops"}) {
    if (!fields.count(k)) throw FormatError(path.string() + ": missing field '" + k + "'");
  }
  return fields;
}

int cmd_inspect(const std::string& dir_arg) {
  const fs::path dir(dir_arg);
  const Model<double> model = load_model<double>(dir.string());
  const ArchSpec base = load_arch((dir / kBaseArchFile).string());
  Genome genome = [&] {
    std::ifstream is(dir / kGenomeFile);
    if (!is) throw FormatError("cannot open " + (dir / kGenomeFile).string());
    return read_genome(is);
  }();
  if (!(decode(genome, base) == model.arch)) {
    throw FormatError(dir.string() + ": architecture does not match genome applied to base");
  }
  const auto info = read_solution(dir / kSolutionFile);

  const std::int64_t flops = count_flops(model.arch).total;
  const std::int64_t base_flops = count_flops(base).total;
  if (std::to_string(flops) != info.at("f2") || std::to_string(base_flops) != info.at("base_flops")) {
    throw FormatError(dir.string() + ": FLOPs in " + kSolutionFile + " disagree with the model");
  }

  std::cout << "role " << info.at("role") << "  id " << info.at("id") << "  family "
            << to_string(model.arch.family) << "  input " << model.arch.input << "  classes "
            << model.arch.num_classes << "  error " << info.at("f1") << '\n';
  std::cout << "FLOPs " << flops << " of " << base_flops << "  pruned " << std::fixed
            << std::setprecision(2) << percent_pruned(flops, base_flops) << "%\n"
            << std::defaultfloat;

  std::cout << "\nlayer survivors\n";
  for (std::size_t i = 0; i < base.layers.size(); ++i) {
    const LayerSpec& b = base.layers[i];
    if (b.kind != LayerKind::conv && b.kind != LayerKind::fully_connected) continue;
    std::cout << "  " << std::left << std::setw(6) << i << std::setw(22) << b.name
              << model.arch.layers[i].filters << " / " << b.filters << '\n';
  }

  std::cout << "\nsegment kept/bits pruned\n";
  for (const Segment& seg : genome.layout().segments) {
    const int kept = genome.count_set(seg);
    std::cout << "  " << std::left << std::setw(8) << seg.id << std::right << std::setw(5) << kept
              << " / " << std::left << std::setw(6) << seg.length << std::fixed
              << std::setprecision(2) << 100.0 * (seg.length - kept) / seg.length << "%"
              << std::defaultfloat << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evolutionary filter pruning for convolutional networks"};
  app.set_version_flag("--version", ESPRUNE_VERSION);
  app.require_subcommand(1);

  std::string flops_arch;
  bool flops_json = false;
  auto* flops = app.add_subcommand("flops", "Print per-layer and total FLOPs of an architecture");
  flops->add_option("arch", flops_arch, "Preset name or architecture file")->required();
  flops->add_flag("--json", flops_json, "Machine-readable output");

  PruneOptions prune_opt;
  ESConfig& c = prune_opt.config;
  auto* prune = app.add_subcommand("prune", "Run the evolutionary pruning search");
  prune->add_option("--arch", prune_opt.arch, "Preset name or architecture file")
      ->capture_default_str();
  auto* data_opt = prune->add_option("--data", prune_opt.data,
                                     "CIFAR binary file or directory of batch files");
  auto* synth_opt = prune->add_option("--synthetic", prune_opt.synthetic,
                                      "Synthetic data: classes,per_class,image_size,seed");
  data_opt->excludes(synth_opt);
  prune->add_option("--weights", prune_opt.weights, "Saved base model directory");
  prune->add_option("--base-epochs", prune_opt.base_epochs,
                    "Epochs of base-model training when --weights is absent")
      ->capture_default_str();
  prune->add_option("--base-lr", prune_opt.base_lr, "Base-model learning rate")
      ->capture_default_str();
  prune->add_option("--lambda", c.lambda_size, "Offspring per generation")->capture_default_str();
  prune->add_option("--generations", c.generations, "Generations")->capture_default_str();
  prune->add_option("--pm", c.p_m, "Bit-flip probability")->capture_default_str();
  prune->add_option("--e-eval", c.e_eval, "Evaluation epochs")->capture_default_str();
  prune->add_option("--alpha-eval", c.alpha_eval, "Evaluation learning rate")
      ->capture_default_str();
  prune->add_option("--e-fine", c.e_fine, "Fine-tuning epochs")->capture_default_str();
  prune->add_option("--alpha-fine", c.alpha_fine, "Fine-tuning learning rate")
      ->capture_default_str();
  prune->add_option("--variant", prune_opt.variant, "plus or comma")
      ->check(CLI::IsMember({"plus", "comma"}))
      ->capture_default_str();
  prune->add_option("--seed", c.seed, "Run seed")->capture_default_str();
  prune->add_option("--batch-size", c.batch_size, "SGD batch size")->capture_default_str();
  prune->add_option("--subset", c.subset_size, "Evaluation subset size")->capture_default_str();
  prune->add_option("--workers", c.workers, "Concurrent evaluations")->capture_default_str();
  prune->add_option("--out", prune_opt.out,
                    "Output directory (relative paths resolve under $ESPRUNE_OUTPUT_ROOT)")
      ->capture_default_str();

  std::string inspect_dir;
  auto* inspect = app.add_subcommand("inspect", "Describe a saved knee/heavy/light directory");
  inspect->add_option("dir", inspect_dir, "Model directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (flops->parsed()) return cmd_flops(flops_arch, flops_json);
    if (prune->parsed()) {
      std::map<std::string, bool> overridden;
      for (const CLI::Option* o : prune->get_options()) {
        if (o->get_lnames().empty()) continue;
        overridden["--" + o->get_lnames().front()] = o->count() > 0;
      }
      overridden.erase("--help");
      return cmd_prune(prune_opt, overridden);
    }
    if (inspect->parsed()) return cmd_inspect(inspect_dir);
  } catch (const ShapeError& e) {
    std::cerr << "shape error at layer " << e.layer() << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
