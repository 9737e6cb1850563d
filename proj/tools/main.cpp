#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <string>
#include <vector>

#include "diffdepth/benchmark.hpp"

// Command-line surface: dataset generation, the staged training loop,
// benchmark evaluation, single-image inference, and ablation grids. Exits 0
// on success and 2 on any validation problem (bad flags, malformed configs,
// incompatible inputs).

namespace {

using namespace diffdepth;

nlohmann::json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open '" + path + "'");
  return nlohmann::json::parse(is);
}

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(is), {});
}

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (const auto& p : parts) {
    if (!out.empty()) out += sep;
    out += p;
  }
  return out;
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  std::string out;
  GenerateOptions opts;
  std::vector<std::string> kinds;
};

int cmd_gen(const GenArgs& a) {
  GenerateOptions opts = a.opts;
  if (!a.kinds.empty()) opts.mix.kinds = a.kinds;
  Dataset ds = generate_dataset(opts);
  save_dataset(ds, a.out);
  std::cout << "wrote " << ds.samples.size() << " samples (" << opts.train_count << " train, "
            << opts.val_count << " val, " << opts.test_count << " test) to " << a.out << "\n"
            << "corruptions: " << join(opts.mix.kinds, ',') << " at levels " << opts.mix.level_lo
            << ".." << opts.mix.level_hi << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  int stage = 1;
  std::string config, data, out;
  std::string resume, teacher, init;
};

template <typename S>
int train_as(const TrainArgs& a, const TrainConfig& cfg, const Dataset& ds) {
  RunPaths paths;
  paths.out_dir = a.out + "/stage" + std::to_string(cfg.stage) + "_" + config_hash(cfg);
  paths.teacher = a.teacher;
  paths.init = a.init;
  paths.resume = a.resume;
  std::cout << "run directory: " << paths.out_dir << "\n";
  StageResult res = Trainer<S>(ds, cfg).run(paths);
  const LossReport last = res.log.empty() ? LossReport{} : res.log.back();
  std::cout << "checkpoint:    " << res.checkpoint << "\n"
            << "final loss:    " << last.total << "\n"
            << "val AbsRel:    " << res.val_abs_rel << " (clear images, median-scaled)\n";
  return 0;
}

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg = config_with_defaults(read_json(a.config));
  cfg.stage = a.stage;  // the flag decides the stage, the file the rest
  cfg.validate();
  const Dataset ds = load_dataset(a.data);
  if (cfg.precision == "f32") return train_as<float>(a, cfg, ds);
  return train_as<double>(a, cfg, ds);
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string ckpt, data, out = "runs";
  std::vector<std::string> splits{"test"};
  std::string median_scale = "on";
};

template <typename S>
int eval_as(const EvalArgs& a, const Dataset& ds, const std::string& hash) {
  BenchmarkOptions opt;
  opt.splits = a.splits;
  opt.median_scale = a.median_scale == "on";
  opt.out_dir =
      a.out + "/eval_" + hash + "_m" + a.median_scale + "_" + join(a.splits, '-');
  run_benchmark<S>(a.ckpt, ds, opt);
  std::cout << read_text(opt.out_dir + "/metrics.txt") << "\nfiles under " << opt.out_dir << "\n";
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  const Dataset ds = load_dataset(a.data);
  const LoadedCheckpoint<double> peek = load_checkpoint<double>(a.ckpt);
  std::string precision = peek.meta.precision.empty() ? "f64" : peek.meta.precision;
  if (precision == "f32") return eval_as<float>(a, ds, peek.meta.config_hash);
  return eval_as<double>(a, ds, peek.meta.config_hash);
}

// ---------------------------------------------------------------------------
// infer

struct InferArgs {
  std::string ckpt, image, out = "runs";
  std::uint64_t seed = 1;
};

int cmd_infer(const InferArgs& a) {
  const Tensor<double> image = read_ppm(a.image);
  const LoadedCheckpoint<double> peek = load_checkpoint<double>(a.ckpt);
  InferOutput res;
  if (peek.meta.precision == "f32")
    res = run_infer<float>(a.ckpt, image, a.seed);
  else
    res = run_infer<double>(a.ckpt, image, a.seed);
  const std::string dir = a.out + "/infer_" + peek.meta.config_hash;
  const std::string stem = dir + "/" + std::filesystem::path(a.image).stem().string();
  const auto written = export_visuals(res.depth, Tensor<double>(), image, Tensor<double>(),
                                      res.feat, res.refined, stem);
  std::cout << "depth range: [" << res.depth.array().minCoeff() << ", "
            << res.depth.array().maxCoeff() << "] scene units (d_max " << res.d_max << ")\n";
  for (const auto& p : written) std::cout << "wrote " << p << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  std::string grid, data, out;
};

int cmd_ablate(const AblateArgs& a) {
  const nlohmann::json grid = read_json(a.grid);
  const std::string data = !a.data.empty() ? a.data : grid.value("data", std::string());
  const std::string out = !a.out.empty() ? a.out : grid.value("out", std::string());
  if (data.empty())
    throw std::invalid_argument("ablate: no dataset given (--data flag or \"data\" grid key)");
  if (out.empty())
    throw std::invalid_argument("ablate: no output dir given (--out flag or \"out\" grid key)");
  if (!grid.contains("base")) throw std::invalid_argument("ablation grid: missing 'base' config");
  const Dataset ds = load_dataset(data);
  const std::string precision = grid.at("base").value("precision", std::string("f64"));
  if (precision == "f32")
    run_ablation<float>(grid, ds, out);
  else
    run_ablation<double>(grid, ds, out);
  std::cout << read_text(out + "/ablation.txt") << "\nfiles under " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffdepth: diffusion-based monocular depth estimation, robust to corrupted input"};
  app.require_subcommand(1);

  GenArgs g;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset with corrupted views");
  gen->add_option("--out", g.out, "Dataset directory to create")->required();
  gen->add_option("--train", g.opts.train_count, "Training samples")->capture_default_str();
  gen->add_option("--val", g.opts.val_count, "Validation samples")->capture_default_str();
  gen->add_option("--test", g.opts.test_count, "Test samples")->capture_default_str();
  gen->add_option("--width", g.opts.width, "Image width")->capture_default_str();
  gen->add_option("--height", g.opts.height, "Image height")->capture_default_str();
  gen->add_option("--d-max", g.opts.d_max, "Depth range in scene units")->capture_default_str();
  gen->add_option("--aux", g.opts.aux_count, "Auxiliary views per sample")->capture_default_str();
  gen->add_option("--seed", g.opts.seed, "Generator seed")->capture_default_str();
  gen->add_option("--kinds", g.kinds, "Corruption kinds to mix (default: all)")->delimiter(',');
  gen->add_option("--level-lo", g.opts.mix.level_lo, "Lowest severity")->capture_default_str();
  gen->add_option("--level-hi", g.opts.mix.level_hi, "Highest severity")->capture_default_str();

  TrainArgs t;
  auto* train = app.add_subcommand("train", "Train one stage of the model");
  train->add_option("--stage", t.stage, "Training stage")->required()->check(CLI::Range(0, 2));
  train->add_option("--config", t.config, "Training config (json)")
      ->required()
      ->check(CLI::ExistingFile);
  train->add_option("--data", t.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", t.out, "Directory the run directory is created under")->required();
  train->add_option("--resume", t.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--teacher", t.teacher, "Teacher checkpoint (stages 1 and 2)")
      ->check(CLI::ExistingFile);
  train->add_option("--init", t.init, "Weight initialization checkpoint")->check(CLI::ExistingFile);

  EvalArgs e;
  auto* eval = app.add_subcommand("eval", "Benchmark a checkpoint over clear and corrupted splits");
  eval->add_option("--ckpt", e.ckpt, "Checkpoint to evaluate")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", e.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--splits", e.splits, "Splits to evaluate")->delimiter(',')->capture_default_str();
  eval->add_option("--median-scale", e.median_scale, "Per-image median scaling")
      ->check(CLI::IsMember({"on", "off"}))
      ->capture_default_str();
  eval->add_option("--out", e.out, "Directory the run directory is created under")
      ->capture_default_str();

  InferArgs i;
  auto* infer = app.add_subcommand("infer", "Predict depth for one image and export panels");
  infer->add_option("--ckpt", i.ckpt, "Checkpoint to run")->required()->check(CLI::ExistingFile);
  infer->add_option("--image", i.image, "Input image (ppm)")->required()->check(CLI::ExistingFile);
  infer->add_option("--seed", i.seed, "Latent seed")->capture_default_str();
  infer->add_option("--out", i.out, "Directory the run directory is created under")
      ->capture_default_str();

  AblateArgs b;
  auto* ablate = app.add_subcommand("ablate", "Train and score a grid of config variants");
  ablate->add_option("--grid", b.grid, "Grid config (json)")->required()->check(CLI::ExistingFile);
  ablate->add_option("--data", b.data, "Dataset directory (overrides the grid's \"data\")")
      ->check(CLI::ExistingDirectory);
  ablate->add_option("--out", b.out, "Output directory (overrides the grid's \"out\")");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex);
    return code == 0 ? 0 : 2;  // bad usage is a validation error
  }

  try {
    if (*gen) return cmd_gen(g);
    if (*train) return cmd_train(t);
    if (*eval) return cmd_eval(e);
    if (*infer) return cmd_infer(i);
    if (*ablate) return cmd_ablate(b);
  } catch (const std::invalid_argument& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  } catch (const ShapeError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
