#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <tuple>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "diffdepth/image_io.hpp"
#include "diffdepth/metrics.hpp"
#include "diffdepth/synthdata.hpp"
#include "diffdepth/tensor_io.hpp"
#include "diffdepth/trainer.hpp"

// Benchmark runner and visual export: evaluates a depth predictor over the
// clear and corrupted views of the requested dataset splits, aggregates the
// standard metric suite per corruption kind and severity together with the
// degradation relative to clear input, and emits deterministic CSV / aligned
// text / gnuplot-ready files plus the raw per-image predictions the report
// can be recomputed from.

namespace diffdepth {

// ---------------------------------------------------------------------------
// Report structure

/// Label under which an augmented view is aggregated: corruption kind and
/// severity ("fog:L3"), or "uncorrupted" when the augmentation is an identity
/// (kind "none" or level 0).
inline std::string corruption_subset(const CorruptionSpec& c) {
  if (c.kind == "none" || c.level == 0) return "uncorrupted";
  return c.kind + ":L" + std::to_string(c.level);
}

/// One aggregate line of the benchmark: per-image metric means over every
/// view of `split` falling under `subset`, plus the degradation delta (this
/// row minus the split's clear row; zero on the clear row itself).
struct MetricRow {
  std::string split;
  std::string subset;  // "clear", "corrupt" (all corrupted views), "<kind>:L<n>", "uncorrupted"
  int images = 0;
  DepthMetrics mean;
  DepthMetrics delta;
};

/// Metrics of one evaluated view. Aggregate rows are arithmetic means of
/// these, so the stored per-image table makes the report recomputable.
struct ImageRow {
  int index = 0;
  std::string split;
  std::string subset;  // "clear" or the corruption_subset of the augmented view
  DepthMetrics m;
};

struct BenchmarkReport {
  std::string checkpoint_id;  // path of the evaluated checkpoint ("" for injected predictors)
  std::string config_hash;    // training config hash recorded in the checkpoint
  bool median_scale = true;
  double cap = 0.0;  // metric clamp, the dataset's depth range
  std::vector<MetricRow> rows;
  std::vector<ImageRow> images;

  const MetricRow* find(const std::string& split, const std::string& subset) const {
    for (const auto& r : rows)
      if (r.split == split && r.subset == subset) return &r;
    return nullptr;
  }
  const MetricRow& at(const std::string& split, const std::string& subset) const {
    const MetricRow* r = find(split, subset);
    if (!r)
      throw std::invalid_argument("benchmark report has no row '" + split + "/" + subset + "'");
    return *r;
  }
};

struct BenchmarkOptions {
  std::vector<std::string> splits{"test"};
  bool median_scale = true;  // resolves the scale ambiguity of self-supervised depth
  std::string out_dir;       // when set, CSV/table/prediction files are written here
};

// ---------------------------------------------------------------------------
// Aggregation and file emission

namespace bench_detail {

inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Position of a corruption kind in the canonical listing; unknown kinds sort
/// after the known ones.
inline int kind_rank(const std::string& kind) {
  const auto kinds = corruption_kinds();
  for (std::size_t i = 0; i < kinds.size(); ++i)
    if (kinds[i] == kind) return static_cast<int>(i);
  return static_cast<int>(kinds.size());
}

inline MetricRow aggregate(const std::string& split, const std::string& subset,
                           const std::vector<DepthMetrics>& ms) {
  MetricRow row;
  row.split = split;
  row.subset = subset;
  row.images = static_cast<int>(ms.size());
  for (const DepthMetrics& m : ms) {
    row.mean.abs_rel += m.abs_rel;
    row.mean.sq_rel += m.sq_rel;
    row.mean.rmse += m.rmse;
    row.mean.rmse_log += m.rmse_log;
    row.mean.a1 += m.a1;
    row.mean.a2 += m.a2;
    row.mean.a3 += m.a3;
    row.mean.valid_pixels += m.valid_pixels;
  }
  const double n = std::max<double>(1.0, static_cast<double>(ms.size()));
  row.mean.abs_rel /= n;
  row.mean.sq_rel /= n;
  row.mean.rmse /= n;
  row.mean.rmse_log /= n;
  row.mean.a1 /= n;
  row.mean.a2 /= n;
  row.mean.a3 /= n;
  return row;
}

inline void set_delta(MetricRow& row, const MetricRow& clear) {
  row.delta.abs_rel = row.mean.abs_rel - clear.mean.abs_rel;
  row.delta.sq_rel = row.mean.sq_rel - clear.mean.sq_rel;
  row.delta.rmse = row.mean.rmse - clear.mean.rmse;
  row.delta.rmse_log = row.mean.rmse_log - clear.mean.rmse_log;
  row.delta.a1 = row.mean.a1 - clear.mean.a1;
  row.delta.a2 = row.mean.a2 - clear.mean.a2;
  row.delta.a3 = row.mean.a3 - clear.mean.a3;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("benchmark: cannot write '" + path + "'");
  return os;
}

inline void write_metric_csv(const BenchmarkReport& rep, const std::string& path) {
  std::ofstream os = open_out(path);
  os << "split,subset,images,valid_pixels,abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3,"
        "d_abs_rel,d_sq_rel,d_rmse,d_rmse_log,d_a1,d_a2,d_a3\n";
  for (const auto& r : rep.rows) {
    os << r.split << ',' << r.subset << ',' << r.images << ',' << r.mean.valid_pixels;
    for (double v : {r.mean.abs_rel, r.mean.sq_rel, r.mean.rmse, r.mean.rmse_log, r.mean.a1,
                     r.mean.a2, r.mean.a3, r.delta.abs_rel, r.delta.sq_rel, r.delta.rmse,
                     r.delta.rmse_log, r.delta.a1, r.delta.a2, r.delta.a3})
      os << ',' << g17(v);
    os << '\n';
  }
  if (!os.flush()) throw std::runtime_error("benchmark: failed writing '" + path + "'");
}

inline void write_image_csv(const BenchmarkReport& rep, const std::string& path) {
  std::ofstream os = open_out(path);
  os << "index,split,subset,valid_pixels,abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3\n";
  for (const auto& r : rep.images) {
    os << r.index << ',' << r.split << ',' << r.subset << ',' << r.m.valid_pixels;
    for (double v : {r.m.abs_rel, r.m.sq_rel, r.m.rmse, r.m.rmse_log, r.m.a1, r.m.a2, r.m.a3})
      os << ',' << g17(v);
    os << '\n';
  }
  if (!os.flush()) throw std::runtime_error("benchmark: failed writing '" + path + "'");
}

inline void write_table(const BenchmarkReport& rep, const std::string& path) {
  std::ofstream os = open_out(path);
  char buf[256];
  os << "checkpoint:   " << (rep.checkpoint_id.empty() ? "(injected predictor)" : rep.checkpoint_id)
     << '\n';
  os << "config hash:  " << (rep.config_hash.empty() ? "-" : rep.config_hash) << '\n';
  std::snprintf(buf, sizeof(buf), "median scale: %s   depth cap: %g\n\n",
                rep.median_scale ? "on" : "off", rep.cap);
  os << buf;
  std::snprintf(buf, sizeof(buf), "%-6s %-26s %5s %10s  %9s %9s %9s %9s  %7s %7s %7s  %9s %9s\n",
                "split", "subset", "imgs", "pixels", "AbsRel", "SqRel", "RMSE", "RMSElog", "a1",
                "a2", "a3", "dAbsRel", "dRMSE");
  os << buf;
  for (const auto& r : rep.rows) {
    std::snprintf(buf, sizeof(buf),
                  "%-6s %-26s %5d %10lld  %9.4f %9.4f %9.4f %9.4f  %7.4f %7.4f %7.4f  %9.4f %9.4f\n",
                  r.split.c_str(), r.subset.c_str(), r.images, r.mean.valid_pixels, r.mean.abs_rel,
                  r.mean.sq_rel, r.mean.rmse, r.mean.rmse_log, r.mean.a1, r.mean.a2, r.mean.a3,
                  r.delta.abs_rel, r.delta.rmse);
    os << buf;
  }
  if (!os.flush()) throw std::runtime_error("benchmark: failed writing '" + path + "'");
}

/// Gnuplot-ready degradation curves: one block per (split, corruption kind)
/// with columns `level  d_abs_rel  d_rmse  d_a1`.
inline void write_degradation(const BenchmarkReport& rep, const std::string& path) {
  std::ofstream os = open_out(path);
  std::string block;  // "<split> <kind>" of the block being emitted
  for (const auto& r : rep.rows) {
    const auto pos = r.subset.rfind(":L");
    if (pos == std::string::npos) continue;  // only kind-by-level rows plot
    const std::string kind = r.subset.substr(0, pos);
    const int level = std::stoi(r.subset.substr(pos + 2));
    const std::string key = r.split + " " + kind;
    if (key != block) {
      if (!block.empty()) os << '\n';
      os << "# split=" << r.split << " kind=" << kind << '\n';
      block = key;
    }
    os << level << ' ' << g17(r.delta.abs_rel) << ' ' << g17(r.delta.rmse) << ' '
       << g17(r.delta.a1) << '\n';
  }
  if (!os.flush()) throw std::runtime_error("benchmark: failed writing '" + path + "'");
}

}  // namespace bench_detail

// ---------------------------------------------------------------------------
// Benchmark runner

/// Maps a dataset sample and one of its views (clear or augmented image,
/// [3,H,W]) to predicted depth in scene units, [1,H,W].
using DepthPredictor = std::function<Tensor<double>(const Sample&, const Tensor<double>&)>;

/// Evaluates `predict` on the clear and augmented view of every sample in the
/// requested splits. Row order per split: "clear", "corrupt" (aggregate over
/// all corrupted views, when any), then each corruption kind:level in
/// canonical kind order and ascending severity, then "uncorrupted" views (an
/// identity augmentation) last. With `opt.out_dir` set, writes metrics.csv,
/// per_image.csv, metrics.txt, degradation.dat, and every raw prediction
/// under predictions/ — all byte-deterministic for a fixed predictor.
inline BenchmarkReport run_benchmark_with(const DepthPredictor& predict, const Dataset& ds,
                                          const BenchmarkOptions& opt,
                                          const std::string& checkpoint_id = std::string(),
                                          const std::string& config_hash = std::string()) {
  if (opt.splits.empty()) throw std::invalid_argument("benchmark: no splits requested");
  BenchmarkReport rep;
  rep.checkpoint_id = checkpoint_id;
  rep.config_hash = config_hash;
  rep.median_scale = opt.median_scale;
  rep.cap = ds.d_max;
  const bool dump = !opt.out_dir.empty();
  if (dump) std::filesystem::create_directories(opt.out_dir + "/predictions");

  for (const std::string& split : opt.splits) {
    const auto samples = ds.split(split);
    if (samples.empty())
      throw std::invalid_argument("benchmark: split '" + split + "' is empty or unknown");
    std::vector<DepthMetrics> clear_ms, corrupt_ms;
    // keyed (kind rank, level, label) so iteration yields the canonical order
    std::map<std::tuple<int, int, std::string>, std::vector<DepthMetrics>> groups;
    for (const Sample* s : samples) {
      const Tensor<double> pred_clear = predict(*s, s->clear);
      const Tensor<double> pred_aug = predict(*s, s->aug);
      const DepthMetrics mc = compute_depth_metrics(pred_clear, s->depth, ds.d_max, opt.median_scale);
      const DepthMetrics ma = compute_depth_metrics(pred_aug, s->depth, ds.d_max, opt.median_scale);
      const std::string sub = corruption_subset(s->corruption);
      rep.images.push_back({s->index, split, "clear", mc});
      rep.images.push_back({s->index, split, sub, ma});
      clear_ms.push_back(mc);
      if (sub == "uncorrupted") {
        groups[{std::numeric_limits<int>::max(), 0, sub}].push_back(ma);
      } else {
        groups[{bench_detail::kind_rank(s->corruption.kind), s->corruption.level, sub}].push_back(
            ma);
        corrupt_ms.push_back(ma);
      }
      if (dump) {
        const std::string stem =
            opt.out_dir + "/predictions/" + split + "_" + std::to_string(s->index);
        save_tensor(stem + "_clear.bin", pred_clear);
        save_tensor(stem + "_aug.bin", pred_aug);
      }
    }
    const MetricRow clear_row = bench_detail::aggregate(split, "clear", clear_ms);
    rep.rows.push_back(clear_row);
    if (!corrupt_ms.empty()) {
      MetricRow all = bench_detail::aggregate(split, "corrupt", corrupt_ms);
      bench_detail::set_delta(all, clear_row);
      rep.rows.push_back(all);
    }
    for (const auto& [key, ms] : groups) {
      MetricRow row = bench_detail::aggregate(split, std::get<2>(key), ms);
      bench_detail::set_delta(row, clear_row);
      rep.rows.push_back(row);
    }
  }

  if (dump) {
    bench_detail::write_metric_csv(rep, opt.out_dir + "/metrics.csv");
    bench_detail::write_image_csv(rep, opt.out_dir + "/per_image.csv");
    bench_detail::write_table(rep, opt.out_dir + "/metrics.txt");
    bench_detail::write_degradation(rep, opt.out_dir + "/degradation.dat");
  }
  return rep;
}

/// Loads a checkpoint and benchmarks its deterministic sampler. Every view of
/// a sample starts from the same latent (seeded per sample) so the clear and
/// corrupted predictions differ only through the conditioning image. The
/// checkpoint must have been trained for the dataset's depth range.
template <typename S>
BenchmarkReport run_benchmark(const std::string& ckpt_path, const Dataset& ds,
                              const BenchmarkOptions& opt) {
  auto loaded = load_networks<S>(ckpt_path);
  const NetworkSet<S>& nets = loaded.first;
  const LoadedCheckpoint<S>& ck = loaded.second;
  if (!ck.meta.extra.contains("config"))
    throw std::runtime_error("checkpoint '" + ckpt_path + "' carries no training config");
  const TrainConfig cfg = ck.meta.extra.at("config").template get<TrainConfig>();
  if (ck.meta.extra.contains("d_max")) {
    const double trained = ck.meta.extra.at("d_max").template get<double>();
    if (trained != ds.d_max)
      throw std::invalid_argument("checkpoint depth range d_max=" + bench_detail::g17(trained) +
                                  " does not match dataset d_max=" + bench_detail::g17(ds.d_max));
  }
  const DiffusionSchedule sched =
      DiffusionSchedule::linear(cfg.t_train, cfg.beta_start, cfg.beta_end, cfg.infer_count);
  const DepthPredictor predict = [&](const Sample& s, const Tensor<double>& image) {
    const Tensor<S> img = cast<S>(image);
    const Tensor<S> dn =
        predict_depth_norm(nets, img, sched, derive_seed(s.seed, kStreamEvalLatent), cfg.odr);
    Tensor<double> depth = cast<double>(dn);
    depth.array() *= ds.d_max;
    return depth;
  };
  return run_benchmark_with(predict, ds, opt, ckpt_path, ck.meta.config_hash);
}

// ---------------------------------------------------------------------------
// Single-image inference

/// Everything a forward pass yields for visualization. `feat` is defined only
/// when the checkpoint conditions the denoiser on the extracted feature map.
struct InferOutput {
  Tensor<double> depth;       // scene units, [1,H,W]
  Tensor<double> depth_norm;  // sampler output before scaling
  Tensor<double> feat;        // 1-channel feature panel (joint conditioning only)
  Tensor<double> refined;     // restored image from the refiner head
  double d_max = 1.0;
};

/// Runs one image [3,H,W] in [0,1] through a checkpoint: deterministic
/// denoising from the seeded latent plus the feature and refiner panels.
template <typename S>
InferOutput run_infer(const std::string& ckpt_path, const Tensor<double>& image,
                      std::uint64_t latent_seed) {
  auto loaded = load_networks<S>(ckpt_path);
  const NetworkSet<S>& nets = loaded.first;
  const LoadedCheckpoint<S>& ck = loaded.second;
  if (!ck.meta.extra.contains("config"))
    throw std::runtime_error("checkpoint '" + ckpt_path + "' carries no training config");
  const TrainConfig cfg = ck.meta.extra.at("config").template get<TrainConfig>();
  const DiffusionSchedule sched =
      DiffusionSchedule::linear(cfg.t_train, cfg.beta_start, cfg.beta_end, cfg.infer_count);
  NoGradGuard ng;
  const Tensor<S> img = cast<S>(image);
  InferOutput out;
  out.d_max = ck.meta.extra.value("d_max", 1.0);
  const Tensor<S> dn = predict_depth_norm(nets, img, sched, latent_seed, cfg.odr);
  out.depth_norm = cast<double>(dn);
  out.depth = cast<double>(dn);
  out.depth.array() *= out.d_max;
  if (cfg.fic) out.feat = cast<double>(nets.extractor.forward(img));
  out.refined = cast<double>(nets.refiner.forward(img));
  return out;
}

// ---------------------------------------------------------------------------
// Visual export

/// Writes the visualization panels of one example next to `path_stem`:
/// single-channel maps (depth, ground truth, feature) as min-max normalized
/// PGM, RGB images (input, augmented input, refined) as PPM clamped to [0,1],
/// plus "<stem>_ranges.txt" recording each panel's raw value range.
/// Undefined tensors are skipped (e.g. no feature panel without joint
/// conditioning, no ground truth at inference). Returns the written paths.
inline std::vector<std::string> export_visuals(const Tensor<double>& pred,
                                               const Tensor<double>& gt,
                                               const Tensor<double>& image,
                                               const Tensor<double>& aug,
                                               const Tensor<double>& feat,
                                               const Tensor<double>& refined,
                                               const std::string& path_stem) {
  const auto parent = std::filesystem::path(path_stem).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::vector<std::string> written;
  std::string ranges = "panel min max\n";
  const auto panel = [&](const Tensor<double>& t, const std::string& name) {
    if (!t.defined()) return;
    if (t.rank() != 3 || (t.dim(0) != 1 && t.dim(0) != 3))
      throw std::invalid_argument("export_visuals: panel '" + name + "' must be [1|3,H,W]");
    const double lo = t.array().minCoeff();
    const double hi = t.array().maxCoeff();
    std::string path = path_stem + "_" + name;
    if (t.dim(0) == 1) {
      path += ".pgm";
      write_pgm(path, normalize_for_display(t));
    } else {
      path += ".ppm";
      Tensor<double> c = cast<double>(t);
      c.array() = c.array().max(0.0).min(1.0);
      write_ppm(path, c);
    }
    ranges += name + " " + bench_detail::g17(lo) + " " + bench_detail::g17(hi) + "\n";
    written.push_back(path);
  };
  panel(pred, "pred");
  panel(gt, "gt");
  panel(image, "image");
  panel(aug, "aug");
  panel(feat, "feat");
  panel(refined, "refined");
  const std::string sidecar = path_stem + "_ranges.txt";
  std::ofstream os = bench_detail::open_out(sidecar);
  os << ranges;
  if (!os.flush()) throw std::runtime_error("export_visuals: failed writing '" + sidecar + "'");
  written.push_back(sidecar);
  return written;
}

// ---------------------------------------------------------------------------
// Ablation grids

/// One (variant, seed) cell of an ablation grid: where it trained and how it
/// scored on the evaluation split.
struct AblationEntry {
  std::string variant;
  int seed = 0;
  int stage = 0;
  std::string config_hash;
  std::string run_dir;
  std::string checkpoint;
  double clear_abs_rel = 0.0;
  double corrupt_abs_rel = 0.0;
  double gap() const { return corrupt_abs_rel - clear_abs_rel; }
};

struct AblationResult {
  std::vector<AblationEntry> entries;
};

namespace bench_detail {

inline void write_ablation_files(const AblationResult& res, const std::string& out_dir) {
  std::ofstream csv = open_out(out_dir + "/ablation.csv");
  csv << "variant,seed,stage,config_hash,checkpoint,clear_abs_rel,corrupt_abs_rel,gap\n";
  for (const auto& e : res.entries)
    csv << e.variant << ',' << e.seed << ',' << e.stage << ',' << e.config_hash << ','
        << e.checkpoint << ',' << g17(e.clear_abs_rel) << ',' << g17(e.corrupt_abs_rel) << ','
        << g17(e.gap()) << '\n';
  if (!csv.flush()) throw std::runtime_error("ablation: failed writing ablation.csv");

  std::ofstream txt = open_out(out_dir + "/ablation.txt");
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%-20s %4s %5s  %12s %12s %12s\n", "variant", "seed", "stage",
                "clearAbsRel", "corrAbsRel", "gap");
  txt << buf;
  for (const auto& e : res.entries) {
    std::snprintf(buf, sizeof(buf), "%-20s %4d %5d  %12.4f %12.4f %12.4f\n", e.variant.c_str(),
                  e.seed, e.stage, e.clear_abs_rel, e.corrupt_abs_rel, e.gap());
    txt << buf;
  }
  if (!txt.flush()) throw std::runtime_error("ablation: failed writing ablation.txt");
}

}  // namespace bench_detail

/// Trains and evaluates every (variant, seed) combination of a flag matrix.
/// Grid schema:
///   {
///     "base": { <training config> },        required
///     "variants": [ {"name": "...", "overrides": { partial config },
///                    "teacher": "optional per-variant path"} ],  required
///     "teacher": "default teacher checkpoint",   optional
///     "seeds": [1, 2, 3],                        optional (default: base seed)
///     "eval_split": "val",                       optional
///     "median_scale": true                       optional
///   }
/// Overrides are deep-merged into the base config; each run lands in
/// `<out_dir>/<variant>_s<seed>_<config hash>/` and the summary table in
/// `<out_dir>/ablation.{csv,txt}`.
template <typename S>
AblationResult run_ablation(const nlohmann::json& grid, const Dataset& ds,
                            const std::string& out_dir) {
  if (!grid.contains("base")) throw std::invalid_argument("ablation grid: missing 'base' config");
  if (!grid.contains("variants") || !grid.at("variants").is_array() || grid.at("variants").empty())
    throw std::invalid_argument("ablation grid: missing or empty 'variants'");
  const std::string default_teacher = grid.value("teacher", std::string());
  const std::string eval_split = grid.value("eval_split", std::string("val"));
  const bool median = grid.value("median_scale", true);
  std::vector<int> seeds;
  if (grid.contains("seeds")) seeds = grid.at("seeds").get<std::vector<int>>();
  const std::string expect_precision = std::is_same_v<S, double> ? "f64" : "f32";

  std::filesystem::create_directories(out_dir);
  AblationResult out;
  for (const auto& var : grid.at("variants")) {
    const std::string name = var.at("name").get<std::string>();
    nlohmann::json cj = grid.at("base");
    if (var.contains("overrides")) cj.merge_patch(var.at("overrides"));
    std::vector<int> vseeds = seeds;
    if (vseeds.empty()) vseeds.push_back(cj.value("seed", 1));
    for (int seed : vseeds) {
      cj["seed"] = seed;
      const TrainConfig cfg = config_with_defaults(cj);
      if (cfg.precision != expect_precision)
        throw std::invalid_argument("ablation grid: variant '" + name + "' wants precision " +
                                    cfg.precision + " but the runner is " + expect_precision);
      RunPaths paths;
      paths.out_dir = out_dir + "/" + name + "_s" + std::to_string(seed) + "_" + config_hash(cfg);
      paths.teacher = var.value("teacher", default_teacher);
      const StageResult res = Trainer<S>(ds, cfg).run(paths);

      BenchmarkOptions bo;
      bo.splits = {eval_split};
      bo.median_scale = median;
      bo.out_dir = paths.out_dir + "/eval";
      const BenchmarkReport rep = run_benchmark<S>(res.checkpoint, ds, bo);

      AblationEntry e;
      e.variant = name;
      e.seed = seed;
      e.stage = cfg.stage;
      e.config_hash = config_hash(cfg);
      e.run_dir = paths.out_dir;
      e.checkpoint = res.checkpoint;
      e.clear_abs_rel = rep.at(eval_split, "clear").mean.abs_rel;
      const MetricRow* corr = rep.find(eval_split, "corrupt");
      e.corrupt_abs_rel = corr ? corr->mean.abs_rel : e.clear_abs_rel;
      out.entries.push_back(e);
    }
  }
  bench_detail::write_ablation_files(out, out_dir);
  return out;
}

}  // namespace diffdepth
