#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diffdepth/diffusion.hpp"
#include "diffdepth/losses.hpp"
#include "diffdepth/metrics.hpp"
#include "diffdepth/networks.hpp"
#include "diffdepth/synthdata.hpp"

// Two-stage self-distilled training.
//
// Stage 0 bootstraps a teacher on clear images alone: the denoiser learns
// against a cached pseudo-depth target (initialized flat, refreshed from the
// model's own inference every few epochs) plus the photometric and smoothness
// losses. Stage 1 trains a student against the frozen stage-0 teacher with
// the noise-level contrast and the masked distillation; stage 2 continues
// from the stage-1 weights against a frozen stage-1 teacher and adds the
// feature- and image-level contrast terms.

namespace diffdepth {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Per-sample RNG stream tags (derive_seed second argument). Streams below
/// 100 are reserved by dataset generation; training and evaluation use these.
inline constexpr std::uint64_t kStreamPseudoDepth = 201;
inline constexpr std::uint64_t kStreamEvalLatent = 202;

struct TrainConfig {
  int stage = 1;
  int epochs = 30;
  int batch_size = 4;
  double lr = 1e-3;
  double weight_decay = 1e-2;
  double clip_norm = 10.0;
  std::uint64_t seed = 1;
  std::string precision = "f64";  // f64 | f32

  // ablation switches
  bool pde = true;  // adaptive photometric mask + BerHu distillation
  bool odr = true;  // diffusion in logit space (outputs confined to (0,1))
  bool fic = true;  // condition on image + feature, not feature alone
  TrinityMode trinity_mode = TrinityMode::trinity;
  std::vector<std::string> levels = {"NIS", "DF", "IMG"};

  // diffusion schedule
  int t_train = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int infer_count = 20;

  // stage-0 bootstrap
  int refresh_every = 5;        // epochs between pseudo-depth cache refreshes
  double bootstrap_gate = 0.5;  // required clear-val AbsRel of the teacher

  NetworkConfig network;
  LossWeights weights;

  bool level_on(const std::string& name) const {
    return std::find(levels.begin(), levels.end(), name) != levels.end();
  }

  void validate() const {
    if (stage < 0 || stage > 2) throw std::invalid_argument("config: stage must be 0, 1, or 2");
    if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("config: lr must be positive");
    if (weight_decay < 0) throw std::invalid_argument("config: weight_decay must be >= 0");
    if (!(clip_norm > 0)) throw std::invalid_argument("config: clip_norm must be positive");
    if (precision != "f64" && precision != "f32")
      throw std::invalid_argument("config: precision must be f64 or f32");
    if (refresh_every < 1) throw std::invalid_argument("config: refresh_every must be >= 1");
    for (const auto& l : levels)
      if (l != "NIS" && l != "DF" && l != "IMG")
        throw std::invalid_argument("config: unknown contrast level '" + l + "'");
    if (fic != network.image_conditioning)
      throw std::invalid_argument("config: fic flag and network.image_conditioning disagree");
    DiffusionSchedule::linear(t_train, beta_start, beta_end, infer_count);  // validates
  }
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"ssim_w", w.ssim_w},
                     {"l1_w", w.l1_w},
                     {"c1", w.c1},
                     {"c2", w.c2},
                     {"nis_pair", w.nis_pair},
                     {"nis_anchor", w.nis_anchor},
                     {"feat_pair", w.feat_pair},
                     {"feat_anchor", w.feat_anchor},
                     {"img_anchor", w.img_anchor},
                     {"img_pair", w.img_pair},
                     {"edge_rho", w.edge_rho},
                     {"multilevel_theta", w.multilevel_theta},
                     {"mask_lambda", w.mask_lambda},
                     {"berhu_frac", w.berhu_frac}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  w = LossWeights{};
  j.at("ssim_w").get_to(w.ssim_w);
  j.at("l1_w").get_to(w.l1_w);
  j.at("c1").get_to(w.c1);
  j.at("c2").get_to(w.c2);
  j.at("nis_pair").get_to(w.nis_pair);
  j.at("nis_anchor").get_to(w.nis_anchor);
  j.at("feat_pair").get_to(w.feat_pair);
  j.at("feat_anchor").get_to(w.feat_anchor);
  j.at("img_anchor").get_to(w.img_anchor);
  j.at("img_pair").get_to(w.img_pair);
  j.at("edge_rho").get_to(w.edge_rho);
  j.at("multilevel_theta").get_to(w.multilevel_theta);
  j.at("mask_lambda").get_to(w.mask_lambda);
  j.at("berhu_frac").get_to(w.berhu_frac);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"stage", c.stage},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"clip_norm", c.clip_norm},
                     {"seed", c.seed},
                     {"precision", c.precision},
                     {"pde", c.pde},
                     {"odr", c.odr},
                     {"fic", c.fic},
                     {"trinity_mode", to_string(c.trinity_mode)},
                     {"levels", c.levels},
                     {"t_train", c.t_train},
                     {"beta_start", c.beta_start},
                     {"beta_end", c.beta_end},
                     {"infer_count", c.infer_count},
                     {"refresh_every", c.refresh_every},
                     {"bootstrap_gate", c.bootstrap_gate},
                     {"network", c.network.to_json()},
                     {"weights", c.weights}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  j.at("stage").get_to(c.stage);
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr").get_to(c.lr);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("clip_norm").get_to(c.clip_norm);
  j.at("seed").get_to(c.seed);
  j.at("precision").get_to(c.precision);
  j.at("pde").get_to(c.pde);
  j.at("odr").get_to(c.odr);
  j.at("fic").get_to(c.fic);
  c.trinity_mode = trinity_mode_from_string(j.at("trinity_mode").get<std::string>());
  j.at("levels").get_to(c.levels);
  j.at("t_train").get_to(c.t_train);
  j.at("beta_start").get_to(c.beta_start);
  j.at("beta_end").get_to(c.beta_end);
  j.at("infer_count").get_to(c.infer_count);
  j.at("refresh_every").get_to(c.refresh_every);
  j.at("bootstrap_gate").get_to(c.bootstrap_gate);
  c.network = NetworkConfig::from_json(j.at("network"));
  j.at("weights").get_to(c.weights);
}

namespace config_detail {
inline void check_known_keys(const nlohmann::json& user, const nlohmann::json& known,
                             const std::string& prefix) {
  for (const auto& [k, v] : user.items()) {
    if (!known.contains(k))
      throw std::invalid_argument("config: unknown key '" + prefix + k + "'");
    if (v.is_object() && known.at(k).is_object())
      check_known_keys(v, known.at(k), prefix + k + ".");
  }
}
}  // namespace config_detail

/// Builds a config from possibly-partial JSON: missing keys keep their
/// defaults, present ones (nested included) override them. Unknown keys are
/// rejected so a typo cannot silently fall back to a default.
inline TrainConfig config_with_defaults(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  nlohmann::json full = TrainConfig{};
  config_detail::check_known_keys(j, full, "");
  full.merge_patch(j);
  return full.get<TrainConfig>();
}

/// FNV-1a over the canonical JSON dump: stable across runs and platforms,
/// short enough to embed in directory names.
inline std::string config_hash(const TrainConfig& c) {
  const std::string dump = nlohmann::json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : dump) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// Optimizer: decoupled weight decay, bias-corrected moments.
// ---------------------------------------------------------------------------

template <typename S>
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<ParamRef<S>> params, double weight_decay)
      : params_(std::move(params)), wd_(weight_decay) {
    for (auto& p : params_) {
      m_.push_back(Tensor<S>::zeros(p.tensor.shape()));
      v_.push_back(Tensor<S>::zeros(p.tensor.shape()));
    }
  }

  /// Global L2 norm over all accumulated gradients (missing grads count 0).
  double grad_norm() const {
    double sq = 0;
    for (const auto& p : params_)
      if (p.tensor.has_grad()) sq += static_cast<double>(p.tensor.grad().array().square().sum());
    return std::sqrt(sq);
  }

  /// One update with the supplied (already decayed) learning rate. Gradients
  /// are multiplied by `grad_scale` as they are read, which is how norm
  /// clipping is applied. Parameters without an accumulated gradient are
  /// treated as having gradient zero: their moments decay and weight decay
  /// still applies.
  void step(double lr_now, double grad_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<S>& w = params_[i].tensor;
      Eigen::Array<S, Eigen::Dynamic, 1> g =
          w.has_grad()
              ? Eigen::Array<S, Eigen::Dynamic, 1>(w.grad().array() * static_cast<S>(grad_scale))
              : Eigen::Array<S, Eigen::Dynamic, 1>::Zero(w.size());
      m_[i].array() = static_cast<S>(beta1_) * m_[i].array() + static_cast<S>(1 - beta1_) * g;
      v_[i].array() =
          static_cast<S>(beta2_) * v_[i].array() + static_cast<S>(1 - beta2_) * g.square();
      Eigen::Array<S, Eigen::Dynamic, 1> upd =
          (m_[i].array() / static_cast<S>(bc1)) /
              ((v_[i].array() / static_cast<S>(bc2)).sqrt() + static_cast<S>(eps_)) +
          static_cast<S>(wd_) * w.array();
      w.update_value(w.array() - static_cast<S>(lr_now) * upd);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::int64_t steps_taken() const { return t_; }

  /// Moment tensors under checkpoint-stable names.
  std::vector<std::pair<std::string, Tensor<S>>> state_tensors() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.emplace_back("opt.m." + params_[i].name, m_[i]);
      out.emplace_back("opt.v." + params_[i].name, v_[i]);
    }
    return out;
  }

  void restore(const LoadedCheckpoint<S>& ck, std::int64_t steps) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].update_value(checkpoint_tensor(ck, "opt.m." + params_[i].name).array());
      v_[i].update_value(checkpoint_tensor(ck, "opt.v." + params_[i].name).array());
    }
    t_ = steps;
  }

 private:
  static const Tensor<S>& checkpoint_tensor(const LoadedCheckpoint<S>& ck,
                                            const std::string& name) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end())
      throw std::runtime_error("optimizer: checkpoint is missing tensor '" + name + "'");
    return it->second;
  }

  std::vector<ParamRef<S>> params_;
  std::vector<Tensor<S>> m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_ = 0.0;
  std::int64_t t_ = 0;
};

/// Half-cosine decay from `lr` to 0 over `total_steps`; `step` counts from 0.
inline double cosine_lr(double lr, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return lr * 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846));
}

// ---------------------------------------------------------------------------
// Per-sample training data and teacher caches
// ---------------------------------------------------------------------------

/// Dataset sample converted to the training scalar type once up front.
template <typename S>
struct TrainSample {
  const Sample* meta = nullptr;  // poses, seeds, split bookkeeping
  Tensor<S> clear, aug;          // [3,H,W]
  std::vector<Tensor<S>> aux;    // clean auxiliary frames
};

/// `clear_only` substitutes the clear image for the corrupted one, which is
/// how the stage-0 bootstrap sees the dataset.
template <typename S>
std::vector<TrainSample<S>> make_train_samples(const Dataset& ds, const std::string& split,
                                               bool clear_only) {
  std::vector<TrainSample<S>> out;
  for (const Sample* s : ds.split(split)) {
    TrainSample<S> t;
    t.meta = s;
    t.clear = cast<S>(s->clear);
    t.aug = clear_only ? t.clear : cast<S>(s->aug);
    for (const auto& a : s->aux) t.aux.push_back(cast<S>(a));
    out.push_back(std::move(t));
  }
  return out;
}

/// Runs the full deterministic sampler on one image and returns normalized
/// depth in (0,1) (or the raw latent when logit-space diffusion is off).
/// Graph-free; the latent seed fixes the starting noise.
template <typename S>
Tensor<S> predict_depth_norm(const NetworkSet<S>& nets, const Tensor<S>& image,
                             const DiffusionSchedule& sched, std::uint64_t latent_seed, bool odr) {
  NoGradGuard ng;
  Tensor<S> cond = nets.condition(image);
  auto model = [&](const Tensor<S>& z, int tau) { return nets.denoiser.forward(z, tau, cond); };
  Rng rng(latent_seed);
  return denoise_depth<S>(model, {1, image.dim(1), image.dim(2)}, sched, rng, odr);
}

/// Normalized depth as consumed by the photometric, distillation, and
/// smoothness losses. The logit transform already confines its output to
/// [eps, 1-eps]; without it the raw estimate is unbounded, so it is clamped
/// to the same interval — warping or smoothing a non-positive depth is
/// meaningless. Inference output stays unclamped either way.
template <typename S>
Tensor<S> losses_depth_norm(const Tensor<S>& z0, bool odr) {
  return odr ? from_latent(z0)
             : clamp(z0, static_cast<S>(kDepthEps), static_cast<S>(1.0 - kDepthEps));
}

/// Everything the frozen teacher contributes to a stage, precomputed once:
/// pseudo-depth targets, their latents, the photometric maps behind the
/// adaptive mask, and (stage 2) clear-image features. All graph-free.
template <typename S>
struct TeacherCache {
  std::vector<Tensor<S>> depth_norm;  // [1,H,W] in (0,1)
  std::vector<Tensor<S>> latent;      // diffusion target z0
  std::vector<Tensor<S>> min_ph;      // min-over-aux teacher photometric map
  std::vector<Tensor<S>> feat;        // teacher features F_T(I), stage 2 only
};

template <typename S>
TeacherCache<S> build_teacher_cache(const NetworkSet<S>& teacher,
                                    const std::vector<TrainSample<S>>& samples,
                                    const CameraIntrinsics& camera, double d_max,
                                    const DiffusionSchedule& sched, const TrainConfig& cfg,
                                    bool with_features) {
  NoGradGuard ng;
  TeacherCache<S> cache;
  const LossWeights& w = cfg.weights;
  for (const auto& smp : samples) {
    Tensor<S> dn = predict_depth_norm(teacher, smp.clear, sched,
                                      derive_seed(smp.meta->seed, kStreamPseudoDepth), cfg.odr);
    Tensor<S> d_losses = losses_depth_norm(dn, cfg.odr);
    Tensor<S> depth_units = scalar_mul(d_losses, static_cast<S>(d_max));
    std::vector<Tensor<S>> maps, masks;
    for (std::size_t a = 0; a < smp.aux.size(); ++a) {
      WarpResult<S> wr = synthesize_view(smp.aux[a], depth_units, smp.meta->poses[a], camera);
      maps.push_back(photometric_map(smp.clear, wr.image, w));
      masks.push_back(wr.mask);
    }
    MinMapResult<S> mv = min_valid_map(maps, masks);
    cache.depth_norm.push_back(d_losses);
    cache.latent.push_back(cfg.odr ? to_latent(dn) : dn);
    cache.min_ph.push_back(mv.map);  // invalid pixels carry the +1e6 penalty
    if (with_features) cache.feat.push_back(teacher.extractor.forward(smp.clear));
  }
  return cache;
}

// ---------------------------------------------------------------------------
// The per-sample loss assembly shared by training, tests, and ablations.
// ---------------------------------------------------------------------------

/// Graph-free inputs that stand in for the teacher on one sample.
template <typename S>
struct PseudoTargets {
  Tensor<S> latent;        // diffusion target z0
  Tensor<S> depth_norm;    // distillation target; undefined in stage 0
  Tensor<S> mask;          // adaptive (or all-ones) mask, [1,H,W]
  Tensor<S> teacher_feat;  // F_T(I); defined only when stage 2 uses it
};

/// One sample's loss terms for the configured stage. `tau` and `eps` are the
/// shared diffusion draw for both branches. Only the augmented branch drives
/// the depth estimate and the losses derived from it; the clear branch is
/// evaluated only when an active contrast term consumes it.
template <typename S>
StageParts<S> sample_parts(const NetworkSet<S>& nets, const TrainSample<S>& smp,
                           const PseudoTargets<S>& tgt, const CameraIntrinsics& camera,
                           double d_max, const DiffusionSchedule& sched, const TrainConfig& cfg,
                           int tau, const Tensor<S>& eps) {
  const LossWeights& w = cfg.weights;
  const int stage = cfg.stage;
  const TrinityMode mode = stage >= 1 ? cfg.trinity_mode : TrinityMode::off;
  const bool nis_on = stage >= 1 && cfg.level_on("NIS");
  const bool df_on = stage >= 2 && cfg.level_on("DF");
  const bool img_on = stage >= 2 && cfg.level_on("IMG");
  const bool need_eps_clear = nis_on && mode != TrinityMode::off;
  const bool need_feat_clear = need_eps_clear || (df_on && mode != TrinityMode::off);

  // conditions; the extractor outputs double as the feature-level terms
  Tensor<S> feat_aug = nets.extractor.forward(smp.aug);
  Tensor<S> cond_aug = cfg.fic ? concat_channels<S>({smp.aug, feat_aug}) : feat_aug;

  Tensor<S> z_tau = q_sample(tgt.latent, tau, eps, sched);
  Tensor<S> eps_aug = nets.denoiser.forward(z_tau, tau, cond_aug);

  Tensor<S> feat_clear, eps_clear;
  if (need_feat_clear) feat_clear = nets.extractor.forward(smp.clear);
  if (need_eps_clear) {
    Tensor<S> cond_clear = cfg.fic ? concat_channels<S>({smp.clear, feat_clear}) : feat_clear;
    eps_clear = nets.denoiser.forward(z_tau, tau, cond_clear);
  }

  StageParts<S> parts;
  parts.nis = trinity_noise(eps_aug, eps_clear, eps, mode, nis_on, w);

  Tensor<S> z0_hat = predict_z0(z_tau, eps_aug, tau, sched);
  Tensor<S> d_norm = losses_depth_norm(z0_hat, cfg.odr);
  Tensor<S> depth_units = scalar_mul(d_norm, static_cast<S>(d_max));

  std::vector<Tensor<S>> maps, masks;
  for (std::size_t a = 0; a < smp.aux.size(); ++a) {
    WarpResult<S> wr = synthesize_view(smp.aux[a], depth_units, smp.meta->poses[a], camera);
    maps.push_back(photometric_map(smp.clear, wr.image, w));
    masks.push_back(wr.mask);
  }
  MinMapResult<S> mv = min_valid_map(maps, masks);
  parts.ph = masked_mean(mv.map, mul(mv.mask, tgt.mask));

  parts.dis = tgt.depth_norm.defined()
                  ? distill_loss(d_norm, tgt.depth_norm, tgt.mask, w.berhu_frac, cfg.pde)
                  : Tensor<S>::scalar(S(0));

  parts.edge = edge_aware_smoothness(d_norm, smp.clear);

  if (stage >= 2) {
    parts.feat = trinity_feature(feat_clear, feat_aug, tgt.teacher_feat, mode, df_on, w);
    Tensor<S> refined_aug, refined_clear;
    if (img_on && mode != TrinityMode::off) {
      refined_aug = nets.refiner.forward(smp.aug);
      refined_clear = nets.refiner.forward(smp.clear);
    }
    parts.img = trinity_image(refined_aug, refined_clear, smp.clear, mode, img_on, w);
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Stage orchestration
// ---------------------------------------------------------------------------

struct RunPaths {
  std::string out_dir;  // checkpoints and the training log land here
  std::string teacher;  // frozen teacher checkpoint (stages 1 and 2)
  std::string init;     // student initialization; defaults to `teacher`
  std::string resume;   // checkpoint of an interrupted identical run

  /// Simulated interruption: stop cleanly after this many epochs (0 = train
  /// to cfg.epochs). Not part of the config, so a resumed run still matches
  /// the original config hash.
  int stop_after_epoch = 0;
};

struct StageResult {
  std::string checkpoint;  // final checkpoint path
  std::vector<LossReport> log;
  double val_abs_rel = 0;  // clear-split validation AbsRel of the result
};

/// Mean validation AbsRel on clear images with median scaling — the
/// bootstrap gate and the training smoke tests both read depth through this.
template <typename S>
double eval_clear_abs_rel(const NetworkSet<S>& nets, const Dataset& ds, const std::string& split,
                          const DiffusionSchedule& sched, bool odr) {
  double sum = 0;
  int n = 0;
  for (const Sample* s : ds.split(split)) {
    Tensor<S> img = cast<S>(s->clear);
    Tensor<S> dn =
        predict_depth_norm(nets, img, sched, derive_seed(s->seed, kStreamEvalLatent), odr);
    Tensor<double> pred = scalar_mul(cast<double>(dn), ds.d_max);
    sum += compute_depth_metrics(pred, s->depth, ds.d_max, true).abs_rel;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("eval_clear_abs_rel: empty split '" + split + "'");
  return sum / n;
}

template <typename S>
class Trainer {
 public:
  Trainer(const Dataset& ds, TrainConfig cfg) : ds_(ds), cfg_(std::move(cfg)) {
    cfg_.validate();
    sched_ =
        DiffusionSchedule::linear(cfg_.t_train, cfg_.beta_start, cfg_.beta_end, cfg_.infer_count);
  }

  StageResult run(const RunPaths& paths) {
    std::filesystem::create_directories(paths.out_dir);
    const std::string hash = config_hash(cfg_);

    // --- networks ----------------------------------------------------------
    Rng init_rng(cfg_.seed);
    NetworkSet<S> nets(cfg_.network, init_rng);
    NetworkSet<S> teacher;
    bool have_teacher = false;
    if (cfg_.stage >= 1) {
      if (paths.teacher.empty())
        throw std::invalid_argument("trainer: stage " + std::to_string(cfg_.stage) +
                                    " requires a teacher checkpoint");
      auto [tnets, tck] = load_networks<S>(paths.teacher);
      if (cfg_.stage == 2 && tck.meta.stage < 1)
        throw std::invalid_argument("trainer: stage 2 requires a stage-1 teacher, got stage " +
                                    std::to_string(tck.meta.stage));
      require_same_network(tck.network, "teacher");
      teacher = std::move(tnets);
      teacher.set_trainable(false);
      have_teacher = true;
      // the student warm-starts from the teacher unless told otherwise
      const std::string init = paths.init.empty() ? paths.teacher : paths.init;
      auto [inets, ick] = load_networks<S>(init);
      require_same_network(ick.network, "init");
      nets = std::move(inets);
    }
    nets.set_trainable(true);
    AdamW<S> opt(nets.params(), cfg_.weight_decay);

    // --- data and caches ---------------------------------------------------
    auto train = make_train_samples<S>(ds_, "train", /*clear_only=*/cfg_.stage == 0);
    if (train.empty()) throw std::invalid_argument("trainer: dataset has no training samples");
    TeacherCache<S> cache;
    if (have_teacher) {
      cache = build_teacher_cache(teacher, train, ds_.camera, ds_.d_max, sched_, cfg_,
                                  /*with_features=*/cfg_.stage >= 2);
    } else {
      // stage 0: flat pseudo-depth, refreshed from the model itself later
      const Shape latent_shape{1, ds_.camera.height, ds_.camera.width};
      for (std::size_t i = 0; i < train.size(); ++i)
        cache.latent.push_back(cfg_.odr ? Tensor<S>::zeros(latent_shape)
                                        : Tensor<S>::full(latent_shape, S(0.5)));
    }

    // --- resume --------------------------------------------------------------
    Rng rng(derive_seed(cfg_.seed, 1));
    int start_epoch = 1;
    std::int64_t step = 0;
    const std::int64_t steps_per_epoch = static_cast<std::int64_t>(
        (train.size() + static_cast<std::size_t>(cfg_.batch_size) - 1) /
        static_cast<std::size_t>(cfg_.batch_size));
    const std::int64_t total_steps = steps_per_epoch * cfg_.epochs;
    const bool resuming = !paths.resume.empty();
    if (resuming) {
      auto [rnets, rck] = load_networks<S>(paths.resume);
      if (rck.meta.config_hash != hash)
        throw std::invalid_argument(
            "trainer: resume checkpoint was written by a different config (hash " +
            rck.meta.config_hash + " vs " + hash + ")");
      nets = std::move(rnets);
      nets.set_trainable(true);
      opt = AdamW<S>(nets.params(), cfg_.weight_decay);
      opt.restore(rck, rck.meta.step);
      rng.restore_hex(rck.meta.rng_state);
      start_epoch = rck.meta.epoch + 1;
      step = rck.meta.step;
      if (cfg_.stage == 0)  // the self-refreshed target cache lives in the checkpoint
        for (std::size_t i = 0; i < train.size(); ++i) {
          auto it = rck.tensors.find("cache.z0." + std::to_string(i));
          if (it == rck.tensors.end())
            throw std::runtime_error("trainer: resume checkpoint lacks the pseudo-depth cache");
          cache.latent[i] = it->second;
        }
    }

    // --- log -----------------------------------------------------------------
    const std::string log_path = paths.out_dir + "/train_log.csv";
    std::ofstream log(log_path, resuming ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("trainer: cannot open " + log_path);
    if (!resuming) log << "step,epoch,ph,dis,nis,feat,img,edge,total\n";

    // --- epochs ----------------------------------------------------------------
    StageResult result;
    std::vector<std::size_t> order(train.size());

    bool stopped_early = false;
    for (int epoch = start_epoch; epoch <= cfg_.epochs; ++epoch) {
      if (cfg_.stage == 0 && epoch > 1 && (epoch - 1) % cfg_.refresh_every == 0)
        refresh_self_cache(nets, train, cache);

      // shuffle from identity so the epoch order depends only on the RNG
      // state, which a resumed run restores; a cross-epoch permutation
      // chain would diverge after resume
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);
      for (std::int64_t b = 0; b < steps_per_epoch; ++b) {
        const std::size_t lo = static_cast<std::size_t>(b) * cfg_.batch_size;
        const std::size_t hi = std::min(lo + cfg_.batch_size, train.size());
        opt.zero_grad();

        Tensor<S> batch_total;
        LossReport mean_report;
        for (std::size_t k = lo; k < hi; ++k) {
          const std::size_t idx = order[k];
          const int tau = static_cast<int>(rng.uniform_int(1, sched_.t_train()));
          Tensor<S> eps = Tensor<S>::randn(cache.latent[idx].shape(), rng);
          PseudoTargets<S> tgt = targets_for(idx, cache, have_teacher, epoch);
          StageParts<S> parts =
              sample_parts(nets, train[idx], tgt, ds_.camera, ds_.d_max, sched_, cfg_, tau, eps);
          Tensor<S> total = stage_total(parts, cfg_.stage == 0 ? 1 : cfg_.stage, cfg_.weights);
          accumulate(mean_report, make_report(parts, total), 1.0 / static_cast<double>(hi - lo));
          batch_total = batch_total.defined() ? add(batch_total, total) : total;
        }
        batch_total = scalar_mul(batch_total, static_cast<S>(1.0 / static_cast<double>(hi - lo)));
        batch_total.backward();
        const double gn = opt.grad_norm();
        if (!std::isfinite(mean_report.total) || !std::isfinite(gn))
          throw std::runtime_error(
              "trainer: non-finite loss or gradient at step " + std::to_string(step + 1) +
              " epoch " + std::to_string(epoch) + " (total=" + std::to_string(mean_report.total) +
              ", ph=" + std::to_string(mean_report.ph) +
              ", dis=" + std::to_string(mean_report.dis) +
              ", nis=" + std::to_string(mean_report.nis) + ", |g|=" + std::to_string(gn) + ")");
        const double scale = gn > cfg_.clip_norm ? cfg_.clip_norm / gn : 1.0;
        opt.step(cosine_lr(cfg_.lr, step, total_steps), scale);
        ++step;
        write_row(log, step, epoch, mean_report);
        result.log.push_back(mean_report);
      }

      save(paths.out_dir + "/ckpt_last.ddck", nets, opt, rng, cache, epoch, step, hash);
      if (paths.stop_after_epoch > 0 && epoch >= paths.stop_after_epoch) {
        stopped_early = epoch < cfg_.epochs;
        break;
      }
    }
    if (cfg_.epochs == 0)  // still emit a checkpoint equal to the initialization
      save(paths.out_dir + "/ckpt_last.ddck", nets, opt, rng, cache, 0, 0, hash);
    log.flush();

    result.checkpoint = paths.out_dir + "/ckpt_last.ddck";
    result.val_abs_rel = eval_clear_abs_rel(nets, ds_, "val", sched_, cfg_.odr);
    if (cfg_.stage == 0 && cfg_.epochs > 0 && !stopped_early &&
        result.val_abs_rel > cfg_.bootstrap_gate)
      throw std::runtime_error("trainer: bootstrap gate failed, val AbsRel " +
                               std::to_string(result.val_abs_rel) + " > " +
                               std::to_string(cfg_.bootstrap_gate));
    return result;
  }

  const DiffusionSchedule& schedule() const { return sched_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  void require_same_network(const NetworkConfig& other, const char* role) const {
    if (other.to_json() != cfg_.network.to_json())
      throw std::invalid_argument(std::string("trainer: ") + role +
                                  " checkpoint architecture differs from the configured network");
  }

  PseudoTargets<S> targets_for(std::size_t idx, const TeacherCache<S>& cache, bool have_teacher,
                               int epoch) const {
    PseudoTargets<S> tgt;
    tgt.latent = cache.latent[idx];
    const Shape mask_shape{1, ds_.camera.height, ds_.camera.width};
    if (have_teacher) {
      tgt.depth_norm = cache.depth_norm[idx];
      tgt.mask = cfg_.pde ? adaptive_mask(cache.min_ph[idx], epoch, cfg_.weights.mask_lambda)
                          : Tensor<S>::full(mask_shape, S(1));
      if (!cache.feat.empty()) tgt.teacher_feat = cache.feat[idx];
    } else {
      tgt.mask = Tensor<S>::full(mask_shape, S(1));
    }
    return tgt;
  }

  void refresh_self_cache(const NetworkSet<S>& nets, const std::vector<TrainSample<S>>& train,
                          TeacherCache<S>& cache) {
    NoGradGuard ng;
    for (std::size_t i = 0; i < train.size(); ++i) {
      Tensor<S> dn =
          predict_depth_norm(nets, train[i].clear, sched_,
                             derive_seed(train[i].meta->seed, kStreamPseudoDepth), cfg_.odr);
      cache.latent[i] = cfg_.odr ? to_latent(dn) : dn;
    }
  }

  static void accumulate(LossReport& acc, const LossReport& r, double w) {
    acc.ph += w * r.ph;
    acc.dis += w * r.dis;
    acc.nis += w * r.nis;
    acc.feat += w * r.feat;
    acc.img += w * r.img;
    acc.edge += w * r.edge;
    acc.total += w * r.total;
  }

  static void write_row(std::ofstream& log, std::int64_t step, int epoch, const LossReport& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%lld,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<long long>(step), epoch, r.ph, r.dis, r.nis, r.feat, r.img, r.edge,
                  r.total);
    log << buf;
  }

  void save(const std::string& path, NetworkSet<S>& nets, const AdamW<S>& opt, const Rng& rng,
            const TeacherCache<S>& cache, int epoch, std::int64_t step, const std::string& hash) {
    CheckpointMeta meta;
    meta.stage = cfg_.stage;
    meta.epoch = epoch;
    meta.step = step;
    meta.seed = cfg_.seed;
    meta.precision = cfg_.precision;
    meta.config_hash = hash;
    meta.rng_state = rng.state_hex();
    meta.extra = nlohmann::json{{"config", cfg_}, {"d_max", ds_.d_max}};
    auto aux = opt.state_tensors();
    if (cfg_.stage == 0)  // persist the self-distillation targets for resume
      for (std::size_t i = 0; i < cache.latent.size(); ++i)
        aux.emplace_back("cache.z0." + std::to_string(i), cache.latent[i]);
    save_checkpoint(path, nets, meta, aux);
  }

  const Dataset& ds_;
  TrainConfig cfg_;
  DiffusionSchedule sched_;
};

}  // namespace diffdepth
