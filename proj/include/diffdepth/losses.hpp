#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffdepth/tensor.hpp"
#include "diffdepth/tensor_ops.hpp"

// Loss terms for the two training stages. Everything reduces with means over
// valid pixels; masks, sampled noise and teacher outputs never receive
// gradients. The pairwise/anchor weighting per level follows the asymmetric
// convention exactly: noise pairs at 0.5 with anchors at 1, features the
// reverse, and the image level anchors at 1 with the pair at 0.5.

namespace diffdepth {

/// Which parts of each contrastive level are active.
enum class TrinityMode { off, distill, contrast, trinity };

inline TrinityMode trinity_mode_from_string(const std::string& s) {
  if (s == "off") return TrinityMode::off;
  if (s == "distill") return TrinityMode::distill;
  if (s == "contrast") return TrinityMode::contrast;
  if (s == "trinity") return TrinityMode::trinity;
  throw std::invalid_argument("unknown trinity mode '" + s + "'");
}

inline std::string to_string(TrinityMode m) {
  switch (m) {
    case TrinityMode::off: return "off";
    case TrinityMode::distill: return "distill";
    case TrinityMode::contrast: return "contrast";
    case TrinityMode::trinity: return "trinity";
  }
  return "?";
}

struct LossWeights {
  double ssim_w = 0.85;       ///< photometric SSIM share
  double l1_w = 0.15;         ///< photometric L1 share
  double c1 = 1e-4;           ///< SSIM stabilizer (0.01^2)
  double c2 = 9e-4;           ///< SSIM stabilizer (0.03^2)
  double nis_pair = 0.5;      ///< noise level: weight of the aug/clear pair term
  double nis_anchor = 1.0;    ///< noise level: weight of the sampled-noise anchors
  double feat_pair = 1.0;     ///< feature level: student pair term
  double feat_anchor = 0.5;   ///< feature level: teacher anchor terms
  double img_anchor = 1.0;    ///< image level: clear-image anchor terms
  double img_pair = 0.5;      ///< image level: refined pair term
  double edge_rho = 1e-3;     ///< edge-aware smoothness share in the stage loss
  double multilevel_theta = 0.5;  ///< stage-2 share of feature+image levels
  double mask_lambda = 1.5;   ///< adaptive-mask threshold scale
  double berhu_frac = 0.2;    ///< BerHu threshold as a fraction of max |error|
};

/// Local-statistics SSIM over 3x3 windows, per channel, averaged across
/// channels: [C,H,W] x [C,H,W] -> [1,H,W] with values in [-1, 1].
template <typename S>
Tensor<S> ssim_map(const Tensor<S>& x, const Tensor<S>& y, double c1 = 1e-4, double c2 = 9e-4) {
  detail::require_same_shape("ssim_map", x, y);
  detail::require_chw("ssim_map", x);
  Tensor<S> mx = avg_pool3(x);
  Tensor<S> my = avg_pool3(y);
  Tensor<S> mxx = avg_pool3(mul(x, x));
  Tensor<S> myy = avg_pool3(mul(y, y));
  Tensor<S> mxy = avg_pool3(mul(x, y));
  Tensor<S> vx = sub(mxx, mul(mx, mx));
  Tensor<S> vy = sub(myy, mul(my, my));
  Tensor<S> cxy = sub(mxy, mul(mx, my));
  const S C1 = static_cast<S>(c1), C2 = static_cast<S>(c2);
  Tensor<S> num = mul(scalar_add(scalar_mul(mul(mx, my), S(2)), C1),
                      scalar_add(scalar_mul(cxy, S(2)), C2));
  Tensor<S> den = mul(scalar_add(add(mul(mx, mx), mul(my, my)), C1),
                      scalar_add(add(vx, vy), C2));
  return channel_mean(div(num, den));
}

/// Per-pixel photometric error: w1 (1-SSIM)/2 + w2 |I - I_warp|, [1,H,W].
template <typename S>
Tensor<S> photometric_map(const Tensor<S>& target, const Tensor<S>& warped, const LossWeights& w) {
  Tensor<S> ssim_term = scalar_mul(rsub(S(1), ssim_map(target, warped, w.c1, w.c2)), S(0.5));
  Tensor<S> l1_term = channel_mean(abs_(sub(target, warped)));
  return add(scalar_mul(ssim_term, static_cast<S>(w.ssim_w)),
             scalar_mul(l1_term, static_cast<S>(w.l1_w)));
}

/// Mean of `x` over pixels where `mask` is 1. The mask carries no gradient;
/// an all-zero mask yields a plain zero (nothing to average).
template <typename S>
Tensor<S> masked_mean(const Tensor<S>& x, const Tensor<S>& mask) {
  detail::require_same_shape("masked_mean", x, mask);
  const double count = static_cast<double>(mask.array().sum());
  if (count <= 0.0) return Tensor<S>::scalar(S(0));
  return scalar_mul(sum(mul(x, mask)), static_cast<S>(1.0 / count));
}

template <typename S>
struct MinMapResult {
  Tensor<S> map;   ///< per-pixel minimum over the inputs (invalid ones pushed out)
  Tensor<S> mask;  ///< plain union of the input validity masks
};

/// Per-pixel minimum across per-view maps, ignoring invalid pixels by adding
/// a large detached penalty before the min. Pixels invalid in every view
/// stay flagged 0 in the returned mask.
template <typename S>
MinMapResult<S> min_valid_map(const std::vector<Tensor<S>>& maps, const std::vector<Tensor<S>>& masks) {
  if (maps.empty() || maps.size() != masks.size())
    throw std::invalid_argument("min_valid_map: need matching non-empty map/mask lists");
  std::vector<Tensor<S>> penalized;
  Tensor<S> all_mask = Tensor<S>::zeros(masks[0].shape());
  for (std::size_t i = 0; i < maps.size(); ++i) {
    detail::require_same_shape("min_valid_map", maps[i], masks[i]);
    Tensor<S> penalty = Tensor<S>::zeros(masks[i].shape());
    penalty.array() = (S(1) - masks[i].array()) * S(1e6);
    penalized.push_back(add(maps[i], penalty));
    all_mask.array() = all_mask.array().max(masks[i].array());
  }
  return {min_elems(penalized), all_mask};
}

/// Pixels the teacher reconstructs well enough for this epoch: strict
/// threshold lambda/epoch on the per-pixel teacher photometric error.
/// Graph-free by construction; epoch is 1-based.
template <typename S>
Tensor<S> adaptive_mask(const Tensor<S>& teacher_ph_map, int epoch, double lambda = 1.5) {
  if (epoch < 1) throw std::invalid_argument("adaptive_mask: epoch is 1-based, got " + std::to_string(epoch));
  return lt_mask(teacher_ph_map, static_cast<S>(lambda / epoch));
}

/// Detached BerHu threshold: frac * max |e| with a small floor so a perfect
/// prediction does not divide by zero.
template <typename S>
double berhu_threshold(const Tensor<S>& err, double frac = 0.2) {
  const double m = static_cast<double>(err.array().abs().maxCoeff());
  return std::max(frac * m, 1e-8);
}

/// Reversed Huber: |e| up to c, then quadratic (e^2 + c^2) / (2c). C1 at the
/// switch point, kinked only at zero like L1.
template <typename S>
Tensor<S> berhu(const Tensor<S>& err, double c) {
  if (!(c > 0)) throw std::invalid_argument("berhu: threshold must be positive");
  Tensor<S> a = abs_(err);
  Tensor<S> small = le_mask(a, static_cast<S>(c));
  Tensor<S> big = rsub(S(1), small);
  Tensor<S> quad = scalar_mul(scalar_add(square(err), static_cast<S>(c * c)),
                              static_cast<S>(1.0 / (2.0 * c)));
  return add(mul(small, a), mul(big, quad));
}

/// Masked distillation of student depth toward detached teacher depth
/// (both in normalized units). BerHu by default; plain L1 when the
/// enhancement is ablated away.
template <typename S>
Tensor<S> distill_loss(const Tensor<S>& d_student_aug, const Tensor<S>& d_teacher_clear,
                       const Tensor<S>& mask, double berhu_frac = 0.2, bool use_berhu = true) {
  detail::require_same_shape("distill_loss", d_student_aug, d_teacher_clear);
  Tensor<S> err = sub(d_student_aug, d_teacher_clear);
  Tensor<S> map = use_berhu ? berhu(err, berhu_threshold(err, berhu_frac)) : abs_(err);
  return masked_mean(map, mask);
}

/// Noise-level loss. The base constraint - squared error between the
/// augmented branch's prediction and the sampled noise - is always present;
/// the pair term and the clear-branch anchor join depending on the mode.
/// eps_clear may be left undefined when the mode does not use it.
template <typename S>
Tensor<S> trinity_noise(const Tensor<S>& eps_aug, const Tensor<S>& eps_clear, const Tensor<S>& eps,
                        TrinityMode mode, bool level_on, const LossWeights& w) {
  Tensor<S> anchor_aug = mean(square(sub(eps_aug, eps)));
  if (!level_on || mode == TrinityMode::off) return anchor_aug;
  switch (mode) {
    case TrinityMode::distill: {
      Tensor<S> anchor_clear = mean(square(sub(eps_clear, eps)));
      return scalar_mul(add(anchor_aug, anchor_clear), static_cast<S>(w.nis_anchor));
    }
    case TrinityMode::contrast: {
      // keep the base noise constraint, contrast the two branches directly
      Tensor<S> pair = mean(square(sub(eps_aug, eps_clear)));
      return add(scalar_mul(pair, static_cast<S>(w.nis_pair)),
                 scalar_mul(anchor_aug, static_cast<S>(w.nis_anchor)));
    }
    default: {
      Tensor<S> pair = mean(square(sub(eps_aug, eps_clear)));
      Tensor<S> anchor_clear = mean(square(sub(eps_clear, eps)));
      return add(scalar_mul(pair, static_cast<S>(w.nis_pair)),
                 scalar_mul(add(anchor_aug, anchor_clear), static_cast<S>(w.nis_anchor)));
    }
  }
}

/// Feature-level loss: L1 between student branches (pair) and from each
/// student branch to the detached teacher feature (anchors).
template <typename S>
Tensor<S> trinity_feature(const Tensor<S>& f_student_clear, const Tensor<S>& f_student_aug,
                          const Tensor<S>& f_teacher_clear, TrinityMode mode, bool level_on,
                          const LossWeights& w) {
  if (!level_on || mode == TrinityMode::off) return Tensor<S>::scalar(S(0));
  Tensor<S> pair = mean(abs_(sub(f_student_clear, f_student_aug)));
  if (mode == TrinityMode::contrast) return scalar_mul(pair, static_cast<S>(w.feat_pair));
  Tensor<S> anchors = add(mean(abs_(sub(f_teacher_clear, f_student_clear))),
                          mean(abs_(sub(f_teacher_clear, f_student_aug))));
  if (mode == TrinityMode::distill) return scalar_mul(anchors, static_cast<S>(w.feat_anchor));
  return add(scalar_mul(pair, static_cast<S>(w.feat_pair)),
             scalar_mul(anchors, static_cast<S>(w.feat_anchor)));
}

/// Image-level loss on refined images. Note the reversed roles: the anchors
/// toward the clear image carry the large weight, the refined pair the
/// small one.
template <typename S>
Tensor<S> trinity_image(const Tensor<S>& refined_aug, const Tensor<S>& refined_clear,
                        const Tensor<S>& clear, TrinityMode mode, bool level_on,
                        const LossWeights& w) {
  if (!level_on || mode == TrinityMode::off) return Tensor<S>::scalar(S(0));
  Tensor<S> pair = mean(abs_(sub(refined_aug, refined_clear)));
  if (mode == TrinityMode::contrast) return scalar_mul(pair, static_cast<S>(w.img_pair));
  Tensor<S> anchors = add(mean(abs_(sub(refined_aug, clear))),
                          mean(abs_(sub(refined_clear, clear))));
  if (mode == TrinityMode::distill) return scalar_mul(anchors, static_cast<S>(w.img_anchor));
  return add(scalar_mul(anchors, static_cast<S>(w.img_anchor)),
             scalar_mul(pair, static_cast<S>(w.img_pair)));
}

/// Edge-aware smoothness of mean-normalized depth: image gradients relax the
/// penalty across photometric edges. Scale-invariant in the depth.
template <typename S>
Tensor<S> edge_aware_smoothness(const Tensor<S>& depth, const Tensor<S>& image) {
  detail::require_chw("edge_aware_smoothness", depth);
  detail::require_chw("edge_aware_smoothness", image);
  if (depth.dim(0) != 1) throw ShapeError("edge_aware_smoothness", "depth must be [1,H,W]");
  if (depth.dim(1) < 2 || depth.dim(2) < 2)
    throw ShapeError("edge_aware_smoothness", "needs at least 2x2 spatial extent");
  if (image.dim(1) != depth.dim(1) || image.dim(2) != depth.dim(2))
    throw ShapeError("edge_aware_smoothness", "image/depth spatial mismatch");
  const double dm = static_cast<double>(depth.array().mean());
  if (!(dm > 0)) throw std::invalid_argument("edge_aware_smoothness: mean depth must be positive");
  Tensor<S> dstar = div(depth, broadcast_scalar(mean(depth), depth.shape()));
  Tensor<S> wx = Tensor<S>::zeros({1, depth.dim(1), depth.dim(2) - 1});
  Tensor<S> wy = Tensor<S>::zeros({1, depth.dim(1) - 1, depth.dim(2)});
  {
    NoGradGuard ng;  // image edge weights are constants
    wx.array() = (-channel_mean(abs_(grad_x(image))).array()).exp();
    wy.array() = (-channel_mean(abs_(grad_y(image))).array()).exp();
  }
  return add(mean(mul(abs_(grad_x(dstar)), wx)), mean(mul(abs_(grad_y(dstar)), wy)));
}

/// Scalar graph nodes for one sample's loss terms. feat/img stay undefined
/// in stage 1.
template <typename S>
struct StageParts {
  Tensor<S> nis, dis, ph, edge;
  Tensor<S> feat, img;
};

/// Plain numbers for logging.
struct LossReport {
  double ph = 0, dis = 0, nis = 0, feat = 0, img = 0, edge = 0;
  double total = 0;
};

/// Composes the stage loss: nis + dis + ph + rho*edge, plus
/// theta*(feat + img) in stage 2. All parts for the stage must be defined.
template <typename S>
Tensor<S> stage_total(const StageParts<S>& p, int stage, const LossWeights& w) {
  if (stage != 1 && stage != 2) throw std::invalid_argument("stage_total: stage must be 1 or 2");
  if (!p.nis.defined() || !p.dis.defined() || !p.ph.defined() || !p.edge.defined())
    throw std::invalid_argument("stage_total: missing a stage-1 term");
  Tensor<S> total = add(add(p.nis, p.dis), add(p.ph, scalar_mul(p.edge, static_cast<S>(w.edge_rho))));
  if (stage == 2) {
    if (!p.feat.defined() || !p.img.defined())
      throw std::invalid_argument("stage_total: stage 2 needs feature and image terms");
    total = add(total, scalar_mul(add(p.feat, p.img), static_cast<S>(w.multilevel_theta)));
  }
  return total;
}

template <typename S>
LossReport make_report(const StageParts<S>& p, const Tensor<S>& total) {
  LossReport r;
  r.nis = static_cast<double>(p.nis.item());
  r.dis = static_cast<double>(p.dis.item());
  r.ph = static_cast<double>(p.ph.item());
  r.edge = static_cast<double>(p.edge.item());
  if (p.feat.defined()) r.feat = static_cast<double>(p.feat.item());
  if (p.img.defined()) r.img = static_cast<double>(p.img.item());
  r.total = static_cast<double>(total.item());
  return r;
}

}  // namespace diffdepth
