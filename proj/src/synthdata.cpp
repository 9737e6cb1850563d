#include "diffdepth/synthdata.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "diffdepth/image_io.hpp"
#include "diffdepth/rng.hpp"
#include "diffdepth/tensor_io.hpp"

namespace diffdepth {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Textures: tileable two-octave value noise plus a per-primitive base color.
// ---------------------------------------------------------------------------

namespace {

constexpr int kLattice = 8;

struct TexParams {
  double base[3] = {0.5, 0.5, 0.5};
  double amp[3] = {0.2, 0.2, 0.2};
  double freq = 0.8;
  double lattice[kLattice * kLattice] = {};

  static TexParams random(Rng& rng) {
    TexParams t;
    for (int c = 0; c < 3; ++c) {
      t.base[c] = rng.uniform(0.25, 0.75);
      t.amp[c] = rng.uniform(0.15, 0.40);
    }
    t.freq = rng.uniform(0.5, 1.1);
    for (double& v : t.lattice) v = rng.uniform();
    return t;
  }

  double noise1(double u, double v) const {
    const double fu = std::floor(u), fv = std::floor(v);
    const double du = u - fu, dv = v - fv;
    auto wrap = [](long long i) { return static_cast<int>(((i % kLattice) + kLattice) % kLattice); };
    const int i0 = wrap(static_cast<long long>(fu)), i1 = wrap(static_cast<long long>(fu) + 1);
    const int j0 = wrap(static_cast<long long>(fv)), j1 = wrap(static_cast<long long>(fv) + 1);
    const double v00 = lattice[j0 * kLattice + i0], v01 = lattice[j0 * kLattice + i1];
    const double v10 = lattice[j1 * kLattice + i0], v11 = lattice[j1 * kLattice + i1];
    // smoothstep interpolation keeps the field C1, i.e. band-limited enough
    const double su = du * du * (3 - 2 * du), sv = dv * dv * (3 - 2 * dv);
    return (1 - sv) * ((1 - su) * v00 + su * v01) + sv * ((1 - su) * v10 + su * v11);
  }

  /// Gaussian-style attenuation of an octave whose texture cells span
  /// 1/cpp pixels on screen. Without this, grazing surfaces sample the
  /// noise field above its Nyquist rate and two views of the same point
  /// disagree, which would break warp-based view consistency.
  static double band_weight(double cells_per_pixel) {
    return std::exp(-8.0 * cells_per_pixel * cells_per_pixel);
  }

  /// `footprint` is the on-surface extent of one pixel in world units.
  void shade(double u, double v, double footprint, double rgb[3]) const {
    const double w1 = band_weight(freq * footprint);
    const double w2 = band_weight(2 * freq * footprint);
    const double n = 0.65 * w1 * (noise1(u * freq, v * freq) - 0.5) +
                     0.35 * w2 * (noise1(2 * freq * u + 3.1, 2 * freq * v + 1.7) - 0.5);
    for (int c = 0; c < 3; ++c)
      rgb[c] = std::clamp(base[c] + amp[c] * n * 2.0, 0.04, 0.96);
  }
};

// ---------------------------------------------------------------------------
// Scene primitives. Camera convention: x right, y down, z forward.
// ---------------------------------------------------------------------------

struct PlanePrim {
  Eigen::Vector3d point, normal, u_axis, v_axis;
  TexParams tex;
};

struct BoxPrim {
  Eigen::Vector3d lo, hi;
  TexParams tex;
};

struct Scene {
  std::vector<PlanePrim> planes;
  std::vector<BoxPrim> boxes;
};

struct Hit {
  double t = -1.0;
  double u = 0.0, v = 0.0;
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
  const TexParams* tex = nullptr;
};

bool intersect_plane(const PlanePrim& p, const Eigen::Vector3d& o, const Eigen::Vector3d& d, Hit& hit) {
  const double denom = d.dot(p.normal);
  if (std::abs(denom) < 1e-9) return false;
  const double t = (p.point - o).dot(p.normal) / denom;
  if (t < 0.05) return false;
  const Eigen::Vector3d q = o + t * d - p.point;
  hit.t = t;
  hit.u = q.dot(p.u_axis);
  hit.v = q.dot(p.v_axis);
  hit.normal = p.normal;
  hit.tex = &p.tex;
  return true;
}

bool intersect_box(const BoxPrim& b, const Eigen::Vector3d& o, const Eigen::Vector3d& d, Hit& hit) {
  double tmin = 0.05, tmax = 1e30;
  int axis = -1;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d(a)) < 1e-12) {
      if (o(a) < b.lo(a) || o(a) > b.hi(a)) return false;
      continue;
    }
    double t0 = (b.lo(a) - o(a)) / d(a);
    double t1 = (b.hi(a) - o(a)) / d(a);
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > tmin) {
      tmin = t0;
      axis = a;
    }
    tmax = std::min(tmax, t1);
    if (tmax < tmin) return false;
  }
  if (axis < 0) return false;  // origin inside the box
  const Eigen::Vector3d q = o + tmin * d;
  const int ua = (axis + 1) % 3, va = (axis + 2) % 3;
  hit.t = tmin;
  hit.u = q(ua);
  hit.v = q(va);
  hit.normal = Eigen::Vector3d::Unit(axis);
  hit.tex = &b.tex;
  return true;
}

/// Nearest hit along o + t*d; every ray is guaranteed to hit the back wall.
bool trace(const Scene& s, const Eigen::Vector3d& o, const Eigen::Vector3d& d, Hit& best) {
  best.t = 1e30;
  bool any = false;
  Hit h;
  for (const auto& p : s.planes)
    if (intersect_plane(p, o, d, h) && h.t < best.t) {
      best = h;
      any = true;
    }
  for (const auto& b : s.boxes)
    if (intersect_box(b, o, d, h) && h.t < best.t) {
      best = h;
      any = true;
    }
  return any;
}

Scene make_scene(Rng& rng, double d_max) {
  Scene s;

  // Tilted ground below the camera (y points down).
  PlanePrim ground;
  const double gy = rng.uniform(1.0, 1.6);
  ground.point = {0.0, gy, 4.0};
  ground.normal = rotation_xyz(rng.uniform(-0.10, 0.10), 0.0, rng.uniform(-0.10, 0.10)) *
                  Eigen::Vector3d(0, -1, 0);
  ground.u_axis = {1, 0, 0};
  ground.v_axis = {0, 0, 1};
  ground.tex = TexParams::random(rng);
  s.planes.push_back(ground);

  // Slightly tilted back wall; its depth bounds the whole scene below d_max.
  PlanePrim wall;
  wall.point = {0.0, 0.0, rng.uniform(0.70, 0.88) * d_max};
  wall.normal = rotation_xyz(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 0.0) *
                Eigen::Vector3d(0, 0, -1);
  wall.u_axis = {1, 0, 0};
  wall.v_axis = {0, 1, 0};
  wall.tex = TexParams::random(rng);
  s.planes.push_back(wall);

  const int n_boxes = static_cast<int>(rng.uniform_int(2, 4));
  for (int i = 0; i < n_boxes; ++i) {
    BoxPrim b;
    const double sx = rng.uniform(0.35, 1.3), sy = rng.uniform(0.35, 1.3), sz = rng.uniform(0.35, 1.3);
    const double cxp = rng.uniform(-2.2, 2.2), czp = rng.uniform(2.2, 6.0);
    const double ybot = gy - rng.uniform(0.0, 0.15);  // roughly resting on the ground
    b.lo = {cxp - sx / 2, ybot - sy, czp - sz / 2};
    b.hi = {cxp + sx / 2, ybot, czp + sz / 2};
    b.tex = TexParams::random(rng);
    s.boxes.push_back(b);
  }
  return s;
}

/// Renders RGB + z-depth from a camera at `cam_pos` with camera-to-world
/// rotation `cam_rot`. Color is area-averaged over a 3x3 subpixel grid so
/// that edges carry their true coverage fraction — a pair of views then
/// stays consistent under subpixel resampling, as with a real camera.
/// Depth is point-sampled on the pixel-center ray (the middle subsample):
/// ground truth geometry must stay crisp, not blend across silhouettes.
/// Depth is the camera-frame z of the hit, which for a ray direction with
/// unit z-component is the ray parameter itself.
bool render_view(const Scene& scene, const CameraIntrinsics& K, const Eigen::Matrix3d& cam_rot,
                 const Eigen::Vector3d& cam_pos, double d_max, Tensor<double>& rgb,
                 Tensor<double>& depth) {
  rgb = Tensor<double>::zeros({3, K.height, K.width});
  depth = Tensor<double>::zeros({1, K.height, K.width});
  const std::int64_t plane = static_cast<std::int64_t>(K.height) * K.width;
  constexpr int kAA = 3;
  for (int y = 0; y < K.height; ++y)
    for (int x = 0; x < K.width; ++x) {
      double acc[3] = {0, 0, 0};
      for (int sy = 0; sy < kAA; ++sy)
        for (int sx = 0; sx < kAA; ++sx) {
          const double ox = (sx + 0.5) / kAA - 0.5, oy = (sy + 0.5) / kAA - 0.5;
          const Eigen::Vector3d dir_cam((x + ox - K.cx) / K.fx, (y + oy - K.cy) / K.fy, 1.0);
          const Eigen::Vector3d dir_w = cam_rot * dir_cam;
          Hit hit;
          if (!trace(scene, cam_pos, dir_w, hit)) return false;
          if (hit.t < 0.8 || hit.t > d_max * 0.99) return false;
          // One pixel subtends ~1/fx radians; its on-surface extent grows
          // with distance and grazing incidence. Band-limits the texture.
          const double dist = hit.t * dir_w.norm();
          const double cosi = std::max(std::abs(dir_w.normalized().dot(hit.normal)), 0.02);
          const double footprint = dist / (K.fx * cosi);
          double rgbv[3];
          hit.tex->shade(hit.u, hit.v, footprint, rgbv);
          for (int c = 0; c < 3; ++c) acc[c] += rgbv[c];
          // kAA is odd, so the middle subsample is the exact pixel center.
          if (sx == kAA / 2 && sy == kAA / 2) depth.data()[y * K.width + x] = hit.t;
        }
      for (int c = 0; c < 3; ++c) rgb.data()[c * plane + y * K.width + x] = acc[c] / (kAA * kAA);
    }
  return true;
}

double quantize255(double v) {
  return std::min(255.0, std::max(0.0, std::round(v * 255.0))) / 255.0;
}

void quantize_image(Tensor<double>& img) {
  for (std::int64_t i = 0; i < img.size(); ++i) img.data()[i] = quantize255(img.data()[i]);
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

void check_level(const CorruptionSpec& c) {
  if (c.level < 0 || c.level > 5)
    throw std::invalid_argument("corruption: level " + std::to_string(c.level) + " outside [0,5]");
}

Tensor<double> corrupt_gaussian_noise(const Tensor<double>& img, int level, Rng& rng) {
  static const double sigmas[5] = {0.02, 0.04, 0.07, 0.11, 0.16};
  Tensor<double> out = img.detach();
  const double s = sigmas[level - 1];
  for (std::int64_t i = 0; i < out.size(); ++i)
    out.data()[i] = std::clamp(out.data()[i] + s * rng.normal(), 0.0, 1.0);
  return out;
}

Tensor<double> corrupt_blur(const Tensor<double>& img, int level) {
  static const double sigmas[5] = {0.6, 1.0, 1.5, 2.1, 2.8};
  const double sigma = sigmas[level - 1];
  const int radius = static_cast<int>(std::ceil(2.5 * sigma));
  std::vector<double> kern(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0;
  for (int i = -radius; i <= radius; ++i) {
    kern[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    norm += kern[static_cast<std::size_t>(i + radius)];
  }
  for (double& k : kern) k /= norm;

  const int ch = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor<double> tmp = Tensor<double>::zeros(img.shape());
  Tensor<double> out = Tensor<double>::zeros(img.shape());
  // horizontal then vertical pass, clamp-to-edge
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          const int xx = std::clamp(x + i, 0, w - 1);
          acc += kern[static_cast<std::size_t>(i + radius)] * img.data()[c * plane + y * w + xx];
        }
        tmp.data()[c * plane + y * w + x] = acc;
      }
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          const int yy = std::clamp(y + i, 0, h - 1);
          acc += kern[static_cast<std::size_t>(i + radius)] * tmp.data()[c * plane + yy * w + x];
        }
        out.data()[c * plane + y * w + x] = acc;
      }
  return out;
}

Tensor<double> corrupt_brightness_contrast(const Tensor<double>& img, int level, Rng& rng) {
  double contrast = 1.0 + 0.12 * level;
  if (rng.uniform() < 0.5) contrast = 1.0 / contrast;
  const double shift = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.04 * level + 0.02);
  Tensor<double> out = Tensor<double>::zeros(img.shape());
  for (std::int64_t i = 0; i < img.size(); ++i)
    out.data()[i] = std::clamp((img.data()[i] - 0.5) * contrast + 0.5 + shift, 0.0, 1.0);
  return out;
}

Tensor<double> corrupt_rain_streaks(const Tensor<double>& img, int level, Rng& rng) {
  const int h = img.dim(1), w = img.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const int n_streaks = 8 * level;
  const double alpha = 0.18 + 0.07 * level;
  std::vector<double> cov(static_cast<std::size_t>(plane), 0.0);
  for (int sidx = 0; sidx < n_streaks; ++sidx) {
    const double x0 = rng.uniform(-5.0, w + 5.0);
    const double y0 = rng.uniform(-8.0, static_cast<double>(h));
    const double phi = rng.uniform(-0.35, 0.35);  // slant from vertical
    const double len = rng.uniform(h / 6.0, h / 3.0);
    const double dx = std::sin(phi), dy = std::cos(phi);
    for (double t = 0; t < len; t += 0.5) {
      const double px = x0 + t * dx, py = y0 + t * dy;
      const int ix = static_cast<int>(std::floor(px)), iy = static_cast<int>(std::floor(py));
      const double fx = px - ix, fy = py - iy;
      const double wgt[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const int xs[4] = {ix, ix + 1, ix, ix + 1};
      const int ys[4] = {iy, iy, iy + 1, iy + 1};
      for (int k = 0; k < 4; ++k)
        if (xs[k] >= 0 && xs[k] < w && ys[k] >= 0 && ys[k] < h) {
          double& cell = cov[static_cast<std::size_t>(ys[k]) * w + static_cast<std::size_t>(xs[k])];
          cell = std::max(cell, wgt[k]);
        }
    }
  }
  Tensor<double> out = img.detach();
  for (int c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < plane; ++i) {
      double& v = out.data()[c * plane + i];
      v = v + cov[static_cast<std::size_t>(i)] * alpha * (0.92 - v);
    }
  return out;
}

Tensor<double> corrupt_fog(const Tensor<double>& img, int level, const Tensor<double>& depth) {
  static const double ks[5] = {0.06, 0.10, 0.16, 0.24, 0.34};
  const double k = ks[level - 1];
  const double airlight = 0.82;
  const int h = img.dim(1), w = img.dim(2);
  if (depth.rank() != 3 || depth.dim(0) != 1 || depth.dim(1) != h || depth.dim(2) != w)
    throw std::invalid_argument("fog: depth map shape does not match the image");
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor<double> out = Tensor<double>::zeros(img.shape());
  for (std::int64_t i = 0; i < plane; ++i) {
    const double tr = std::exp(-k * depth.data()[i]);
    for (int c = 0; c < 3; ++c)
      out.data()[c * plane + i] = img.data()[c * plane + i] * tr + airlight * (1.0 - tr);
  }
  return out;
}

}  // namespace

const std::vector<std::string>& corruption_kinds() {
  static const std::vector<std::string> kinds = {"gaussian_noise", "blur", "brightness_contrast",
                                                 "rain_streaks", "fog"};
  return kinds;
}

Tensor<double> apply_corruption(const Tensor<double>& image, const CorruptionSpec& c,
                                const Tensor<double>* depth) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("apply_corruption: expected an RGB image [3,H,W]");
  check_level(c);
  if (c.kind == "none" || c.level == 0) return image.detach();
  Rng rng(c.seed);
  if (c.kind == "gaussian_noise") return corrupt_gaussian_noise(image, c.level, rng);
  if (c.kind == "blur") return corrupt_blur(image, c.level);
  if (c.kind == "brightness_contrast") return corrupt_brightness_contrast(image, c.level, rng);
  if (c.kind == "rain_streaks") return corrupt_rain_streaks(image, c.level, rng);
  if (c.kind == "fog") {
    if (depth == nullptr) throw std::invalid_argument("apply_corruption: fog requires the depth map");
    return corrupt_fog(image, c.level, *depth);
  }
  throw std::invalid_argument("apply_corruption: unknown kind '" + c.kind + "'");
}

std::vector<const Sample*> Dataset::split(const std::string& name) const {
  std::vector<const Sample*> out;
  for (const auto& s : samples)
    if (s.split == name) out.push_back(&s);
  return out;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

Dataset generate_dataset(const GenerateOptions& opts) {
  if (opts.width % 4 != 0 || opts.height % 4 != 0 || opts.width < 16 || opts.height < 16)
    throw std::invalid_argument("generate_dataset: width/height must be multiples of 4, at least 16");
  if (opts.aux_count < 1) throw std::invalid_argument("generate_dataset: need at least one aux view");
  if (opts.d_max <= 1.0) throw std::invalid_argument("generate_dataset: d_max must exceed 1");
  if (opts.mix.level_lo < 1 || opts.mix.level_hi > 5 || opts.mix.level_lo > opts.mix.level_hi)
    throw std::invalid_argument("generate_dataset: corruption level range must be within [1,5]");
  if (opts.mix.kinds.empty()) throw std::invalid_argument("generate_dataset: corruption mix is empty");
  for (const auto& k : opts.mix.kinds) {
    const auto& known = corruption_kinds();
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw std::invalid_argument("generate_dataset: unknown corruption kind '" + k + "'");
  }

  Dataset ds;
  ds.camera.width = opts.width;
  ds.camera.height = opts.height;
  ds.camera.fx = ds.camera.fy = 1.1 * opts.width;
  ds.camera.cx = (opts.width - 1) / 2.0;
  ds.camera.cy = (opts.height - 1) / 2.0;
  ds.camera.validate();
  ds.d_max = opts.d_max;
  ds.aux_count = opts.aux_count;
  ds.seed = opts.seed;

  const int total = opts.train_count + opts.val_count + opts.test_count;
  int test_kind_cycle = 0;
  for (int idx = 0; idx < total; ++idx) {
    Sample s;
    s.index = idx;
    s.split = idx < opts.train_count                    ? "train"
              : idx < opts.train_count + opts.val_count ? "val"
                                                        : "test";
    s.seed = derive_seed(opts.seed, static_cast<std::uint64_t>(idx));

    // Re-roll the scene until every rendered view stays inside depth bounds.
    bool ok = false;
    for (int attempt = 0; attempt < 25 && !ok; ++attempt) {
      Rng rng(derive_seed(s.seed, 100 + static_cast<std::uint64_t>(attempt)));
      Scene scene = make_scene(rng, ds.d_max);

      ok = render_view(scene, ds.camera, Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero(),
                       ds.d_max, s.clear, s.depth);
      if (!ok) continue;

      s.aux.clear();
      s.aux_depth.clear();
      s.poses.clear();
      for (int a = 0; a < opts.aux_count && ok; ++a) {
        const Eigen::Matrix3d Ra =
            rotation_xyz(rng.uniform(-0.025, 0.025), rng.uniform(-0.025, 0.025), rng.uniform(-0.012, 0.012));
        const Eigen::Vector3d ca(rng.uniform(-0.22, 0.22), rng.uniform(-0.10, 0.10),
                                 rng.uniform(-0.15, 0.15));
        Tensor<double> argb, adepth;
        ok = render_view(scene, ds.camera, Ra, ca, ds.d_max, argb, adepth);
        if (!ok) break;
        quantize_image(argb);
        s.aux.push_back(argb);
        s.aux_depth.push_back(adepth);
        Pose p;  // target frame (world) -> aux camera frame
        p.rotation = Ra.transpose();
        p.translation = -(Ra.transpose() * ca);
        p.validate(1e-9);
        s.poses.push_back(p);
      }
    }
    if (!ok)
      throw std::runtime_error("generate_dataset: could not build a valid scene for sample " +
                               std::to_string(idx));

    quantize_image(s.clear);

    // Corruption draw. Test/val cycle kinds deterministically so every kind
    // is represented; train draws uniformly from the mix.
    Rng crng(derive_seed(s.seed, 7));
    s.corruption.seed = derive_seed(s.seed, 8);
    if (s.split == "train") {
      s.corruption.kind =
          opts.mix.kinds[static_cast<std::size_t>(crng.uniform_int(0, static_cast<std::int64_t>(opts.mix.kinds.size()) - 1))];
      s.corruption.level = static_cast<int>(crng.uniform_int(opts.mix.level_lo, opts.mix.level_hi));
    } else {
      s.corruption.kind = opts.mix.kinds[static_cast<std::size_t>(test_kind_cycle++ % opts.mix.kinds.size())];
      s.corruption.level = (opts.mix.level_lo + opts.mix.level_hi) / 2;
    }
    s.aug = apply_corruption(s.clear, s.corruption, &s.depth);
    quantize_image(s.aug);

    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Save / load
// ---------------------------------------------------------------------------

namespace {

std::string sample_tag(int idx) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "s%04d", idx);
  return buf;
}

json pose_to_json(const Pose& p) {
  json j;
  std::vector<double> r;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) r.push_back(p.rotation(i, k));
  j["rotation"] = r;
  j["translation"] = std::vector<double>{p.translation(0), p.translation(1), p.translation(2)};
  return j;
}

Pose pose_from_json(const json& j) {
  Pose p;
  const auto r = j.at("rotation").get<std::vector<double>>();
  const auto t = j.at("translation").get<std::vector<double>>();
  if (r.size() != 9 || t.size() != 3) throw std::runtime_error("manifest: malformed pose");
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) p.rotation(i, k) = r[static_cast<std::size_t>(3 * i + k)];
  for (int i = 0; i < 3; ++i) p.translation(i) = t[static_cast<std::size_t>(i)];
  p.validate(1e-9);
  return p;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "depth");

  json man;
  man["format"] = "dds1";
  man["camera"] = {{"fx", ds.camera.fx}, {"fy", ds.camera.fy}, {"cx", ds.camera.cx},
                   {"cy", ds.camera.cy}, {"width", ds.camera.width}, {"height", ds.camera.height}};
  man["d_max"] = ds.d_max;
  man["aux_count"] = ds.aux_count;
  man["seed"] = ds.seed;
  man["samples"] = json::array();

  for (const auto& s : ds.samples) {
    const std::string tag = sample_tag(s.index);
    json js;
    js["index"] = s.index;
    js["split"] = s.split;
    js["seed"] = s.seed;
    js["corruption"] = {{"kind", s.corruption.kind}, {"level", s.corruption.level}, {"seed", s.corruption.seed}};
    js["clear"] = "images/" + tag + "_clear.ppm";
    js["aug"] = "images/" + tag + "_aug.ppm";
    js["depth"] = "depth/" + tag + ".bin";
    js["aux"] = json::array();
    js["aux_depth"] = json::array();
    js["poses"] = json::array();
    write_ppm((fs::path(dir) / js["clear"].get<std::string>()).string(), s.clear);
    write_ppm((fs::path(dir) / js["aug"].get<std::string>()).string(), s.aug);
    save_tensor((fs::path(dir) / js["depth"].get<std::string>()).string(), s.depth);
    for (std::size_t a = 0; a < s.aux.size(); ++a) {
      const std::string aname = "images/" + tag + "_aux" + std::to_string(a) + ".ppm";
      const std::string dname = "depth/" + tag + "_aux" + std::to_string(a) + ".bin";
      write_ppm((fs::path(dir) / aname).string(), s.aux[a]);
      save_tensor((fs::path(dir) / dname).string(), s.aux_depth[a]);
      js["aux"].push_back(aname);
      js["aux_depth"].push_back(dname);
      js["poses"].push_back(pose_to_json(s.poses[a]));
    }
    man["samples"].push_back(js);
  }

  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw std::runtime_error("save_dataset: cannot write manifest in " + dir);
  os << man.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw std::runtime_error("load_dataset: missing manifest.json in " + dir);
  json man;
  try {
    is >> man;
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("load_dataset: manifest parse error: ") + e.what());
  }
  if (man.value("format", "") != "dds1")
    throw std::runtime_error("load_dataset: unsupported manifest format");

  Dataset ds;
  try {
    const auto& cam = man.at("camera");
    ds.camera.fx = cam.at("fx").get<double>();
    ds.camera.fy = cam.at("fy").get<double>();
    ds.camera.cx = cam.at("cx").get<double>();
    ds.camera.cy = cam.at("cy").get<double>();
    ds.camera.width = cam.at("width").get<int>();
    ds.camera.height = cam.at("height").get<int>();
    ds.camera.validate();
    ds.d_max = man.at("d_max").get<double>();
    ds.aux_count = man.at("aux_count").get<int>();
    ds.seed = man.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("load_dataset: bad manifest header: ") + e.what());
  }

  for (const auto& js : man.at("samples")) {
    Sample s;
    try {
      s.index = js.at("index").get<int>();
      s.split = js.at("split").get<std::string>();
      s.seed = js.at("seed").get<std::uint64_t>();
      s.corruption.kind = js.at("corruption").at("kind").get<std::string>();
      s.corruption.level = js.at("corruption").at("level").get<int>();
      s.corruption.seed = js.at("corruption").at("seed").get<std::uint64_t>();
      s.clear = read_ppm((fs::path(dir) / js.at("clear").get<std::string>()).string());
      s.aug = read_ppm((fs::path(dir) / js.at("aug").get<std::string>()).string());
      s.depth = load_tensor<double>((fs::path(dir) / js.at("depth").get<std::string>()).string());
      const auto& aux = js.at("aux");
      const auto& auxd = js.at("aux_depth");
      const auto& poses = js.at("poses");
      if (aux.size() != auxd.size() || aux.size() != poses.size())
        throw std::runtime_error("aux/aux_depth/poses length mismatch");
      for (std::size_t a = 0; a < aux.size(); ++a) {
        s.aux.push_back(read_ppm((fs::path(dir) / aux[a].get<std::string>()).string()));
        s.aux_depth.push_back(load_tensor<double>((fs::path(dir) / auxd[a].get<std::string>()).string()));
        s.poses.push_back(pose_from_json(poses[a]));
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("load_dataset: sample " + std::to_string(ds.samples.size()) + ": " + e.what());
    }
    if (s.clear.dim(1) != ds.camera.height || s.clear.dim(2) != ds.camera.width)
      throw std::runtime_error("load_dataset: sample " + std::to_string(s.index) + ": image size mismatch");
    if (static_cast<int>(s.aux.size()) != ds.aux_count)
      throw std::runtime_error("load_dataset: sample " + std::to_string(s.index) + ": aux count mismatch");
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Tensor<double> visibility_mask(const Sample& s, std::size_t a, const CameraIntrinsics& K,
                               const Tensor<double>& warp_mask, double rel_tol, int erode_radius) {
  if (a >= s.aux_depth.size())
    throw std::out_of_range("visibility_mask: aux index " + std::to_string(a) + " of " +
                            std::to_string(s.aux_depth.size()));
  const std::int64_t H = s.depth.shape()[1], W = s.depth.shape()[2];
  Tensor<double> pts = backproject(s.depth, K);
  ProjectResult<double> pr = project(pts, s.poses[a], K);
  SampleResult<double> aux_d = bilinear_sample(s.aux_depth[a], pr.coords);
  const auto& R = s.poses[a].rotation;
  const auto& t = s.poses[a].translation;
  Tensor<double> vis = Tensor<double>::zeros(warp_mask.shape());
  for (std::int64_t i = 0; i < vis.size(); ++i) {
    const double X = pts.data()[i], Y = pts.data()[H * W + i], Z = pts.data()[2 * H * W + i];
    const double z_aux = R(2, 0) * X + R(2, 1) * Y + R(2, 2) * Z + t(2);
    const bool visible = aux_d.mask.data()[i] > 0 && z_aux > 0 &&
                         std::abs(aux_d.value.data()[i] - z_aux) < rel_tol * z_aux;
    vis.data()[i] = (warp_mask.data()[i] > 0 && visible) ? 1.0 : 0.0;
  }
  if (erode_radius <= 0) return vis;
  Tensor<double> out = Tensor<double>::zeros(vis.shape());
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      double v = 1.0;
      for (std::int64_t dy = -erode_radius; dy <= erode_radius; ++dy)
        for (std::int64_t dx = -erode_radius; dx <= erode_radius; ++dx) {
          const std::int64_t yy = std::clamp(y + dy, std::int64_t{0}, H - 1);
          const std::int64_t xx = std::clamp(x + dx, std::int64_t{0}, W - 1);
          v = std::min(v, vis.data()[yy * W + xx]);
        }
      out.data()[y * W + x] = v;
    }
  return out;
}

}  // namespace diffdepth
