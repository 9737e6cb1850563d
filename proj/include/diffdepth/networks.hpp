#pragma once

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "diffdepth/rng.hpp"
#include "diffdepth/tensor.hpp"
#include "diffdepth/tensor_io.hpp"
#include "diffdepth/tensor_ops.hpp"

// The three small convolutional networks: a feature extractor that produces
// the conditioning map, a conditional noise-prediction UNet, and an image
// refiner. All convs are 3x3 same-padding; downsampling by stride 2,
// upsampling by nearest-neighbour. Weights are He-uniform except the final
// projection of each net, which starts at zero.

namespace diffdepth {

struct NetworkConfig {
  bool image_conditioning = true;  ///< concat the RGB image into the condition
  int extractor_width = 8;
  int denoiser_width = 16;
  int refiner_width = 8;
  int temb_dim = 16;
  bool final_zero_init = true;

  int cond_channels() const { return image_conditioning ? 4 : 1; }

  nlohmann::json to_json() const {
    return {{"image_conditioning", image_conditioning}, {"extractor_width", extractor_width},
            {"denoiser_width", denoiser_width},         {"refiner_width", refiner_width},
            {"temb_dim", temb_dim},                     {"final_zero_init", final_zero_init}};
  }
  static NetworkConfig from_json(const nlohmann::json& j) {
    NetworkConfig c;
    c.image_conditioning = j.at("image_conditioning").get<bool>();
    c.extractor_width = j.at("extractor_width").get<int>();
    c.denoiser_width = j.at("denoiser_width").get<int>();
    c.refiner_width = j.at("refiner_width").get<int>();
    c.temb_dim = j.at("temb_dim").get<int>();
    c.final_zero_init = j.at("final_zero_init").get<bool>();
    return c;
  }
};

template <typename S>
struct ParamRef {
  std::string name;
  Tensor<S> tensor;
};

template <typename S>
Tensor<S> he_uniform(const Shape& shape, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  return Tensor<S>::rand_uniform(shape, rng, static_cast<S>(-bound), static_cast<S>(bound));
}

template <typename S>
struct ConvLayer {
  Tensor<S> w, b;
  int stride = 1;

  static ConvLayer make(int cin, int cout, int stride, Rng& rng, bool zero_init = false) {
    ConvLayer l;
    l.stride = stride;
    l.w = zero_init ? Tensor<S>::zeros({cout, cin, 3, 3}) : he_uniform<S>({cout, cin, 3, 3}, cin * 9, rng);
    l.b = Tensor<S>::zeros({cout});
    return l;
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, w, b, stride); }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

template <typename S>
struct DenseLayer {
  Tensor<S> w, b;

  static DenseLayer make(int in, int out_n, Rng& rng) {
    DenseLayer l;
    l.w = he_uniform<S>({out_n, in}, in, rng);
    l.b = Tensor<S>::zeros({out_n});
    return l;
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return linear(w, x, b); }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

/// Sinusoidal embedding of an integer diffusion step (graph-free constant).
template <typename S>
Tensor<S> timestep_embedding(int tau, int dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("timestep_embedding: dim must be even and >= 2");
  const int half = dim / 2;
  Tensor<S> out = Tensor<S>::zeros({dim});
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * (half > 1 ? static_cast<double>(i) / (half - 1) : 0.0));
    out.data()[i] = static_cast<S>(std::sin(tau * freq));
    out.data()[half + i] = static_cast<S>(std::cos(tau * freq));
  }
  return out;
}

/// RGB -> single-channel feature map at input resolution.
template <typename S>
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(const NetworkConfig& cfg, Rng& rng) {
    const int w = cfg.extractor_width;
    c1_ = ConvLayer<S>::make(3, w, 1, rng);
    c2_ = ConvLayer<S>::make(w, 2 * w, 2, rng);
    c3_ = ConvLayer<S>::make(2 * w, 2 * w, 1, rng);
    c4_ = ConvLayer<S>::make(2 * w, 1, 1, rng, cfg.final_zero_init);
  }

  Tensor<S> forward(const Tensor<S>& image) const {
    Tensor<S> h = elu(c1_(image));
    h = elu(c2_(h));
    h = elu(c3_(h));
    return c4_(upsample2_nearest(h));
  }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    c1_.collect(prefix + ".c1", out);
    c2_.collect(prefix + ".c2", out);
    c3_.collect(prefix + ".c3", out);
    c4_.collect(prefix + ".c4", out);
  }

 private:
  ConvLayer<S> c1_, c2_, c3_, c4_;
};

/// Noise prediction eps(d_tau, tau, condition). Two stride-2 stages down,
/// two nearest-upsample stages back with skip connections; the timestep
/// embedding enters each encoder stage as a learned per-channel bias.
template <typename S>
class ConditionalDenoiser {
 public:
  ConditionalDenoiser() = default;
  ConditionalDenoiser(const NetworkConfig& cfg, Rng& rng) : temb_dim_(cfg.temb_dim) {
    const int w = cfg.denoiser_width;
    stem_ = ConvLayer<S>::make(1 + cfg.cond_channels(), w, 1, rng);
    down1_ = ConvLayer<S>::make(w, w, 2, rng);
    p1_ = DenseLayer<S>::make(cfg.temb_dim, w, rng);
    res1_ = ConvLayer<S>::make(w, w, 1, rng);
    down2_ = ConvLayer<S>::make(w, w, 2, rng);
    p2_ = DenseLayer<S>::make(cfg.temb_dim, w, rng);
    res2_ = ConvLayer<S>::make(w, w, 1, rng);
    up1_ = ConvLayer<S>::make(2 * w, w, 1, rng);
    up2_ = ConvLayer<S>::make(2 * w, w, 1, rng);
    out_ = ConvLayer<S>::make(w, 1, 1, rng, cfg.final_zero_init);
  }

  Tensor<S> forward(const Tensor<S>& d_tau, int tau, const Tensor<S>& cond) const {
    if (d_tau.rank() != 3 || d_tau.dim(0) != 1)
      throw ShapeError("denoiser", "latent must be [1,H,W], got " + shape_str(d_tau.shape()));
    if (cond.dim(1) != d_tau.dim(1) || cond.dim(2) != d_tau.dim(2))
      throw ShapeError("denoiser", "condition " + shape_str(cond.shape()) + " vs latent " + shape_str(d_tau.shape()));
    if (d_tau.dim(1) % 4 != 0 || d_tau.dim(2) % 4 != 0)
      throw ShapeError("denoiser", "spatial dims must be divisible by 4");
    Tensor<S> emb = timestep_embedding<S>(tau, temb_dim_);
    Tensor<S> s = elu(stem_(concat_channels<S>({d_tau, cond})));
    Tensor<S> d1 = elu(add_cbias(down1_(s), p1_(emb)));
    d1 = elu(res1_(d1));
    Tensor<S> d2 = elu(add_cbias(down2_(d1), p2_(emb)));
    d2 = elu(res2_(d2));
    Tensor<S> u1 = elu(up1_(concat_channels<S>({upsample2_nearest(d2), d1})));
    Tensor<S> u2 = elu(up2_(concat_channels<S>({upsample2_nearest(u1), s})));
    return out_(u2);
  }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    stem_.collect(prefix + ".stem", out);
    down1_.collect(prefix + ".down1", out);
    p1_.collect(prefix + ".p1", out);
    res1_.collect(prefix + ".res1", out);
    down2_.collect(prefix + ".down2", out);
    p2_.collect(prefix + ".p2", out);
    res2_.collect(prefix + ".res2", out);
    up1_.collect(prefix + ".up1", out);
    up2_.collect(prefix + ".up2", out);
    out_.collect(prefix + ".out", out);
  }

 private:
  int temb_dim_ = 16;
  ConvLayer<S> stem_, down1_, res1_, down2_, res2_, up1_, up2_, out_;
  DenseLayer<S> p1_, p2_;
};

/// Residual image cleaner: I + r(I).
template <typename S>
class Refiner {
 public:
  Refiner() = default;
  Refiner(const NetworkConfig& cfg, Rng& rng) {
    const int w = cfg.refiner_width;
    c1_ = ConvLayer<S>::make(3, w, 2, rng);
    c2_ = ConvLayer<S>::make(w, w, 1, rng);
    c3_ = ConvLayer<S>::make(w, 3, 1, rng, cfg.final_zero_init);
  }

  Tensor<S> forward(const Tensor<S>& image) const {
    Tensor<S> h = elu(c1_(image));
    h = elu(c2_(h));
    return add(image, c3_(upsample2_nearest(h)));
  }

  void collect(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    c1_.collect(prefix + ".c1", out);
    c2_.collect(prefix + ".c2", out);
    c3_.collect(prefix + ".c3", out);
  }

 private:
  ConvLayer<S> c1_, c2_, c3_;
};

/// The full trainable bundle plus the conditioning convention.
template <typename S>
struct NetworkSet {
  NetworkConfig config;
  FeatureExtractor<S> extractor;
  ConditionalDenoiser<S> denoiser;
  Refiner<S> refiner;

  NetworkSet() = default;
  NetworkSet(const NetworkConfig& cfg, Rng& rng)
      : config(cfg), extractor(cfg, rng), denoiser(cfg, rng), refiner(cfg, rng) {}

  /// Stable name -> tensor list (checkpoint and optimizer order).
  std::vector<ParamRef<S>> params() {
    std::vector<ParamRef<S>> out;
    extractor.collect("extractor", out);
    denoiser.collect("denoiser", out);
    refiner.collect("refiner", out);
    return out;
  }

  /// Conditioning input for the denoiser: feature map, optionally with the
  /// image stacked on top.
  Tensor<S> condition(const Tensor<S>& image) const {
    Tensor<S> feat = extractor.forward(image);
    return config.image_conditioning ? concat_channels<S>({image, feat}) : feat;
  }

  void set_trainable(bool on) {
    for (auto& p : params()) p.tensor.set_requires_grad(on);
  }

  /// Deep value copy (teacher snapshots).
  NetworkSet clone() const {
    Rng dummy(0);
    NetworkSet out(config, dummy);
    auto self = const_cast<NetworkSet*>(this)->params();
    auto dst = out.params();
    for (std::size_t i = 0; i < self.size(); ++i) dst[i].tensor.update_value(self[i].tensor.array());
    return out;
  }
};

// ---------------------------------------------------------------------------
// Checkpoints: "DDCK" magic, version, JSON manifest (meta + network config +
// ordered tensor table), then one tensor blob per entry. All tensors are
// stored as f64 so checkpoints are independent of the training precision
// (f32 values survive the f64 round trip bitwise).
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  int stage = 0;
  int epoch = 0;
  long long step = 0;
  std::uint64_t seed = 0;
  std::string precision = "f64";
  std::string config_hash;
  std::string rng_state;
  nlohmann::json extra;  // trainer config snapshot etc.
};

template <typename S>
void save_checkpoint(const std::string& path, NetworkSet<S>& nets, const CheckpointMeta& meta,
                     const std::vector<std::pair<std::string, Tensor<S>>>& aux_tensors = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);

  std::vector<std::pair<std::string, Tensor<S>>> entries;
  for (auto& p : nets.params()) entries.emplace_back(p.name, p.tensor);
  for (auto& p : aux_tensors) entries.push_back(p);

  nlohmann::json man;
  man["format"] = "ddck";
  man["network"] = nets.config.to_json();
  man["meta"] = {{"stage", meta.stage},
                 {"epoch", meta.epoch},
                 {"step", meta.step},
                 {"seed", meta.seed},
                 {"precision", meta.precision},
                 {"config_hash", meta.config_hash},
                 {"rng_state", meta.rng_state},
                 {"extra", meta.extra}};
  man["tensors"] = nlohmann::json::array();
  for (auto& [name, t] : entries) man["tensors"].push_back({{"name", name}, {"shape", t.shape()}});

  const std::string mj = man.dump();
  os.write("DDCK", 4);
  detail::write_u32(os, 1);
  detail::write_u64(os, mj.size());
  os.write(mj.data(), static_cast<std::streamsize>(mj.size()));
  for (auto& [name, t] : entries) write_tensor(os, cast<double>(t));
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

template <typename S>
struct LoadedCheckpoint {
  NetworkConfig network;
  CheckpointMeta meta;
  std::map<std::string, Tensor<S>> tensors;
};

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[4] = {};
  if (!is.read(magic, 4) || std::string(magic, 4) != "DDCK")
    throw std::runtime_error("checkpoint: bad magic in " + path);
  if (detail::read_u32(is, "version") != 1) throw std::runtime_error("checkpoint: unsupported version");
  const std::uint64_t mlen = detail::read_u64(is, "manifest length");
  if (mlen > (1ull << 30)) throw std::runtime_error("checkpoint: implausible manifest size");
  std::string mj(mlen, '\0');
  if (!is.read(mj.data(), static_cast<std::streamsize>(mlen)))
    throw std::runtime_error("checkpoint: truncated manifest");

  nlohmann::json man;
  try {
    man = nlohmann::json::parse(mj);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("checkpoint: manifest parse error: ") + e.what());
  }
  if (man.value("format", "") != "ddck") throw std::runtime_error("checkpoint: wrong format field");

  LoadedCheckpoint<S> out;
  out.network = NetworkConfig::from_json(man.at("network"));
  const auto& m = man.at("meta");
  out.meta.stage = m.at("stage").get<int>();
  out.meta.epoch = m.at("epoch").get<int>();
  out.meta.step = m.at("step").get<long long>();
  out.meta.seed = m.at("seed").get<std::uint64_t>();
  out.meta.precision = m.at("precision").get<std::string>();
  out.meta.config_hash = m.at("config_hash").get<std::string>();
  out.meta.rng_state = m.at("rng_state").get<std::string>();
  out.meta.extra = m.at("extra");

  for (const auto& te : man.at("tensors")) {
    const std::string name = te.at("name").get<std::string>();
    Tensor<double> t = read_tensor<double>(is);
    const auto shape = te.at("shape").get<Shape>();
    if (t.shape() != shape)
      throw std::runtime_error("checkpoint: tensor '" + name + "' shape mismatch vs manifest");
    out.tensors.emplace(name, cast<S>(t));
  }
  return out;
}

/// Rebuilds a network set from a checkpoint. Aux tensors whose names fall
/// outside the network parameter list (optimizer state) are returned too.
template <typename S>
std::pair<NetworkSet<S>, LoadedCheckpoint<S>> load_networks(const std::string& path) {
  LoadedCheckpoint<S> ck = load_checkpoint<S>(path);
  Rng dummy(0);
  NetworkSet<S> nets(ck.network, dummy);
  for (auto& p : nets.params()) {
    auto it = ck.tensors.find(p.name);
    if (it == ck.tensors.end()) throw std::runtime_error("checkpoint: missing parameter '" + p.name + "'");
    if (it->second.shape() != p.tensor.shape())
      throw std::runtime_error("checkpoint: parameter '" + p.name + "' has wrong shape");
    p.tensor.update_value(it->second.array());
  }
  return {std::move(nets), std::move(ck)};
}

}  // namespace diffdepth
