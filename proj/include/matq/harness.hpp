// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "matq/checkpoint.hpp"
#include "matq/common.hpp"
#include "matq/grid.hpp"
#include "matq/matgptq.hpp"
#include "matq/slice.hpp"

namespace matq {

// ---------------------------------------------------------------------------
// Toy model
//
// L residual blocks over a d-dimensional state, then a softmax head:
//   h += W_o W_v rms(h)                 (attention proxy, two d x d linears)
//   h += W_down gelu(W_up rms(h))       (d -> 4d -> d)
//   logits = W_head rms(h)
// The four block linears are the quantized layers; the head stays in float.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kLayersPerBlock = 4;
inline constexpr std::array<const char*, kLayersPerBlock> kLayerRoles{"attn_v", "attn_o", "ffn_up", "ffn_down"};

struct ToyConfig {
  std::size_t dim = 64;
  std::size_t blocks = 4;
  std::size_t vocab = 64;
  std::size_t ffn_mult = 4;
  std::uint64_t seed = 0;
  double head_gain = 2.0;
  /// Optional layer whose weights are scaled up to make it deliberately sensitive.
  std::optional<std::size_t> planted_layer;
  double planted_scale = 10.0;

  std::string tag() const {
    std::string t = "toy:" + std::to_string(seed);
    if (planted_layer) t += ":plant=" + std::to_string(*planted_layer);
    return t;
  }
};

/// Parse "toy:<seed>[:plant=<layer>]".
inline ToyConfig parse_model_tag(const std::string& tag) {
  ToyConfig cfg;
  if (tag.rfind("toy:", 0) != 0) throw Error("unknown model '" + tag + "' (expected toy:<seed>)");
  std::stringstream ss(tag.substr(4));
  std::string part;
  bool first = true;
  while (std::getline(ss, part, ':')) {
    try {
      if (first) {
        std::size_t used = 0;
        cfg.seed = std::stoull(part, &used);
        if (used != part.size()) throw Error("bad seed");
        first = false;
      } else if (part.rfind("plant=", 0) == 0) {
        cfg.planted_layer = std::stoull(part.substr(6));
      } else {
        throw Error("unknown option");
      }
    } catch (const std::exception&) {
      throw Error("malformed model tag '" + tag + "'");
    }
  }
  if (first) throw Error("malformed model tag '" + tag + "'");
  return cfg;
}

struct ToyModel {
  ToyConfig config;
  std::vector<std::string> layer_names;  // forward order
  std::vector<MatrixD> weights;          // out x in, forward order
  MatrixD head;                          // vocab x dim

  std::size_t layer_count() const noexcept { return weights.size(); }

  std::size_t layer_index(const std::string& name) const {
    for (std::size_t i = 0; i < layer_names.size(); ++i)
      if (layer_names[i] == name) return i;
    throw Error("model has no layer " + name);
  }
};

inline std::string layer_name(std::size_t block, std::size_t role) {
  return "block" + std::to_string(block) + "." + kLayerRoles[role];
}

inline ToyModel make_toy_model(const ToyConfig& cfg) {
  if (cfg.dim == 0 || cfg.blocks == 0 || cfg.vocab == 0 || cfg.ffn_mult == 0) throw Error("toy model: empty shape");
  ToyModel m;
  m.config = cfg;
  const std::size_t d = cfg.dim, f = cfg.dim * cfg.ffn_mult;
  std::uint64_t stream = cfg.seed * 1000003ull;
  auto init = [&](std::size_t out, std::size_t in) {
    return random_normal(out, in, ++stream, 1.0 / std::sqrt(static_cast<double>(in)));
  };
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::array<std::pair<std::size_t, std::size_t>, kLayersPerBlock> shapes{{{d, d}, {d, d}, {f, d}, {d, f}}};
    for (std::size_t r = 0; r < kLayersPerBlock; ++r) {
      m.layer_names.push_back(layer_name(b, r));
      m.weights.push_back(init(shapes[r].first, shapes[r].second));
    }
  }
  m.head = init(cfg.vocab, d);
  for (auto& v : m.head.flat()) v *= cfg.head_gain;
  if (cfg.planted_layer) {
    if (*cfg.planted_layer >= m.weights.size()) throw Error("planted layer index out of range");
    for (auto& v : m.weights[*cfg.planted_layer].flat()) v *= cfg.planted_scale;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Float forward pass. Weights are passed transposed (in x out) so the inner
// loop is an axpy over outputs.
// ---------------------------------------------------------------------------

inline MatrixF transposed_f32(const MatrixD& W) {
  MatrixF t(W.cols(), W.rows());
  for (std::size_t r = 0; r < W.rows(); ++r)
    for (std::size_t c = 0; c < W.cols(); ++c) t(c, r) = static_cast<float>(W(r, c));
  return t;
}

/// Y (n x out) = X (n x in) * Wt (in x out). Rows go in tiles of four so each
/// weight row is loaded once per tile; every output still sums in ascending k.
inline MatrixF linear(const MatrixF& X, const MatrixF& Wt) {
  if (X.cols() != Wt.rows()) throw Error("linear: shape mismatch");
  MatrixF Y(X.rows(), Wt.cols(), 0.0f);
  const std::size_t out = Wt.cols(), in = X.cols(), n = X.rows();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    float* __restrict y0 = Y.row(i).data();
    float* __restrict y1 = Y.row(i + 1).data();
    float* __restrict y2 = Y.row(i + 2).data();
    float* __restrict y3 = Y.row(i + 3).data();
    for (std::size_t k = 0; k < in; ++k) {
      const float x0 = X(i, k), x1 = X(i + 1, k), x2 = X(i + 2, k), x3 = X(i + 3, k);
      const float* __restrict w = Wt.row(k).data();
      for (std::size_t o = 0; o < out; ++o) {
        y0[o] += x0 * w[o];
        y1[o] += x1 * w[o];
        y2[o] += x2 * w[o];
        y3[o] += x3 * w[o];
      }
    }
  }
  for (; i < n; ++i) {
    float* __restrict y = Y.row(i).data();
    for (std::size_t k = 0; k < in; ++k) {
      const float xv = X(i, k);
      const float* __restrict w = Wt.row(k).data();
      for (std::size_t o = 0; o < out; ++o) y[o] += xv * w[o];
    }
  }
  return Y;
}

inline MatrixF rmsnorm(const MatrixF& X) {
  MatrixF Y = X;
  for (std::size_t i = 0; i < Y.rows(); ++i) {
    auto row = Y.row(i);
    double ss = 0.0;
    for (float v : row) ss += static_cast<double>(v) * v;
    const float inv = static_cast<float>(1.0 / std::sqrt(ss / static_cast<double>(row.size()) + 1e-6));
    for (auto& v : row) v *= inv;
  }
  return Y;
}

/// tanh-form GELU. tanh is the rational approximation u(27 + u^2) / (27 + 9u^2)
/// clamped to [-1, 1], which keeps the loop vectorizable and libm-independent.
inline void gelu_inplace(MatrixF& X) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  for (auto& v : X.flat()) {
    float u = k * (v + 0.044715f * v * v * v);
    u = u < -3.0f ? -3.0f : (u > 3.0f ? 3.0f : u);
    const float t = u * (27.0f + u * u) / (27.0f + 9.0f * u * u);
    v = 0.5f * v * (1.0f + t);
  }
}

inline void add_inplace(MatrixF& A, const MatrixF& B) {
  for (std::size_t i = 0; i < A.size(); ++i) A.flat()[i] += B.flat()[i];
}

/// Transposed weights of the four linears of one block.
using BlockWeights = std::array<const MatrixF*, kLayersPerBlock>;

/// Input seen by layer `role` of a block whose input state is H.
inline MatrixF block_capture(const MatrixF& H, const BlockWeights& w, std::size_t role) {
  MatrixF a = rmsnorm(H);
  if (role == 0) return a;
  MatrixF u = linear(a, *w[0]);
  if (role == 1) return u;
  MatrixF h1 = H;
  add_inplace(h1, linear(u, *w[1]));
  MatrixF a2 = rmsnorm(h1);
  if (role == 2) return a2;
  MatrixF t = linear(a2, *w[2]);
  gelu_inplace(t);
  return t;
}

inline MatrixF block_forward(const MatrixF& H, const BlockWeights& w) {
  MatrixF h = H;
  add_inplace(h, linear(linear(rmsnorm(h), *w[0]), *w[1]));
  MatrixF t = linear(rmsnorm(h), *w[2]);
  gelu_inplace(t);
  add_inplace(h, linear(t, *w[3]));
  return h;
}

/// Transposed float weights for every quantizable layer in forward order plus the head.
struct ForwardWeights {
  std::vector<MatrixF> layers;
  MatrixF head;
};

inline ForwardWeights fp_forward_weights(const ToyModel& model) {
  ForwardWeights fw;
  for (const auto& w : model.weights) fw.layers.push_back(transposed_f32(w));
  fw.head = transposed_f32(model.head);
  return fw;
}

inline BlockWeights block_weights(const std::vector<const MatrixF*>& layers, std::size_t block) {
  BlockWeights w{};
  for (std::size_t r = 0; r < kLayersPerBlock; ++r) w[r] = layers[block * kLayersPerBlock + r];
  return w;
}

/// Hidden state entering block `stop` (stop = blocks gives the final state).
inline MatrixF hidden_state(const MatrixF& X, const std::vector<const MatrixF*>& layers, std::size_t stop) {
  MatrixF h = X;
  for (std::size_t b = 0; b < stop; ++b) h = block_forward(h, block_weights(layers, b));
  return h;
}

inline MatrixF model_logits(const MatrixF& X, const std::vector<const MatrixF*>& layers, const MatrixF& head_t) {
  if (layers.size() % kLayersPerBlock != 0) throw Error("model_logits: partial block");
  return linear(rmsnorm(hidden_state(X, layers, layers.size() / kLayersPerBlock)), head_t);
}

inline std::vector<const MatrixF*> pointers(const std::vector<MatrixF>& v) {
  std::vector<const MatrixF*> p;
  for (const auto& m : v) p.push_back(&m);
  return p;
}

/// Row-wise log-softmax in double precision.
inline MatrixD log_softmax(const MatrixF& logits) {
  MatrixD out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (float v : row) mx = std::max(mx, static_cast<double>(v));
    double s = 0.0;
    for (float v : row) s += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < row.size(); ++j) out(i, j) = static_cast<double>(row[j]) - lse;
  }
  return out;
}

/// Mean over rows of KL(p || q) from log-probabilities; clamped at zero against round-off.
inline double mean_kl(const MatrixD& logp, const MatrixD& logq) {
  if (logp.rows() != logq.rows() || logp.cols() != logq.cols() || logp.rows() == 0)
    throw Error("mean_kl: shape mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < logp.rows(); ++i) {
    double kl = 0.0;
    for (std::size_t j = 0; j < logp.cols(); ++j) kl += std::exp(logp(i, j)) * (logp(i, j) - logq(i, j));
    total += std::max(kl, 0.0);
  }
  return total / static_cast<double>(logp.rows());
}

// ---------------------------------------------------------------------------
// Calibration data
// ---------------------------------------------------------------------------

struct CalibSet {
  MatrixF calib;    // n x d
  MatrixF heldout;  // m x d, disjoint from calib
  std::string tag;
};

inline constexpr std::size_t kDefaultCalibSamples = 2048;
inline constexpr std::size_t kDefaultHeldoutSamples = 512;

inline CalibSet synthetic_calib(std::uint64_t seed, std::size_t dim, std::size_t n = kDefaultCalibSamples,
                                std::size_t heldout = kDefaultHeldoutSamples) {
  if (n == 0) throw Error("calibration set is empty");
  const MatrixD all = random_normal(n + heldout, dim, seed ^ 0x5eedca11b0000000ull);
  CalibSet set{MatrixF(n, dim), MatrixF(heldout, dim), "synthetic:" + std::to_string(seed)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dim; ++j) set.calib(i, j) = static_cast<float>(all(i, j));
  for (std::size_t i = 0; i < heldout; ++i)
    for (std::size_t j = 0; j < dim; ++j) set.heldout(i, j) = static_cast<float>(all(n + i, j));
  return set;
}

// Raw activation file: "MQCA" | n u32 | d u32 | f32[n*d] row-major, little-endian.
// The last fifth of the rows (at least one) is held out.
inline void write_calib_file(const MatrixF& samples, const std::string& path) {
  detail::ByteWriter out;
  out.raw("MQCA", 4);
  out.u32(detail::ByteWriter::checked_u32(samples.rows()));
  out.u32(detail::ByteWriter::checked_u32(samples.cols()));
  for (float v : samples.flat()) out.f32(v);
  detail::save_bytes(out.bytes(), path);
}

inline CalibSet read_calib_file(const std::string& path, std::size_t dim) {
  const auto bytes = detail::load_bytes(path);
  detail::ByteReader in(bytes);
  char magic[4] = {};
  try {
    in.raw(magic, 4);
  } catch (const Error&) {
    throw Error("not a calibration file: " + path);
  }
  if (std::string(magic, 4) != "MQCA") throw Error("not a calibration file: " + path);
  const std::size_t n = in.u32(), d = in.u32();
  if (d != dim) throw Error("calibration dimension " + std::to_string(d) + " does not match model dimension");
  if (n < 2) throw Error("calibration file needs at least two samples");
  MatrixF all(n, d);
  for (auto& v : all.flat()) v = in.f32();
  if (!in.at_end()) throw Error("calibration file has trailing bytes");
  const std::size_t held = std::max<std::size_t>(1, n / 5);
  CalibSet set{MatrixF(n - held, d), MatrixF(held, d), path};
  for (std::size_t i = 0; i < n - held; ++i)
    for (std::size_t j = 0; j < d; ++j) set.calib(i, j) = all(i, j);
  for (std::size_t i = 0; i < held; ++i)
    for (std::size_t j = 0; j < d; ++j) set.heldout(i, j) = all(n - held + i, j);
  return set;
}

/// "synthetic:<seed>" or a path to a raw activation file.
inline CalibSet load_calib(const std::string& spec, std::size_t dim, std::size_t n = kDefaultCalibSamples,
                           std::size_t heldout = kDefaultHeldoutSamples) {
  if (spec.rfind("synthetic:", 0) == 0) {
    try {
      std::size_t used = 0;
      const auto seed = std::stoull(spec.substr(10), &used);
      if (used != spec.size() - 10) throw Error("bad seed");
      return synthetic_calib(seed, dim, n, heldout);
    } catch (const std::exception&) {
      throw Error("malformed calibration spec '" + spec + "'");
    }
  }
  return read_calib_file(spec, dim);
}

// ---------------------------------------------------------------------------
// Layer-by-layer quantization pipeline
// ---------------------------------------------------------------------------

struct PipelineOptions {
  BitWidthSet bits = BitWidthSet::uniform({3, 4, 8});
  std::size_t group_size = 128;
  double damp_rel = 0.01;
  std::size_t block_size = 128;
  ScaleSearch search{};
  /// Capture each layer's inputs from the partially quantized model (true) or the float model.
  bool propagate_quantized = true;
};

struct LayerDiagnostics {
  std::string name;
  std::vector<double> recon_error;  // per target bit-width
  double weighted_error = 0.0;
};

struct PipelineResult {
  Checkpoint checkpoint;
  std::vector<LayerDiagnostics> diagnostics;
};

/// Feature-major double copy (d x n) of captured inputs (n x d).
inline MatrixD feature_major(const MatrixF& X) {
  MatrixD out(X.cols(), X.rows());
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(j, i) = X(i, j);
  return out;
}

/// Quantize every block linear in forward order. After a layer is quantized its
/// master-precision reconstruction replaces it, so later layers calibrate on the
/// activations the quantized parent actually produces.
inline PipelineResult run_pipeline(const ToyModel& model, const CalibSet& calib, const PipelineOptions& opt) {
  if (calib.calib.rows() == 0) throw Error("calibration set is empty");
  if (calib.calib.cols() != model.config.dim) throw Error("calibration dimension does not match model");
  PipelineResult res;
  res.checkpoint.header = CheckpointHeader{opt.bits, opt.group_size, opt.damp_rel, model.config.tag(), calib.tag};

  ForwardWeights fp = fp_forward_weights(model);
  std::vector<MatrixF> current = fp.layers;
  const auto fp_ptrs = pointers(fp.layers);
  MatrixF h_quant = calib.calib;
  MatrixF h_fp = calib.calib;

  for (std::size_t b = 0; b < model.config.blocks; ++b) {
    for (std::size_t role = 0; role < kLayersPerBlock; ++role) {
      const std::size_t li = b * kLayersPerBlock + role;
      const auto cur_ptrs = pointers(current);
      const MatrixF X = opt.propagate_quantized ? block_capture(h_quant, block_weights(cur_ptrs, b), role)
                                                : block_capture(h_fp, block_weights(fp_ptrs, b), role);
      const MatrixD& W = model.weights[li];
      const QuantGrid grid = fit_grid(W, opt.bits, opt.group_size, opt.search);
      const Hessian H = build_hessian(feature_major(X), opt.damp_rel);
      const HessianFactor factor = factor_inverse(H, opt.damp_rel);
      LayerResult lr = quantize_layer(W, factor, grid, opt.bits, opt.block_size, &H, model.layer_names[li]);
      current[li] = transposed_f32(dequantize(lr.layer));
      res.diagnostics.push_back({model.layer_names[li], lr.recon_error, lr.weighted_error});
      res.checkpoint.layers.push_back(std::move(lr.layer));
    }
    const auto cur_ptrs = pointers(current);
    h_quant = block_forward(h_quant, block_weights(cur_ptrs, b));
    h_fp = block_forward(h_fp, block_weights(fp_ptrs, b));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Transposed float weights of sliced layers, ordered as the model's layers.
inline std::vector<MatrixF> sliced_forward_layers(const ToyModel& model, const std::vector<SlicedLayer>& layers) {
  std::vector<MatrixF> out(model.layer_count());
  std::vector<bool> seen(model.layer_count(), false);
  for (const auto& l : layers) {
    const std::size_t i = model.layer_index(l.name);
    if (l.rows() != model.weights[i].rows() || l.cols() != model.weights[i].cols())
      throw Error("layer " + l.name + " shape does not match the model");
    out[i] = transposed_f32(l.dequantize());
    seen[i] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw Error("incomplete config: missing layer " + model.layer_names[i]);
  return out;
}

/// Bit-width sentinel meaning "float weights, no quantization".
inline constexpr int kFloatBits = 16;

inline double eval_kl(const ToyModel& model, const std::vector<SlicedLayer>& layers, const MatrixF& heldout) {
  const ForwardWeights fp = fp_forward_weights(model);
  const MatrixD logp = log_softmax(model_logits(heldout, pointers(fp.layers), fp.head));
  const auto q = sliced_forward_layers(model, layers);
  return mean_kl(logp, log_softmax(model_logits(heldout, pointers(q), fp.head)));
}

inline double eval_kl(const ToyModel& model, const Checkpoint& ckpt, const BitConfig& config,
                      const MatrixF& heldout) {
  return eval_kl(model, slice_model(ckpt.layers, config), heldout);
}

inline double eval_kl(const ToyModel& model, const Checkpoint& ckpt, int r, const MatrixF& heldout) {
  if (r == kFloatBits) {
    const ForwardWeights fp = fp_forward_weights(model);
    const MatrixD logp = log_softmax(model_logits(heldout, pointers(fp.layers), fp.head));
    return mean_kl(logp, logp);
  }
  return eval_kl(model, ckpt, uniform_config(ckpt.layers, r), heldout);
}

struct ReconRow {
  std::string layer;
  int bits = 0;
  double error = 0.0;
};

/// ||dequant(S(Q, r)) X - W X||_F^2 for every layer and target r, with X captured
/// from the master-precision quantized model as during quantization.
inline std::vector<ReconRow> eval_recon(const ToyModel& model, const Checkpoint& ckpt, const CalibSet& calib) {
  std::vector<MatrixF> master;
  for (const auto& name : model.layer_names) master.push_back(transposed_f32(dequantize(ckpt.layer(name))));
  const auto ptrs = pointers(master);
  std::vector<ReconRow> rows;
  MatrixF h = calib.calib;
  for (std::size_t b = 0; b < model.config.blocks; ++b) {
    for (std::size_t role = 0; role < kLayersPerBlock; ++role) {
      const std::size_t li = b * kLayersPerBlock + role;
      const MatrixD X = feature_major(block_capture(h, block_weights(ptrs, b), role));
      const MatrixD& W = model.weights[li];
      const NestedLayer& layer = ckpt.layer(model.layer_names[li]);
      for (int r : layer.bits.targets()) {
        const MatrixD Wq = slice_layer(layer, r).dequantize();
        double total = 0.0;
        std::vector<double> delta(W.cols());
        for (std::size_t o = 0; o < W.rows(); ++o) {
          for (std::size_t k = 0; k < W.cols(); ++k) delta[k] = Wq(o, k) - W(o, k);
          for (std::size_t n = 0; n < X.cols(); ++n) {
            double v = 0.0;
            for (std::size_t k = 0; k < W.cols(); ++k) v += delta[k] * X(k, n);
            total += v * v;
          }
        }
        rows.push_back({layer.name, r, total});
      }
    }
    h = block_forward(h, block_weights(ptrs, b));
  }
  return rows;
}

inline void write_recon_csv(std::ostream& os, const std::vector<ReconRow>& rows) {
  os << "layer,bits,error\n";
  os.precision(17);
  for (const auto& r : rows) os << r.layer << ',' << r.bits << ',' << r.error << '\n';
}

// ---------------------------------------------------------------------------
// Per-token routing analysis over all block configurations at a fixed average
// ---------------------------------------------------------------------------

using BlockConfig = std::array<int, kLayersPerBlock>;

/// Every assignment from `ladder` to the block's layers whose mean is exactly avg_bits.
inline std::vector<BlockConfig> enumerate_block_configs(const std::vector<int>& ladder, double avg_bits) {
  const double target = avg_bits * static_cast<double>(kLayersPerBlock);
  if (std::abs(target - std::round(target)) > 1e-9) throw Error("average bit-width not reachable by integer sums");
  const int sum = static_cast<int>(std::round(target));
  std::vector<BlockConfig> out;
  BlockConfig cur{};
  auto rec = [&](auto&& self, std::size_t i, int partial) -> void {
    if (i == kLayersPerBlock) {
      if (partial == sum) out.push_back(cur);
      return;
    }
    for (int r : ladder) {
      cur[i] = r;
      self(self, i + 1, partial + r);
    }
  };
  rec(rec, 0, 0);
  return out;
}

inline std::string config_label(const BlockConfig& c) {
  std::string s;
  for (std::size_t i = 0; i < c.size(); ++i) s += (i ? "-" : "") + std::to_string(c[i]);
  return s;
}

struct RoutingResult {
  std::size_t block = 0;
  std::vector<BlockConfig> configs;
  std::vector<std::size_t> best_config;  // per token, index into configs
  std::vector<double> best_mse;          // per token
  std::vector<std::size_t> wins;         // per config

  std::optional<std::size_t> plurality_winner() const {
    std::optional<std::size_t> best;
    bool tie = false;
    for (std::size_t i = 0; i < wins.size(); ++i) {
      if (!best || wins[i] > wins[*best]) {
        best = i;
        tie = false;
      } else if (wins[i] == wins[*best]) {
        tie = true;
      }
    }
    if (tie) return std::nullopt;
    return best;
  }
};

/// Per-token block-output MSE against the float block for every configuration;
/// block inputs come from the float model.
inline RoutingResult analyze_routing(const ToyModel& model, const Checkpoint& ckpt, std::size_t block,
                                     const MatrixF& tokens, const std::vector<int>& ladder = {2, 3, 4},
                                     double avg_bits = 3.0) {
  const std::string prefix = "block" + std::to_string(block) + ".";
  std::vector<const NestedLayer*> layers;
  for (const auto& l : ckpt.layers)
    if (l.name.rfind(prefix, 0) == 0) layers.push_back(&l);
  if (layers.size() != kLayersPerBlock)
    throw Error("routing analysis needs exactly 4 layers in block " + std::to_string(block) + ", found " +
                std::to_string(layers.size()));
  if (block >= model.config.blocks) throw Error("block index out of range");
  for (int r : ladder)
    if (r > ckpt.header.master_bits()) throw Error("cannot slice upward: ladder exceeds master bits");

  RoutingResult res;
  res.block = block;
  res.configs = enumerate_block_configs(ladder, avg_bits);
  res.wins.assign(res.configs.size(), 0);

  const ForwardWeights fp = fp_forward_weights(model);
  const auto fp_ptrs = pointers(fp.layers);
  const MatrixF h_in = hidden_state(tokens, fp_ptrs, block);
  const MatrixF h_ref = block_forward(h_in, block_weights(fp_ptrs, block));

  // Dequantized weights per (role, bit-width), ordered by model role.
  std::map<std::pair<std::size_t, int>, MatrixF> cache;
  for (std::size_t role = 0; role < kLayersPerBlock; ++role) {
    const NestedLayer& l = ckpt.layer(layer_name(block, role));
    for (int r : ladder) cache.emplace(std::pair{role, r}, transposed_f32(slice_layer(l, r).dequantize()));
  }

  res.best_config.assign(tokens.rows(), 0);
  res.best_mse.assign(tokens.rows(), std::numeric_limits<double>::infinity());
  for (std::size_t ci = 0; ci < res.configs.size(); ++ci) {
    BlockWeights w{};
    for (std::size_t role = 0; role < kLayersPerBlock; ++role) w[role] = &cache.at({role, res.configs[ci][role]});
    const MatrixF out = block_forward(h_in, w);
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
      double mse = 0.0;
      for (std::size_t j = 0; j < out.cols(); ++j) {
        const double d = static_cast<double>(out(t, j)) - h_ref(t, j);
        mse += d * d;
      }
      mse /= static_cast<double>(out.cols());
      if (mse < res.best_mse[t]) {
        res.best_mse[t] = mse;
        res.best_config[t] = ci;
      }
    }
  }
  for (std::size_t t = 0; t < tokens.rows(); ++t) ++res.wins[res.best_config[t]];
  return res;
}

inline void write_routing_csv(std::ostream& os, const RoutingResult& r) {
  os << "token,best_config,mse\n";
  os.precision(17);
  for (std::size_t t = 0; t < r.best_config.size(); ++t)
    os << t << ',' << config_label(r.configs[r.best_config[t]]) << ',' << r.best_mse[t] << '\n';
}

inline void write_routing_histogram_csv(std::ostream& os, const RoutingResult& r) {
  os << "config,wins\n";
  for (std::size_t i = 0; i < r.configs.size(); ++i) os << config_label(r.configs[i]) << ',' << r.wins[i] << '\n';
}

}  // namespace matq
