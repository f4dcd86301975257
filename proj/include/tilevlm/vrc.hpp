#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tilevlm/checkpoint.hpp"
#include "tilevlm/model.hpp"

namespace tvlm {

// ---------------------------------------------------------------------------
// Resolution selection. For a candidate area fraction alpha, the degradation
// ratio compares the engine's supervised loss on the downscaled image to the
// loss at full resolution. The chosen label is the smallest alpha whose
// ratio stays within the tolerance; full resolution always qualifies when
// the tolerance admits ratio 1.
// ---------------------------------------------------------------------------

// Candidate area fractions: `levels` values evenly spaced over [0.1, 1.0].
inline std::vector<double> make_alpha_grid(std::size_t levels) {
  if (levels < 2) throw ParameterError("ratio grid needs at least 2 levels");
  std::vector<double> grid(levels);
  for (std::size_t i = 0; i < levels; ++i)
    grid[i] = 0.1 + static_cast<double>(i) * (0.9 / static_cast<double>(levels - 1));
  grid.back() = 1.0;
  return grid;
}

inline const std::vector<double>& default_alpha_grid() {
  static const std::vector<double> grid = make_alpha_grid(10);
  return grid;
}

// Smallest candidate whose degradation ratio stays within the tolerance.
// Full resolution has ratio 1 by definition, so a tolerance of at least 1
// always admits the last grid entry.
inline double select_alpha_star(const std::vector<double>& grid, const std::vector<double>& deltas,
                                double eps) {
  if (grid.empty() || grid.size() != deltas.size())
    throw ParameterError("select_alpha_star: grid and delta table sizes disagree");
  if (eps < 1.0)
    throw ParameterError("select_alpha_star: tolerance must be >= 1, got " + std::to_string(eps));
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (deltas[i] <= eps) return grid[i];
  return 1.0;
}

struct AlphaDecision {
  double alpha_star = 1.0;
  double alpha_prime = 0.0;
  double base_loss = 0.0;
  std::vector<double> deltas;  // ratio per grid entry, grid order
};

// Resolution-independent regression target: alpha scaled by the ratio of the
// image's pixel count to the probe input's pixel count.
inline double normalize_label(std::size_t w, std::size_t h, double alpha_star, std::size_t probe_side) {
  if (w == 0 || h == 0 || probe_side == 0) throw ParameterError("normalize_label: empty geometry");
  return alpha_star * static_cast<double>(w * h) /
         static_cast<double>(probe_side * probe_side);
}

// Inverse of normalize_label plus projection onto the candidate grid:
// clamp into the grid's range, then snap to the nearest entry, preferring
// the higher-resolution side on ties.
inline double recover_alpha(double alpha_prime, std::size_t w, std::size_t h, std::size_t probe_side,
                            const std::vector<double>& grid = default_alpha_grid()) {
  if (grid.empty()) throw ParameterError("recover_alpha: empty grid");
  double raw = alpha_prime * static_cast<double>(probe_side * probe_side) /
               static_cast<double>(w * h);
  if (raw < grid.front()) raw = grid.front();
  if (raw > grid.back()) raw = grid.back();
  double best = grid.front();
  double best_dist = std::abs(raw - grid.front());
  for (double g : grid) {
    double dist = std::abs(raw - g);
    if (dist < best_dist || (dist == best_dist && g > best)) {
      best = g;
      best_dist = dist;
    }
  }
  return best;
}

// Loss ratio of one downscaled view against the full-resolution view. A zero
// baseline loss makes the ratio meaningless, so it is rejected as degenerate.
inline double delta_ratio(const Engine& engine, const Image& img, const std::string& prompt,
                          const std::string& answer, double alpha, Branch b) {
  NoGradGuard ng;
  double base = engine.sample_loss(img, prompt, answer, b).item();
  if (base <= 0.0) throw ContractError("delta_ratio: degenerate sample with zero baseline loss");
  double at = alpha == 1.0 ? base
                           : engine.sample_loss(resize_area_ratio(img, alpha), prompt, answer, b).item();
  return at / base;
}

inline AlphaDecision label_alpha(const Engine& engine, const Image& img, const std::string& prompt,
                                 const std::string& answer, Branch b, double eps,
                                 const std::vector<double>& grid = default_alpha_grid(),
                                 std::size_t probe_side = 64) {
  if (grid.empty()) throw ParameterError("label_alpha: empty grid");
  NoGradGuard ng;
  AlphaDecision d;
  d.base_loss = engine.sample_loss(img, prompt, answer, b).item();
  if (d.base_loss <= 0.0) throw ContractError("label_alpha: degenerate sample with zero baseline loss");
  d.deltas.reserve(grid.size());
  for (double a : grid) {
    double loss = a == 1.0
                      ? d.base_loss
                      : engine.sample_loss(resize_area_ratio(img, a), prompt, answer, b).item();
    d.deltas.push_back(loss / d.base_loss);
  }
  d.alpha_star = select_alpha_star(grid, d.deltas, eps);
  d.alpha_prime = normalize_label(img.width, img.height, d.alpha_star, probe_side);
  return d;
}

// ---------------------------------------------------------------------------
// Tiny convolutional probe that regresses the normalized label from a fixed
// low-resolution view of the image. Four stride-2 depthwise-separable
// blocks, attention-style weighted pooling, and a two-layer head ending in
// softplus so the output is positive and unbounded above.
// ---------------------------------------------------------------------------

inline Tensor image_to_tokens(const Image& img) {
  Tensor t = Tensor::zeros({img.width * img.height, img.channels}, "pixels");
  t.mutable_value() = img.data;
  return t;
}

// Depthwise 3x3 stride-2 convolution (padding 1) via gather + broadcast
// multiply + a constant tap-summing matrix, followed by a pointwise mix.
struct ConvBlock {
  std::size_t c_in = 0, c_out = 0;
  std::size_t h_in = 0, w_in = 0, h_out = 0, w_out = 0;
  Tensor dw_weight;  // [c_in x 9], taps row-major dy,dx
  Tensor dw_bias;    // [c_in]
  Linear pw;
  Tensor sum_mat;    // [9*c_in x c_in] constant: out channel c sums its 9 taps
  Tensor zero_row;   // [1 x c_in] constant padding source
  std::vector<std::size_t> gather_idx;

  ConvBlock() = default;
  ConvBlock(std::size_t ci, std::size_t co, std::size_t hi, std::size_t wi, Rng& rng)
      : c_in(ci), c_out(co), h_in(hi), w_in(wi), h_out((hi + 1) / 2), w_out((wi + 1) / 2),
        pw(ci, co, rng) {
    // Keep activation variance roughly flat through the stack: the 9-tap sum
    // wants uniform(+-sqrt(1/3)) and each gelu halves small signals, which the
    // pointwise weights compensate for with a gain of 2.
    dw_weight = detail::small_uniform_init({ci, 9}, rng, 1.155);
    dw_bias = Tensor::zeros({ci}).set_requires_grad();
    for (double& v : pw.weight.mutable_value()) v *= 2.0;
    sum_mat = Tensor::zeros({9 * ci, ci});
    for (std::size_t k = 0; k < 9; ++k)
      for (std::size_t c = 0; c < ci; ++c) sum_mat.mutable_value()[(k * ci + c) * ci + c] = 1.0;
    zero_row = Tensor::zeros({1, ci});

    gather_idx.resize(h_out * w_out * 9 * ci);
    std::size_t pad_token = h_in * w_in;  // index of the appended zero row
    std::size_t k = 0;
    for (std::size_t y = 0; y < h_out; ++y)
      for (std::size_t x = 0; x < w_out; ++x)
        for (std::size_t dy = 0; dy < 3; ++dy)
          for (std::size_t dx = 0; dx < 3; ++dx) {
            long long sy = 2 * static_cast<long long>(y) + static_cast<long long>(dy) - 1;
            long long sx = 2 * static_cast<long long>(x) + static_cast<long long>(dx) - 1;
            bool inside = sy >= 0 && sy < static_cast<long long>(h_in) && sx >= 0 &&
                          sx < static_cast<long long>(w_in);
            std::size_t tok = inside ? static_cast<std::size_t>(sy) * w_in + static_cast<std::size_t>(sx)
                                     : pad_token;
            for (std::size_t c = 0; c < ci; ++c) gather_idx[k++] = tok * ci + c;
          }
  }

  Tensor forward(const Tensor& tokens) const {
    if (tokens.rows() != h_in * w_in || tokens.cols() != c_in)
      throw DimensionError("conv block: got " + shape_string(tokens.shape()) + ", expected [" +
                           std::to_string(h_in * w_in) + " x " + std::to_string(c_in) + "]");
    Tensor ext = concat_rows({tokens, zero_row});
    Tensor taps = gather_elements(ext, gather_idx, {h_out * w_out, 9 * c_in});
    Tensor w_row = reshape(transpose(dw_weight), {9 * c_in});
    Tensor mixed = matmul(mul_row(taps, w_row), sum_mat);
    Tensor dw = gelu(add_row_bias(mixed, dw_bias));
    return gelu(pw.forward(dw));
  }

  void register_params(ParamMap& pm, const std::string& prefix) {
    pm.add(prefix + ".dw_weight", dw_weight);
    pm.add(prefix + ".dw_bias", dw_bias);
    pw.register_params(pm, prefix + ".pw");
  }
};

struct VrcNet {
  std::size_t probe_side = 64;
  std::uint64_t seed = 0;
  std::vector<ConvBlock> blocks;
  Linear pool_score;  // feature -> scalar position score
  Linear head_fc1;
  Linear head_fc2;

  VrcNet() = default;
  explicit VrcNet(std::size_t side, std::uint64_t sd) : probe_side(side), seed(sd) {
    if (side == 0 || side % 16 != 0)
      throw ParameterError("probe side must be a positive multiple of 16, got " + std::to_string(side));
    Rng rng = derive_rng(sd, "init.vrc");
    const std::size_t chans[5] = {3, 8, 16, 24, 32};
    std::size_t h = side, w = side;
    for (int i = 0; i < 4; ++i) {
      blocks.emplace_back(chans[i], chans[i + 1], h, w, rng);
      h = (h + 1) / 2;
      w = (w + 1) / 2;
    }
    pool_score = Linear(32, 1, rng);
    head_fc1 = Linear(32, 32, rng);
    head_fc2 = Linear(32, 1, rng);
  }

  // Image of any size -> positive scalar prediction of the normalized label.
  Tensor forward(const Image& img) const {
    if (img.channels != 3) throw ContractError("probe expects 3-channel images");
    Image view = bilinear_resize(img, probe_side, probe_side);
    Tensor x = image_to_tokens(view);
    for (const ConvBlock& b : blocks) x = b.forward(x);
    Tensor weights = softmax_rows(transpose(pool_score.forward(x)));  // [1 x positions]
    Tensor pooled = matmul(weights, x);                               // [1 x 32]
    Tensor h = gelu(head_fc1.forward(pooled));
    return softplus(head_fc2.forward(h));  // [1 x 1]
  }

  double predict_alpha(const Image& img, const std::vector<double>& grid = default_alpha_grid()) const {
    NoGradGuard ng;
    double alpha_prime = forward(img).item();
    return recover_alpha(alpha_prime, img.width, img.height, probe_side, grid);
  }

  ParamMap params() {
    ParamMap pm;
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].register_params(pm, "vrc.block" + std::to_string(i));
    pool_score.register_params(pm, "vrc.pool_score");
    head_fc1.register_params(pm, "vrc.head_fc1");
    head_fc2.register_params(pm, "vrc.head_fc2");
    return pm;
  }
};

// ---------------------------------------------------------------------------
// Probe checkpointing, reusing the engine's container format.
// ---------------------------------------------------------------------------

inline void save_vrc(const std::string& path, VrcNet& net) {
  std::vector<CkptEntry> entries;
  entries.push_back(detail::scalar_entry("config.vrc.probe_side", static_cast<double>(net.probe_side)));
  entries.push_back(detail::scalar_entry("config.vrc.seed", static_cast<double>(net.seed)));
  ParamMap pm = net.params();
  for (auto& [name, t] : pm.items) {
    CkptEntry e;
    e.name = name;
    e.shape = t.shape();
    e.f64 = t.value();
    entries.push_back(std::move(e));
  }
  save_checkpoint(path, entries);
}

inline VrcNet load_vrc(const std::string& path) {
  std::vector<CkptEntry> entries = load_checkpoint(path);
  double side = -1.0, sd = 0.0;
  for (const CkptEntry& e : entries) {
    if (e.name == "config.vrc.probe_side") side = e.f64.at(0);
    if (e.name == "config.vrc.seed") sd = e.f64.at(0);
  }
  if (side <= 0.0) throw EngineError(path + ": not a probe checkpoint (missing probe_side)");
  VrcNet net(static_cast<std::size_t>(side), static_cast<std::uint64_t>(sd));
  ParamMap pm = net.params();
  for (auto& [name, t] : pm.items) {
    bool found = false;
    for (const CkptEntry& e : entries) {
      if (e.name != name) continue;
      if (e.shape != t.shape())
        throw EngineError(path + ": " + name + " has shape " + shape_string(e.shape));
      t.mutable_value() = e.f64;
      found = true;
      break;
    }
    if (!found) throw EngineError(path + ": probe checkpoint lacks " + name);
  }
  return net;
}

// ---------------------------------------------------------------------------
// Label records and training.
// ---------------------------------------------------------------------------

struct VrcLabel {
  std::string id;
  std::size_t width = 0;
  std::size_t height = 0;
  double alpha_star = 1.0;
  double alpha_prime = 0.0;
};

inline void save_vrc_labels(const std::string& path, const std::vector<VrcLabel>& labels) {
  std::ofstream os(path);
  if (!os) throw EngineError("cannot open " + path + " for writing");
  os << "id\twidth\theight\talpha_star\talpha_prime\n";
  os.precision(17);
  for (const VrcLabel& l : labels)
    os << l.id << '\t' << l.width << '\t' << l.height << '\t' << l.alpha_star << '\t' << l.alpha_prime
       << '\n';
  if (!os) throw EngineError("failed writing " + path);
}

inline std::vector<VrcLabel> load_vrc_labels(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw EngineError("cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != "id\twidth\theight\talpha_star\talpha_prime")
    throw EngineError(path + ": not a label table (bad header)");
  std::vector<VrcLabel> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    VrcLabel l;
    if (!(ls >> l.id >> l.width >> l.height >> l.alpha_star >> l.alpha_prime))
      throw EngineError(path + ": malformed label row '" + line + "'");
    out.push_back(std::move(l));
  }
  return out;
}

struct VrcTrainItem {
  Image image;
  double alpha_prime = 0.0;
};

// Plain MSE regression on the normalized labels.
inline std::vector<double> train_vrc(VrcNet& net, const std::vector<VrcTrainItem>& items,
                                     std::size_t epochs, double lr) {
  if (items.empty()) throw ContractError("probe training needs at least one labeled item");
  ParamMap params = net.params();
  std::vector<double> epoch_losses;
  epoch_losses.reserve(epochs);
  for (std::size_t e = 0; e < epochs; ++e) {
    double acc = 0.0;
    for (const VrcTrainItem& item : items) {
      Tensor pred = net.forward(item.image);
      Tensor target = Tensor::from({1, 1}, {item.alpha_prime});
      Tensor loss = mse_loss(pred, target);
      acc += loss.item();
      backward(loss);
      for (auto& [name, t] : params.items) {
        sgd_step(t, lr);
        t.zero_grad();
      }
      tape().clear();
    }
    epoch_losses.push_back(acc / static_cast<double>(items.size()));
  }
  return epoch_losses;
}

}  // namespace tvlm
