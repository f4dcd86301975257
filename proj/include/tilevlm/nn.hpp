#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "tilevlm/rng.hpp"
#include "tilevlm/tensor.hpp"

namespace tvlm {

// Flat name -> tensor registry. Modules append their parameters under a
// dotted prefix; the checkpoint reader/writers and the optimizer walk this.
struct ParamMap {
  std::vector<std::pair<std::string, Tensor>> items;

  void add(const std::string& name, const Tensor& t) { items.emplace_back(name, t); }

  Tensor* find(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }
};

namespace detail {

inline Tensor xavier_init(std::size_t out_f, std::size_t in_f, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(in_f + out_f));
  std::vector<double> w(out_f * in_f);
  for (double& v : w) v = rng.uniform(-limit, limit);
  return Tensor::from({out_f, in_f}, std::move(w)).set_requires_grad();
}

inline Tensor small_uniform_init(std::vector<std::size_t> shape, Rng& rng, double limit = 0.05) {
  std::vector<double> w(shape_numel(shape));
  for (double& v : w) v = rng.uniform(-limit, limit);
  return Tensor::from(std::move(shape), std::move(w)).set_requires_grad();
}

}  // namespace detail

// Affine map y = x W^T + b with weight stored [out x in]. The row-major
// weight layout is what the 4-bit quantizer groups over, so keeping it here
// means quantized and float checkpoints share one layout.
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in_f, std::size_t out_f, Rng& rng)
      : weight(detail::xavier_init(out_f, in_f, rng)),
        bias(Tensor::zeros({out_f}).set_requires_grad()) {}

  Tensor forward(const Tensor& x) const { return add_row_bias(matmul(x, transpose(weight)), bias); }

  void register_params(ParamMap& pm, const std::string& prefix) {
    pm.add(prefix + ".weight", weight);
    pm.add(prefix + ".bias", bias);
  }
};

struct LayerNormModule {
  Tensor gain;
  Tensor bias;
  double eps = 1e-5;

  LayerNormModule() = default;
  explicit LayerNormModule(std::size_t d)
      : gain(Tensor::full({d}, 1.0).set_requires_grad()),
        bias(Tensor::zeros({d}).set_requires_grad()) {}

  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }

  void register_params(ParamMap& pm, const std::string& prefix) {
    pm.add(prefix + ".gain", gain);
    pm.add(prefix + ".bias", bias);
  }
};

struct Mlp {
  Linear fc1;
  Linear fc2;

  Mlp() = default;
  Mlp(std::size_t d, std::size_t hidden, Rng& rng) : fc1(d, hidden, rng), fc2(hidden, d, rng) {}

  Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

  void register_params(ParamMap& pm, const std::string& prefix) {
    fc1.register_params(pm, prefix + ".fc1");
    fc2.register_params(pm, prefix + ".fc2");
  }
};

// Standard multi-head self-attention over a [n x dim] sequence. Score
// matrices are allocated under the "attn_scores" tag so the memory ledger can
// isolate the quadratic part of the workspace.
struct MultiHeadAttention {
  std::size_t dim = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  Linear wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d, std::size_t h, Rng& rng)
      : dim(d), heads(h), head_dim(d / h), wq(d, d, rng), wk(d, d, rng), wv(d, d, rng), wo(d, d, rng) {
    if (d % h != 0)
      throw ParameterError("attention dim " + std::to_string(d) + " not divisible by " +
                           std::to_string(h) + " heads");
  }

  Tensor forward(const Tensor& x, bool causal) const {
    Tensor q = wq.forward(x);
    Tensor k = wk.forward(x);
    Tensor v = wv.forward(x);
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<Tensor> ctx;
    ctx.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      std::size_t c0 = h * head_dim, c1 = c0 + head_dim;
      Tensor qh = slice_cols(q, c0, c1);
      Tensor kh = slice_cols(k, c0, c1);
      Tensor vh = slice_cols(v, c0, c1);
      Tensor scores = matmul(qh, transpose(kh), "attn_scores");
      Tensor probs = causal ? causal_softmax_rows(scale(scores, inv_sqrt))
                            : softmax_rows(scale(scores, inv_sqrt));
      ctx.push_back(matmul(probs, vh));
    }
    return wo.forward(concat_cols(ctx));
  }

  void register_params(ParamMap& pm, const std::string& prefix) {
    wq.register_params(pm, prefix + ".wq");
    wk.register_params(pm, prefix + ".wk");
    wv.register_params(pm, prefix + ".wv");
    wo.register_params(pm, prefix + ".wo");
  }
};

// Pre-norm residual block: x += attn(ln1(x)); x += mlp(ln2(x)).
struct TransformerBlock {
  LayerNormModule ln1, ln2;
  MultiHeadAttention attn;
  Mlp mlp;

  TransformerBlock() = default;
  TransformerBlock(std::size_t d, std::size_t h, std::size_t mlp_hidden, Rng& rng)
      : ln1(d), ln2(d), attn(d, h, rng), mlp(d, mlp_hidden, rng) {}

  Tensor forward(const Tensor& x, bool causal) const {
    Tensor a = add(x, attn.forward(ln1.forward(x), causal));
    return add(a, mlp.forward(ln2.forward(a)));
  }

  void register_params(ParamMap& pm, const std::string& prefix) {
    ln1.register_params(pm, prefix + ".ln1");
    attn.register_params(pm, prefix + ".attn");
    ln2.register_params(pm, prefix + ".ln2");
    mlp.register_params(pm, prefix + ".mlp");
  }
};

}  // namespace tvlm
