#pragma once

#include <string>
#include <vector>

#include "tilevlm/nn.hpp"

namespace tvlm {

// Byte-level vocabulary: raw bytes 0..255 plus sequence-control ids. Image
// positions carry kImg in the id stream (their content arrives through
// projected vision embeddings, not the token table).
namespace vocab {
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kImg = 258;
inline constexpr int kSize = 259;
}  // namespace vocab

inline std::vector<int> encode_text(const std::string& s) {
  std::vector<int> ids;
  ids.reserve(s.size());
  for (unsigned char c : s) ids.push_back(static_cast<int>(c));
  return ids;
}

inline std::string decode_text(const std::vector<int>& ids) {
  std::string s;
  for (int id : ids)
    if (id >= 0 && id < 256) s.push_back(static_cast<char>(id));
  return s;
}

// Per-layer key/value rows accumulated during incremental decoding.
struct KVCache {
  std::vector<Tensor> k;
  std::vector<Tensor> v;
  std::size_t len = 0;

  explicit KVCache(std::size_t layers) : k(layers), v(layers) {}
};

// Causal transformer over a mixed vision/text embedding sequence. The
// incremental path reproduces the parallel path bit for bit: per-row work is
// identical arithmetic in the same accumulation order, and a full softmax
// over the cache equals the causal-masked row of the parallel pass.
struct Decoder {
  std::size_t dim = 0;
  std::size_t heads = 0;
  std::size_t depth = 0;
  std::size_t max_seq = 0;
  Tensor tok_embed;  // [vocab x dim]
  Tensor pos_embed;  // [max_seq x dim]
  std::vector<TransformerBlock> blocks;
  LayerNormModule ln_f;
  Linear head;  // dim -> vocab

  Decoder() = default;
  Decoder(std::size_t d, std::size_t h, std::size_t layers, std::size_t max_len, Rng& rng)
      : dim(d), heads(h), depth(layers), max_seq(max_len) {
    tok_embed = detail::small_uniform_init({static_cast<std::size_t>(vocab::kSize), d}, rng);
    pos_embed = detail::small_uniform_init({max_len, d}, rng);
    blocks.reserve(layers);
    for (std::size_t i = 0; i < layers; ++i) blocks.emplace_back(d, h, d * 4, rng);
    ln_f = LayerNormModule(d);
    head = Linear(d, static_cast<std::size_t>(vocab::kSize), rng);
  }

  Tensor embed_tokens(const std::vector<int>& ids) const { return embedding_lookup(tok_embed, ids); }

  // Full-sequence forward: [t x dim] embeddings -> [t x vocab] logits.
  Tensor forward(const Tensor& embs) const {
    std::size_t t = embs.rows();
    if (t > max_seq)
      throw ContractError("sequence length " + std::to_string(t) + " exceeds decoder window " +
                          std::to_string(max_seq));
    Tensor x = add(embs, slice_rows(pos_embed, 0, t));
    for (const auto& b : blocks) x = b.forward(x, /*causal=*/true);
    return head.forward(ln_f.forward(x));
  }

  // One embedding row in, logits for the next token out; cache grows by one.
  Tensor decode_step(const Tensor& emb_row, KVCache& cache) const {
    NoGradGuard ng;
    if (emb_row.ndim() != 2 || emb_row.rows() != 1 || emb_row.cols() != dim)
      throw DimensionError("decode_step: expected [1 x " + std::to_string(dim) + "], got " +
                           shape_string(emb_row.shape()));
    if (cache.len >= max_seq)
      throw ContractError("decode cache full at " + std::to_string(max_seq) + " positions");
    Tensor x = add(emb_row, slice_rows(pos_embed, cache.len, cache.len + 1));
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dim / heads));
    std::size_t head_dim = dim / heads;
    for (std::size_t li = 0; li < depth; ++li) {
      const TransformerBlock& b = blocks[li];
      Tensor h = b.ln1.forward(x);
      Tensor k_new = b.attn.wk.forward(h);
      Tensor v_new = b.attn.wv.forward(h);
      cache.k[li] = cache.len == 0 ? k_new : concat_rows({cache.k[li], k_new});
      cache.v[li] = cache.len == 0 ? v_new : concat_rows({cache.v[li], v_new});
      Tensor q = b.attn.wq.forward(h);
      std::vector<Tensor> ctx;
      ctx.reserve(heads);
      for (std::size_t hd = 0; hd < heads; ++hd) {
        std::size_t c0 = hd * head_dim, c1 = c0 + head_dim;
        Tensor qh = slice_cols(q, c0, c1);
        Tensor kh = slice_cols(cache.k[li], c0, c1);
        Tensor vh = slice_cols(cache.v[li], c0, c1);
        Tensor scores = matmul(qh, transpose(kh), "attn_scores");
        Tensor probs = softmax_rows(scale(scores, inv_sqrt));
        ctx.push_back(matmul(probs, vh));
      }
      x = add(x, b.attn.wo.forward(concat_cols(ctx)));
      x = add(x, b.mlp.forward(b.ln2.forward(x)));
    }
    cache.len += 1;
    return head.forward(ln_f.forward(x));
  }

  // Greedy continuation after a prefix of already-embedded positions. Stops
  // at the end-of-sequence id, the step budget, or the window limit,
  // whichever comes first. Ties in the argmax resolve to the lowest id.
  std::vector<int> generate(const Tensor& prefix_embs, std::size_t max_new) const {
    NoGradGuard ng;
    if (prefix_embs.rows() == 0) throw ContractError("generate: empty prefix");
    KVCache cache(depth);
    Tensor logits;
    for (std::size_t r = 0; r < prefix_embs.rows(); ++r)
      logits = decode_step(slice_rows(prefix_embs, r, r + 1), cache);
    std::vector<int> out;
    for (std::size_t step = 0; step < max_new; ++step) {
      int next = 0;
      double best = logits.at(0, 0);
      for (std::size_t j = 1; j < logits.cols(); ++j)
        if (logits.at(0, j) > best) {
          best = logits.at(0, j);
          next = static_cast<int>(j);
        }
      if (next == vocab::kEos) break;
      out.push_back(next);
      if (cache.len >= max_seq) break;
      logits = decode_step(embedding_lookup(tok_embed, {next}), cache);
    }
    return out;
  }

  void register_params(ParamMap& pm, const std::string& prefix) {
    pm.add(prefix + ".tok_embed", tok_embed);
    pm.add(prefix + ".pos_embed", pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].register_params(pm, prefix + ".block" + std::to_string(i));
    ln_f.register_params(pm, prefix + ".ln_f");
    head.register_params(pm, prefix + ".head");
  }
};

}  // namespace tvlm
