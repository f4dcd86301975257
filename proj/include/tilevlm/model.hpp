#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tilevlm/decoder.hpp"
#include "tilevlm/image.hpp"
#include "tilevlm/vit.hpp"

namespace tvlm {

enum class Branch { kSmall, kLarge };

inline const char* branch_name(Branch b) { return b == Branch::kSmall ? "small" : "large"; }

inline Branch parse_branch(const std::string& s) {
  if (s == "small") return Branch::kSmall;
  if (s == "large") return Branch::kLarge;
  throw ParameterError("unknown branch '" + s + "' (expected small|large)");
}

struct EngineConfig {
  std::size_t tile_size = 32;
  std::size_t max_tiles = 8;
  std::size_t channels = 3;
  std::size_t shuffle = 2;  // space-to-depth factor applied after each encoder
  BranchConfig small{"small", /*patch=*/8, /*depth=*/3, /*dim=*/32, /*heads=*/4, /*mlp_ratio=*/4};
  BranchConfig large{"large", /*patch=*/8, /*depth=*/6, /*dim=*/64, /*heads=*/4, /*mlp_ratio=*/4};
  std::size_t adapter_dim = 128;  // both branches adapt into this width
  std::size_t d_lm = 64;
  std::size_t dec_depth = 4;
  std::size_t dec_heads = 4;
  std::size_t max_seq = 256;
  std::uint64_t seed = 42;
};

// Everything a training/loss pass needs to know about one assembled
// sequence: embeddings, the id stream, and the next-token supervision.
struct SequenceBundle {
  Tensor embs;                 // [t x d_lm]
  std::vector<int> ids;        // length t
  std::vector<int> targets;    // targets[i] = ids[i+1]; last entry unused
  std::vector<bool> loss_mask;  // true where the next token is answer content
  std::size_t image_tokens = 0;
};

// The full pipeline: two vision encoders of different capacity feed one
// shared projector and one shared causal decoder. Either branch alone plus
// the shared trunk is a complete captioning model; which branch runs is a
// per-call choice.
struct Engine {
  EngineConfig cfg;
  VitEncoder vit_small;
  VitEncoder vit_large;
  Linear adapter_small;
  Linear adapter_large;
  Projector projector;
  Decoder decoder;

  explicit Engine(const EngineConfig& c) : cfg(c) {
    Rng r_small = derive_rng(c.seed, "init.vit_small");
    Rng r_large = derive_rng(c.seed, "init.vit_large");
    Rng r_adapt = derive_rng(c.seed, "init.adapters");
    Rng r_proj = derive_rng(c.seed, "init.projector");
    Rng r_dec = derive_rng(c.seed, "init.decoder");
    vit_small = VitEncoder(c.small, c.tile_size, c.channels, r_small);
    vit_large = VitEncoder(c.large, c.tile_size, c.channels, r_large);
    std::size_t s2 = c.shuffle * c.shuffle;
    adapter_small = Linear(c.small.dim * s2, c.adapter_dim, r_adapt);
    adapter_large = Linear(c.large.dim * s2, c.adapter_dim, r_adapt);
    projector = Projector(c.adapter_dim, c.adapter_dim, c.d_lm, r_proj);
    decoder = Decoder(c.d_lm, c.dec_heads, c.dec_depth, c.max_seq, r_dec);
  }

  const VitEncoder& vit(Branch b) const { return b == Branch::kSmall ? vit_small : vit_large; }
  const Linear& adapter(Branch b) const { return b == Branch::kSmall ? adapter_small : adapter_large; }

  std::size_t tokens_per_tile(Branch b) const {
    std::size_t g = vit(b).grid / cfg.shuffle;
    return g * g;
  }

  // One tile through encoder, compression, adapter, projector. All tiles are
  // the same size, so this allocates an identical workspace every call — the
  // property the tile-serial runtime measures.
  Tensor encode_one_tile(const Image& tile, Branch b) const {
    const VitEncoder& v = vit(b);
    Tensor toks = v.encode_tile(tile);
    Tensor packed = pixel_shuffle(toks, v.grid, v.grid, cfg.shuffle);
    return projector.forward(adapter(b).forward(packed));
  }

  // Whole padded canvas in one attention context (the non-tiled reference).
  Tensor encode_canvas(const Image& canvas, Branch b) const {
    const VitEncoder& v = vit(b);
    Tensor toks = v.encode_canvas(canvas);
    std::size_t gw = canvas.width / v.cfg.patch, gh = canvas.height / v.cfg.patch;
    Tensor packed = pixel_shuffle(toks, gh, gw, cfg.shuffle);
    return projector.forward(adapter(b).forward(packed));
  }

  // Adaptive tiling followed by per-tile encoding; rows are tile outputs in
  // grid row-major order.
  Tensor encode_image_tokens(const Image& img, Branch b) const {
    TileGrid grid = anyres_tile(img, cfg.tile_size, cfg.max_tiles);
    std::vector<Tensor> parts;
    parts.reserve(grid.tiles.size());
    for (const Image& tile : grid.tiles) parts.push_back(encode_one_tile(tile, b));
    return concat_rows(parts);
  }

  // Sequence layout: [img] x n, BOS, prompt bytes, then (when supervised)
  // answer bytes and EOS. Loss positions are exactly those whose next token
  // is an answer byte or the EOS.
  SequenceBundle assemble(const Tensor& image_tokens, const std::string& prompt,
                          const std::string& answer, bool supervised) const {
    SequenceBundle sb;
    sb.image_tokens = image_tokens.rows();
    sb.ids.assign(sb.image_tokens, vocab::kImg);
    sb.ids.push_back(vocab::kBos);
    for (int id : encode_text(prompt)) sb.ids.push_back(id);
    std::size_t answer_from = sb.ids.size();  // first answer position
    if (supervised) {
      for (int id : encode_text(answer)) sb.ids.push_back(id);
      sb.ids.push_back(vocab::kEos);
    }
    std::size_t t = sb.ids.size();
    if (t > cfg.max_seq)
      throw ContractError("assembled sequence of " + std::to_string(t) + " exceeds window " +
                          std::to_string(cfg.max_seq));

    std::vector<int> text_ids(sb.ids.begin() + static_cast<long>(sb.image_tokens), sb.ids.end());
    sb.embs = concat_rows({image_tokens, decoder.embed_tokens(text_ids)});

    sb.targets.assign(t, 0);
    sb.loss_mask.assign(t, false);
    for (std::size_t i = 0; i + 1 < t; ++i) {
      sb.targets[i] = sb.ids[i + 1];
      sb.loss_mask[i] = supervised && (i + 1 >= answer_from);
    }
    return sb;
  }

  // Supervised cross entropy of one (image, prompt, answer) triple.
  Tensor sample_loss(const Image& img, const std::string& prompt, const std::string& answer,
                     Branch b) const {
    Tensor image_tokens = encode_image_tokens(img, b);
    SequenceBundle sb = assemble(image_tokens, prompt, answer, /*supervised=*/true);
    Tensor logits = decoder.forward(sb.embs);
    return masked_cross_entropy(logits, sb.targets, sb.loss_mask);
  }

  // Logits plus supervision vectors, for losses that combine several views
  // of the same sequence.
  std::pair<Tensor, SequenceBundle> sample_logits(const Image& img, const std::string& prompt,
                                                  const std::string& answer, Branch b) const {
    Tensor image_tokens = encode_image_tokens(img, b);
    SequenceBundle sb = assemble(image_tokens, prompt, answer, /*supervised=*/true);
    Tensor logits = decoder.forward(sb.embs);
    return {logits, std::move(sb)};
  }

  // Greedy answer for one prompt; decoding stops at EOS or max_new bytes.
  std::string infer_answer(const Image& img, const std::string& prompt, Branch b,
                           std::size_t max_new = 16) const {
    NoGradGuard ng;
    Tensor image_tokens = encode_image_tokens(img, b);
    SequenceBundle sb = assemble(image_tokens, prompt, "", /*supervised=*/false);
    return decode_text(decoder.generate(sb.embs, max_new));
  }

  ParamMap params() {
    ParamMap pm;
    vit_small.register_params(pm, "vit_small");
    vit_large.register_params(pm, "vit_large");
    adapter_small.register_params(pm, "adapter_small");
    adapter_large.register_params(pm, "adapter_large");
    projector.register_params(pm, "projector");
    decoder.register_params(pm, "decoder");
    return pm;
  }
};

}  // namespace tvlm
