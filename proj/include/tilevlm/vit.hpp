#pragma once

#include <string>
#include <vector>

#include "tilevlm/image.hpp"
#include "tilevlm/nn.hpp"

namespace tvlm {

// Cut an image into non-overlapping patch rows: one row per patch, patches
// ordered row-major over the patch grid, each flattened y, x, channel.
inline Tensor patchify(const Image& img, std::size_t patch) {
  if (patch == 0 || img.width % patch != 0 || img.height % patch != 0)
    throw DimensionError("patchify: image " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + " not divisible by patch " + std::to_string(patch));
  std::size_t gw = img.width / patch, gh = img.height / patch, c = img.channels;
  std::size_t cols = patch * patch * c;
  Tensor out = Tensor::zeros({gh * gw, cols}, "patches");
  auto& ov = out.mutable_value();
  for (std::size_t pr = 0; pr < gh; ++pr)
    for (std::size_t pc = 0; pc < gw; ++pc) {
      double* row = ov.data() + (pr * gw + pc) * cols;
      std::size_t k = 0;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t ch = 0; ch < c; ++ch)
            row[k++] = img.at(pr * patch + y, pc * patch + x, ch);
    }
  return out;
}

// Token compression by space-to-depth: every s x s neighborhood of the patch
// grid becomes one token whose feature vector concatenates the neighborhood
// row-major. Token count drops by s^2; no information is discarded.
inline Tensor pixel_shuffle(const Tensor& tokens, std::size_t grid_h, std::size_t grid_w,
                            std::size_t s) {
  if (tokens.ndim() != 2 || tokens.rows() != grid_h * grid_w)
    throw DimensionError("pixel_shuffle: token count " + shape_string(tokens.shape()) +
                         " does not match grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w));
  if (s == 0 || grid_h % s != 0 || grid_w % s != 0)
    throw DimensionError("pixel_shuffle: grid " + std::to_string(grid_h) + "x" +
                         std::to_string(grid_w) + " not divisible by factor " + std::to_string(s));
  std::size_t d = tokens.cols();
  std::size_t oh = grid_h / s, ow = grid_w / s;
  std::vector<std::size_t> src(oh * ow * s * s * d);
  std::size_t k = 0;
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c)
      for (std::size_t dy = 0; dy < s; ++dy)
        for (std::size_t dx = 0; dx < s; ++dx) {
          std::size_t src_tok = (r * s + dy) * grid_w + (c * s + dx);
          for (std::size_t j = 0; j < d; ++j) src[k++] = src_tok * d + j;
        }
  return gather_elements(tokens, src, {oh * ow, d * s * s});
}

// Exact inverse of pixel_shuffle, used to show the compression is lossless.
inline Tensor pixel_unshuffle(const Tensor& tokens, std::size_t grid_h, std::size_t grid_w,
                              std::size_t s, std::size_t d) {
  std::size_t oh = grid_h / s, ow = grid_w / s;
  if (tokens.ndim() != 2 || tokens.rows() != oh * ow || tokens.cols() != d * s * s)
    throw DimensionError("pixel_unshuffle: shape " + shape_string(tokens.shape()) +
                         " does not match grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w));
  std::vector<std::size_t> src(grid_h * grid_w * d);
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c)
      for (std::size_t dy = 0; dy < s; ++dy)
        for (std::size_t dx = 0; dx < s; ++dx) {
          std::size_t dst_tok = (r * s + dy) * grid_w + (c * s + dx);
          std::size_t blk = dy * s + dx;
          for (std::size_t j = 0; j < d; ++j)
            src[dst_tok * d + j] = (r * ow + c) * (d * s * s) + blk * d + j;
        }
  return gather_elements(tokens, src, {grid_h * grid_w, d});
}

struct BranchConfig {
  std::string name;
  std::size_t patch = 8;
  std::size_t depth = 3;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
};

// Bidirectional transformer over patch tokens of one tile. Positions are
// learned per tile-local patch index; encoding a multi-tile canvas repeats
// the same position pattern tile-periodically, so a one-tile canvas and its
// single tile produce identical tokens.
struct VitEncoder {
  BranchConfig cfg;
  std::size_t tile_size = 0;
  std::size_t grid = 0;             // patches per tile side
  std::size_t tokens_per_tile = 0;  // grid * grid
  Linear patch_embed;
  Tensor pos_embed;  // [tokens_per_tile x dim]
  std::vector<TransformerBlock> blocks;
  LayerNormModule ln_f;

  VitEncoder() = default;
  VitEncoder(const BranchConfig& c, std::size_t tile, std::size_t channels, Rng& rng)
      : cfg(c), tile_size(tile) {
    if (tile % c.patch != 0)
      throw ParameterError("tile size " + std::to_string(tile) + " not divisible by patch " +
                           std::to_string(c.patch));
    grid = tile / c.patch;
    tokens_per_tile = grid * grid;
    patch_embed = Linear(c.patch * c.patch * channels, c.dim, rng);
    pos_embed = detail::small_uniform_init({tokens_per_tile, c.dim}, rng);
    blocks.reserve(c.depth);
    for (std::size_t i = 0; i < c.depth; ++i)
      blocks.emplace_back(c.dim, c.heads, c.dim * c.mlp_ratio, rng);
    ln_f = LayerNormModule(c.dim);
  }

  Tensor encode(const Tensor& patch_feats, const std::vector<int>& pos_ids) const {
    Tensor x = add(patch_embed.forward(patch_feats), embedding_lookup(pos_embed, pos_ids));
    for (const auto& b : blocks) x = b.forward(x, /*causal=*/false);
    return ln_f.forward(x);
  }

  // One square tile -> [tokens_per_tile x dim].
  Tensor encode_tile(const Image& tile) const {
    if (tile.width != tile_size || tile.height != tile_size)
      throw DimensionError("encode_tile: got " + std::to_string(tile.width) + "x" +
                           std::to_string(tile.height) + ", expected " + std::to_string(tile_size));
    std::vector<int> pos(tokens_per_tile);
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
    return encode(patchify(tile, cfg.patch), pos);
  }

  // Whole padded canvas in one attention context, position pattern repeated
  // per tile. This is the reference the tile-serial encoder is measured
  // against; its score matrices grow with the full canvas token count.
  Tensor encode_canvas(const Image& canvas) const {
    std::size_t gw = canvas.width / cfg.patch, gh = canvas.height / cfg.patch;
    std::vector<int> pos(gh * gw);
    for (std::size_t r = 0; r < gh; ++r)
      for (std::size_t c = 0; c < gw; ++c)
        pos[r * gw + c] = static_cast<int>((r % grid) * grid + (c % grid));
    return encode(patchify(canvas, cfg.patch), pos);
  }

  void register_params(ParamMap& pm, const std::string& prefix) {
    patch_embed.register_params(pm, prefix + ".patch_embed");
    pm.add(prefix + ".pos_embed", pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].register_params(pm, prefix + ".block" + std::to_string(i));
    ln_f.register_params(pm, prefix + ".ln_f");
  }
};

// Two-layer bridge from (adapted) vision features into the decoder width.
// Both branches feed the same instance, which is what lets them share one
// language model.
struct Projector {
  Linear fc1;
  Linear fc2;

  Projector() = default;
  Projector(std::size_t in_f, std::size_t mid, std::size_t out_f, Rng& rng)
      : fc1(in_f, mid, rng), fc2(mid, out_f, rng) {}

  Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

  void register_params(ParamMap& pm, const std::string& prefix) {
    fc1.register_params(pm, prefix + ".fc1");
    fc2.register_params(pm, prefix + ".fc2");
  }
};

}  // namespace tvlm
