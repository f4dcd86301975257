#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tilevlm/image.hpp"
#include "tilevlm/rng.hpp"

namespace tvlm {

struct CaptionSample {
  Image image;
  std::string prompt;
  std::string answer;
};

// Compression-study set. Even samples are all-black frames: their canvas
// after downscale-and-pad is bit-identical at every ratio (padding is
// black), so compressing them is free by construction. Odd samples are
// single-pixel checkerboards, the texture most destroyed by resampling —
// any downscale smears them toward mid gray. Both classes share one canvas
// size so token geometry never varies.
inline std::vector<CaptionSample> make_vrc_set(std::size_t n, std::uint64_t seed) {
  Rng rng = derive_rng(seed, "data.vrc");
  std::vector<CaptionSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    CaptionSample s;
    s.prompt = "kind:";
    if (i % 2 == 0) {
      s.image = Image(32, 32, 3, 0.0);
      s.answer = "flat";
    } else {
      double lo = rng.uniform(0.02, 0.12);
      double hi = rng.uniform(0.88, 0.98);
      std::size_t phase = static_cast<std::size_t>(rng.next_below(2));
      Image img(32, 32, 3);
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) {
          double v = ((x + y + phase) % 2 == 0) ? hi : lo;
          for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = v;
        }
      s.image = std::move(img);
      s.answer = "fine";
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Four-class captioning set: solid bright, solid dark, horizontal bands,
// vertical bands. Band width matches half a patch so a single patch already
// carries the orientation. Per-sample brightness jitter keeps the classes
// from collapsing to four fixed images.
inline std::vector<CaptionSample> make_caption_set(std::size_t n, std::uint64_t seed) {
  Rng rng = derive_rng(seed, "data.caption");
  std::vector<CaptionSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    CaptionSample s;
    s.prompt = "caption:";
    Image img(32, 32, 3);
    std::size_t cls = i % 4;
    if (cls == 0 || cls == 1) {
      double v = cls == 0 ? rng.uniform(0.65, 0.9) : rng.uniform(0.1, 0.35);
      for (double& d : img.data) d = v;
      s.answer = cls == 0 ? "bright" : "dark";
    } else {
      double lo = rng.uniform(0.05, 0.2);
      double hi = rng.uniform(0.8, 0.95);
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) {
          std::size_t band = (cls == 2 ? y : x) / 4;
          double v = (band % 2 == 0) ? hi : lo;
          for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = v;
        }
      s.answer = cls == 2 ? "rows" : "cols";
    }
    s.image = std::move(img);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace tvlm
