#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "tilevlm/common.hpp"

namespace tvlm {

// Row-major HWC raster, values in [0, 1]. Channel count is 1 or 3 everywhere
// in the engine; the padding value for tiling is 0 (black).
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, double fill = 0.0)
      : width(w), height(h), channels(c), data(w * h * c, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return data[(y * width + x) * channels + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return data[(y * width + x) * channels + c];
  }
  std::size_t numel() const { return data.size(); }
};

// Center-aligned bilinear resampling: output pixel centers map to input
// coordinates (x + 0.5) * win / wout - 0.5, clamped to the valid range.
inline Image bilinear_resize(const Image& img, std::size_t out_w, std::size_t out_h) {
  if (out_w == 0 || out_h == 0) throw ParameterError("bilinear_resize: zero output dimension");
  if (img.width == 0 || img.height == 0) throw ContractError("bilinear_resize: empty input image");
  if (out_w == img.width && out_h == img.height) return img;

  Image out(out_w, out_h, img.channels);
  double sx_ratio = static_cast<double>(img.width) / static_cast<double>(out_w);
  double sy_ratio = static_cast<double>(img.height) / static_cast<double>(out_h);
  for (std::size_t y = 0; y < out_h; ++y) {
    double sy = (static_cast<double>(y) + 0.5) * sy_ratio - 0.5;
    if (sy < 0.0) sy = 0.0;
    double max_y = static_cast<double>(img.height - 1);
    if (sy > max_y) sy = max_y;
    std::size_t y0 = static_cast<std::size_t>(sy);
    std::size_t y1 = y0 + 1 < img.height ? y0 + 1 : y0;
    double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      double sx = (static_cast<double>(x) + 0.5) * sx_ratio - 0.5;
      if (sx < 0.0) sx = 0.0;
      double max_x = static_cast<double>(img.width - 1);
      if (sx > max_x) sx = max_x;
      std::size_t x0 = static_cast<std::size_t>(sx);
      std::size_t x1 = x0 + 1 < img.width ? x0 + 1 : x0;
      double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        double top = img.at(y0, x0, c) * (1.0 - fx) + img.at(y0, x1, c) * fx;
        double bot = img.at(y1, x0, c) * (1.0 - fx) + img.at(y1, x1, c) * fx;
        out.at(y, x, c) = top * (1.0 - fy) + bot * fy;
      }
    }
  }
  return out;
}

// Downscale so the pixel count shrinks by the given area fraction: each side
// scales by sqrt(alpha), rounded to the nearest pixel, floor of one. alpha = 1
// returns the input unchanged (bit-exact).
inline Image resize_area_ratio(const Image& img, double alpha) {
  if (!(alpha > 0.0) || alpha > 1.0)
    throw ParameterError("resize_area_ratio: alpha must lie in (0, 1], got " + std::to_string(alpha));
  if (alpha == 1.0) return img;
  double side = std::sqrt(alpha);
  auto scaled = [side](std::size_t v) {
    long long r = std::llround(static_cast<double>(v) * side);
    return static_cast<std::size_t>(r < 1 ? 1 : r);
  };
  return bilinear_resize(img, scaled(img.width), scaled(img.height));
}

// ---------------------------------------------------------------------------
// Adaptive tiling. An image is scaled (never up) to fit a rows x cols canvas
// of square tiles, padded with black to the canvas, and cut row-major into
// tiles. The grid minimizes wasted padded area; ties prefer fewer tiles, then
// fewer rows.
// ---------------------------------------------------------------------------

struct GridChoice {
  std::size_t rows = 1;
  std::size_t cols = 1;
  double scale = 1.0;
  std::size_t scaled_w = 0;
  std::size_t scaled_h = 0;
};

inline GridChoice select_grid(std::size_t w, std::size_t h, std::size_t tile_size,
                              std::size_t max_tiles) {
  if (w == 0 || h == 0) throw ParameterError("select_grid: empty image");
  if (tile_size == 0) throw ParameterError("select_grid: tile size must be positive");
  if (max_tiles == 0) throw ParameterError("select_grid: tile budget must be positive");

  GridChoice best;
  long long best_waste = -1;
  for (std::size_t rows = 1; rows <= max_tiles; ++rows) {
    for (std::size_t cols = 1; rows * cols <= max_tiles; ++cols) {
      double s = std::min({static_cast<double>(cols * tile_size) / static_cast<double>(w),
                           static_cast<double>(rows * tile_size) / static_cast<double>(h), 1.0});
      auto round_dim = [s](std::size_t v, std::size_t cap) {
        long long r = std::llround(static_cast<double>(v) * s);
        if (r < 1) r = 1;
        if (r > static_cast<long long>(cap)) r = static_cast<long long>(cap);
        return static_cast<std::size_t>(r);
      };
      std::size_t sw = round_dim(w, cols * tile_size);
      std::size_t sh = round_dim(h, rows * tile_size);
      long long waste = static_cast<long long>(rows * cols * tile_size * tile_size) -
                        static_cast<long long>(sw * sh);
      bool better = best_waste < 0 || waste < best_waste ||
                    (waste == best_waste && rows * cols < best.rows * best.cols) ||
                    (waste == best_waste && rows * cols == best.rows * best.cols && rows < best.rows);
      if (better) {
        best = {rows, cols, s, sw, sh};
        best_waste = waste;
      }
    }
  }
  return best;
}

struct TileGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t tile_size = 0;
  double scale = 1.0;
  std::size_t scaled_w = 0;  // content extent inside the padded canvas
  std::size_t scaled_h = 0;
  std::vector<Image> tiles;  // rows * cols square tiles, row-major

  std::size_t tile_count() const { return tiles.size(); }
};

inline TileGrid anyres_tile(const Image& img, std::size_t tile_size, std::size_t max_tiles) {
  GridChoice g = select_grid(img.width, img.height, tile_size, max_tiles);
  Image content = (g.scaled_w == img.width && g.scaled_h == img.height)
                      ? img
                      : bilinear_resize(img, g.scaled_w, g.scaled_h);

  TileGrid grid;
  grid.rows = g.rows;
  grid.cols = g.cols;
  grid.tile_size = tile_size;
  grid.scale = g.scale;
  grid.scaled_w = g.scaled_w;
  grid.scaled_h = g.scaled_h;
  grid.tiles.reserve(g.rows * g.cols);
  for (std::size_t tr = 0; tr < g.rows; ++tr) {
    for (std::size_t tc = 0; tc < g.cols; ++tc) {
      Image tile(tile_size, tile_size, img.channels, 0.0);
      std::size_t y_base = tr * tile_size, x_base = tc * tile_size;
      for (std::size_t y = 0; y < tile_size; ++y) {
        std::size_t sy = y_base + y;
        if (sy >= content.height) break;
        for (std::size_t x = 0; x < tile_size; ++x) {
          std::size_t sx = x_base + x;
          if (sx >= content.width) break;
          for (std::size_t c = 0; c < img.channels; ++c) tile.at(y, x, c) = content.at(sy, sx, c);
        }
      }
      grid.tiles.push_back(std::move(tile));
    }
  }
  return grid;
}

// Inverse of anyres_tile modulo the resize: pastes tiles back onto the canvas
// and crops the content region. Round-tripping an image whose dimensions the
// grid preserves is exact.
inline Image reassemble(const TileGrid& grid) {
  if (grid.tiles.empty()) throw ContractError("reassemble: grid holds no tiles");
  std::size_t c = grid.tiles[0].channels;
  Image canvas(grid.cols * grid.tile_size, grid.rows * grid.tile_size, c, 0.0);
  for (std::size_t tr = 0; tr < grid.rows; ++tr)
    for (std::size_t tc = 0; tc < grid.cols; ++tc) {
      const Image& tile = grid.tiles[tr * grid.cols + tc];
      for (std::size_t y = 0; y < grid.tile_size; ++y)
        for (std::size_t x = 0; x < grid.tile_size; ++x)
          for (std::size_t ch = 0; ch < c; ++ch)
            canvas.at(tr * grid.tile_size + y, tc * grid.tile_size + x, ch) = tile.at(y, x, ch);
    }
  Image out(grid.scaled_w, grid.scaled_h, c);
  for (std::size_t y = 0; y < grid.scaled_h; ++y)
    for (std::size_t x = 0; x < grid.scaled_w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) out.at(y, x, ch) = canvas.at(y, x, ch);
  return out;
}

// ---------------------------------------------------------------------------
// On-disk raster format: "TIMG", then width/height/channels as little-endian
// u32, then row-major interleaved bytes (value * 255, rounded).
// ---------------------------------------------------------------------------

inline void save_image(const Image& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw EngineError("cannot open " + path + " for writing");
  os.write("TIMG", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(img.width));
  detail::put_u32(os, static_cast<std::uint32_t>(img.height));
  detail::put_u32(os, static_cast<std::uint32_t>(img.channels));
  std::vector<unsigned char> bytes(img.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    double v = img.data[i];
    if (v < 0.0) v = 0.0;
    if (v > 1.0) v = 1.0;
    bytes[i] = static_cast<unsigned char>(std::llround(v * 255.0));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw EngineError("failed writing " + path);
}

inline Image load_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw EngineError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "TIMG") throw EngineError(path + ": not a TIMG raster");
  std::uint32_t w = detail::get_u32(is), h = detail::get_u32(is), c = detail::get_u32(is);
  if (w == 0 || h == 0 || (c != 1 && c != 3))
    throw EngineError(path + ": bad raster header (" + std::to_string(w) + "x" + std::to_string(h) +
                      ", " + std::to_string(c) + " channels)");
  Image img(w, h, c);
  std::vector<unsigned char> bytes(img.data.size());
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!is) throw EngineError(path + ": raster payload truncated");
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = static_cast<double>(bytes[i]) / 255.0;
  return img;
}

}  // namespace tvlm
