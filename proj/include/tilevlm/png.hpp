#pragma once

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>

#include "tilevlm/image.hpp"

namespace tvlm {

// Decode a PNG into the engine's [0,1] raster. Gray and palette images are
// expanded, 16-bit samples reduced to 8, alpha dropped; output is always
// 3-channel. This is the only third-party image format the tooling accepts,
// and only at the command-line boundary — the core consumes rasters.
inline Image load_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw EngineError("cannot open " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    std::fclose(fp);
    throw EngineError(path + ": not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw EngineError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw EngineError(path + ": PNG decode failed");
  }
  png_init_io(png, fp);
  png_set_sig_bytes(png, 8);
  png_read_png(png, info,
               PNG_TRANSFORM_STRIP_16 | PNG_TRANSFORM_PACKING | PNG_TRANSFORM_EXPAND |
                   PNG_TRANSFORM_STRIP_ALPHA | PNG_TRANSFORM_GRAY_TO_RGB,
               nullptr);
  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  png_byte channels = png_get_channels(png, info);
  png_bytepp rows = png_get_rows(png, info);
  if (channels != 3 || w == 0 || h == 0) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw EngineError(path + ": unsupported PNG layout (got " + std::to_string(channels) +
                      " channels after expansion)");
  }

  Image img(w, h, 3);
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(y, x, c) = static_cast<double>(rows[y][x * 3 + c]) / 255.0;

  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

// Sniff the leading bytes: PNG signature routes to the PNG decoder,
// anything else is treated as the native raster container.
inline Image load_image_any(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw EngineError("cannot open " + path);
  unsigned char head[4] = {0, 0, 0, 0};
  is.read(reinterpret_cast<char*>(head), 4);
  is.close();
  static const unsigned char png_sig[4] = {0x89, 'P', 'N', 'G'};
  if (std::memcmp(head, png_sig, 4) == 0) return load_png(path);
  return load_image(path);
}

}  // namespace tvlm
