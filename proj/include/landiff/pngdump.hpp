#pragma once
// Minimal 8-bit grayscale PNG writer for frame dumps. Emits uncompressed
// zlib "stored" blocks, so the only moving parts are the two checksums.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "landiff/common.hpp"
#include "landiff/corpus.hpp"

namespace landiff {
namespace detail {

inline uint32_t crc32_png(const uint8_t* data, size_t n, uint32_t crc = 0xffffffffu) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
  return crc;
}

inline uint32_t adler32(const uint8_t* data, size_t n) {
  uint32_t a = 1, b = 0;
  for (size_t i = 0; i < n; ++i) {
    a = (a + data[i]) % 65521u;
    b = (b + a) % 65521u;
  }
  return (b << 16) | a;
}

inline void put_be32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(uint8_t(x >> 24));
  v.push_back(uint8_t(x >> 16));
  v.push_back(uint8_t(x >> 8));
  v.push_back(uint8_t(x));
}

inline void png_chunk(std::vector<uint8_t>& out, const char type[5],
                      const std::vector<uint8_t>& data) {
  put_be32(out, uint32_t(data.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  put_be32(out, crc32_png(out.data() + start, out.size() - start) ^ 0xffffffffu);
}

}  // namespace detail

inline std::vector<uint8_t> encode_png_gray(const std::vector<uint8_t>& pixels, int64_t width,
                                            int64_t height) {
  if (int64_t(pixels.size()) != width * height || width < 1 || height < 1)
    throw config_error("encode_png_gray: pixel buffer does not match dimensions");
  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

  std::vector<uint8_t> ihdr;
  detail::put_be32(ihdr, uint32_t(width));
  detail::put_be32(ihdr, uint32_t(height));
  ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // 8-bit grayscale, default methods
  detail::png_chunk(out, "IHDR", ihdr);

  // Raw scanlines, each with filter byte 0.
  std::vector<uint8_t> raw;
  raw.reserve(size_t(height * (width + 1)));
  for (int64_t y = 0; y < height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), pixels.begin() + y * width, pixels.begin() + (y + 1) * width);
  }

  // zlib wrapper around deflate stored blocks (max 65535 bytes each).
  std::vector<uint8_t> idat = {0x78, 0x01};
  size_t off = 0;
  while (off < raw.size()) {
    const size_t len = std::min<size_t>(65535, raw.size() - off);
    idat.push_back(off + len == raw.size() ? 1 : 0);  // BFINAL, BTYPE=00
    idat.push_back(uint8_t(len & 0xff));
    idat.push_back(uint8_t(len >> 8));
    idat.push_back(uint8_t(~len & 0xff));
    idat.push_back(uint8_t((~len >> 8) & 0xff));
    idat.insert(idat.end(), raw.begin() + int64_t(off), raw.begin() + int64_t(off + len));
    off += len;
  }
  detail::put_be32(idat, detail::adler32(raw.data(), raw.size()));
  detail::png_chunk(out, "IDAT", idat);
  detail::png_chunk(out, "IEND", {});
  return out;
}

// One PNG per frame: <dir>/frame_000.png, ... Channel 0 only.
inline void dump_clip_frames(const VideoClip& clip, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (int64_t t = 0; t < clip.n_frames; ++t) {
    std::vector<uint8_t> pixels(size_t(clip.height * clip.width));
    for (int64_t y = 0; y < clip.height; ++y)
      for (int64_t x = 0; x < clip.width; ++x) {
        const double v = std::clamp(double(clip.px(t, y, x)), 0.0, 1.0);
        pixels[size_t(y * clip.width + x)] = uint8_t(std::lround(v * 255.0));
      }
    const auto png = encode_png_gray(pixels, clip.width, clip.height);
    char name[32];
    std::snprintf(name, sizeof name, "/frame_%03d.png", int(t));
    std::ofstream out(dir + name, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("dump_clip_frames: cannot write " + dir + name);
    out.write(reinterpret_cast<const char*>(png.data()), int64_t(png.size()));
  }
}

}  // namespace landiff
