#include "metastab/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <memory>

namespace metastab {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

Frame load_png(const std::filesystem::path& path) {
  FilePtr fp(fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("png: cannot open " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png: create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png: create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png: decode error in " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  std::vector<png_byte> rowbuf(static_cast<size_t>(w) * 3);
  Frame frame = Frame::blank(static_cast<int>(w), static_cast<int>(h));
  constexpr float kInv = 1.f / 255.f;
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, rowbuf.data(), nullptr);
    float* dst = &frame.rgb[static_cast<size_t>(y) * w * 3];
    for (size_t i = 0; i < rowbuf.size(); ++i) dst[i] = static_cast<float>(rowbuf[i]) * kInv;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return frame;
}

void save_png(const std::filesystem::path& path, const Frame& frame) {
  FilePtr fp(fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("png: cannot open for write " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png: create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png: create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png: encode error for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(frame.width),
               static_cast<png_uint_32>(frame.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_byte> rowbuf(static_cast<size_t>(frame.width) * 3);
  for (int y = 0; y < frame.height; ++y) {
    const float* src = &frame.rgb[static_cast<size_t>(y) * frame.width * 3];
    for (size_t i = 0; i < rowbuf.size(); ++i) {
      const float v = std::clamp(src[i], 0.f, 1.f);
      rowbuf[i] = static_cast<png_byte>(std::lround(v * 255.f));
    }
    png_write_row(png, rowbuf.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

FrameSequence load_sequence(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir))
    throw std::runtime_error("load_sequence: not a directory: " + dir.string());

  std::map<long, fs::path> numbered;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto p = entry.path();
    if (p.extension() != ".png") continue;
    const std::string stem = p.stem().string();
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(),
                                     [](char c) { return c >= '0' && c <= '9'; }))
      continue;
    numbered[std::stol(stem)] = p;
  }
  if (numbered.empty())
    throw std::runtime_error("load_sequence: no frames in " + dir.string());

  long expected = numbered.begin()->first;
  for (const auto& [idx, _] : numbered) {
    if (idx != expected)
      throw std::runtime_error("load_sequence: gap at " + std::to_string(expected) +
                               " in " + dir.string());
    ++expected;
  }

  FrameSequence seq;
  seq.frames.reserve(numbered.size());
  for (const auto& [idx, p] : numbered) {
    Frame f = load_png(p);
    f.index = static_cast<int>(idx - numbered.begin()->first);
    if (!seq.frames.empty() &&
        (f.width != seq.width() || f.height != seq.height()))
      throw std::runtime_error("load_sequence: mixed resolutions at " + p.string());
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

void save_sequence(const std::filesystem::path& dir, const FrameSequence& seq) {
  std::filesystem::create_directories(dir);
  char name[16];
  for (size_t i = 0; i < seq.frames.size(); ++i) {
    snprintf(name, sizeof(name), "%06zu.png", i + 1);
    save_png(dir / name, seq.frames[i]);
  }
}

FrameSequence pad_boundary_frames(const FrameSequence& seq, int k) {
  if (k < 0) throw std::invalid_argument("pad_boundary_frames: k must be >= 0");
  if (k == 0 || seq.empty()) return seq;
  FrameSequence out;
  out.role = seq.role;
  out.frames.reserve(seq.size() + 2 * static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) out.frames.push_back(seq.frames.front());
  out.frames.insert(out.frames.end(), seq.frames.begin(), seq.frames.end());
  for (int i = 0; i < k; ++i) out.frames.push_back(seq.frames.back());
  return out;
}

}  // namespace metastab
