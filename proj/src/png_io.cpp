#include "fundus/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <vector>

namespace fundus {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

bool has_png_extension(const std::string& path) {
  auto dot = path.rfind('.');
  if (dot == std::string::npos) return false;
  std::string ext = path.substr(dot + 1);
  for (auto& c : ext) c = static_cast<char>(std::tolower(c));
  return ext == "png";
}

ImageF read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail("cannot open image: " + path);

  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
    fail("not a PNG file: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("PNG decode error: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color_type = png_get_color_type(png, info);

  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (bit_depth == 16) png_set_swap(png);  // stored big-endian; we want host LE
  png_read_update_info(png, info);

  const int channels = png_get_channels(png, info);
  const size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> data(rowbytes * h);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = data.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  const int depth_now = png_get_bit_depth(png, info);
  png_destroy_read_struct(&png, &info, nullptr);

  ImageF img(channels, static_cast<int>(h), static_cast<int>(w));
  const float scale = depth_now == 16 ? 1.0f / 65535.0f : 1.0f / 255.0f;
  for (png_uint_32 y = 0; y < h; ++y) {
    if (depth_now == 16) {
      const auto* p = reinterpret_cast<const uint16_t*>(rows[y]);
      for (png_uint_32 x = 0; x < w; ++x)
        for (int c = 0; c < channels; ++c) img.planes[c](y, x) = p[x * channels + c] * scale;
    } else {
      const png_byte* p = rows[y];
      for (png_uint_32 x = 0; x < w; ++x)
        for (int c = 0; c < channels; ++c) img.planes[c](y, x) = p[x * channels + c] * scale;
    }
  }
  return img;
}

namespace {

void write_png_impl(const std::string& path, int h, int w, int channels, int bit_depth,
                    const std::vector<png_byte>& data) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail("cannot write image: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail("PNG encode error: " + path);
  }
  png_init_io(png, fp.get());
  const int color = channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, w, h, bit_depth, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  const size_t rowbytes = static_cast<size_t>(w) * channels * (bit_depth / 8);
  for (int y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(data.data() + y * rowbytes));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png8(const std::string& path, const ImageF& img) {
  const int h = img.height(), w = img.width(), c = img.channels();
  require(c == 1 || c == 3, "write_png8: need 1 or 3 channels");
  std::vector<png_byte> data(static_cast<size_t>(h) * w * c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        float v = std::clamp(img.planes[ch](y, x), 0.0f, 1.0f);
        data[(static_cast<size_t>(y) * w + x) * c + ch] =
            static_cast<png_byte>(std::lround(v * 255.0f));
      }
  write_png_impl(path, h, w, c, 8, data);
}

void write_png16(const std::string& path, const PlaneF& plane) {
  const int h = static_cast<int>(plane.rows()), w = static_cast<int>(plane.cols());
  std::vector<png_byte> data(static_cast<size_t>(h) * w * 2);
  auto* p16 = reinterpret_cast<uint16_t*>(data.data());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float v = std::clamp(plane(y, x), 0.0f, 1.0f);
      p16[static_cast<size_t>(y) * w + x] = static_cast<uint16_t>(std::lround(v * 65535.0f));
    }
  write_png_impl(path, h, w, 1, 16, data);
}

}  // namespace fundus
