#include "cli/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "lavi/error.hpp"

namespace lavi::cli {

std::uint8_t to_byte(double x) {
  const double v = std::nearbyint((x + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

double from_byte(std::uint8_t b) { return b / 127.5 - 1.0; }

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  *static_cast<std::string*>(png_get_error_ptr(png)) = msg;
  png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

}  // namespace

void write_png(const std::string& path, const Tensor& image) {
  LAVI_EXPECT(image.rank() == 3 && image.dim(0) == 3, "write_png: expected [3, H, W], got " + shape_str(image.shape()));
  const auto h = static_cast<png_uint_32>(image.dim(1));
  const auto w = static_cast<png_uint_32>(image.dim(2));
  std::vector<png_byte> rows(static_cast<std::size_t>(h) * w * 3);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (std::int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) rows[static_cast<std::size_t>(i * 3 + c)] = to_byte(image[c * plane + i]);

  File f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot write '" + path + "'");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("writing '" + path + "': " + err);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (png_uint_32 y = 0; y < h; ++y) png_write_row(png, rows.data() + static_cast<std::size_t>(y) * w * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(f.get()) != 0) throw IoError("writing '" + path + "' failed");
}

Tensor read_png(const std::string& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot read '" + path + "'");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw IoError("'" + path + "' is not a PNG");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng initialization failed");
  }
  std::vector<png_byte> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("reading '" + path + "': " + err);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  rows.resize(static_cast<std::size_t>(h) * w * 3);
  for (png_uint_32 y = 0; y < h; ++y) png_read_row(png, rows.data() + static_cast<std::size_t>(y) * w * 3, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor img({3, static_cast<std::int64_t>(h), static_cast<std::int64_t>(w)});
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (std::int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) img[c * plane + i] = from_byte(rows[static_cast<std::size_t>(i * 3 + c)]);
  return img;
}

Tensor contact_sheet(const std::vector<Tensor>& images, int columns) {
  LAVI_EXPECT(!images.empty() && columns >= 1, "contact_sheet: need at least one image and one column");
  const std::int64_t h = images[0].dim(1), w = images[0].dim(2);
  for (const auto& im : images) {
    LAVI_EXPECT(im.shape() == images[0].shape(), "contact_sheet: images must share one shape");
  }
  const std::int64_t n = static_cast<std::int64_t>(images.size());
  const std::int64_t cols = std::min<std::int64_t>(columns, n);
  const std::int64_t grid_rows = (n + cols - 1) / cols;
  const std::int64_t sh = grid_rows * (h + 1) + 1, sw = cols * (w + 1) + 1;
  Tensor sheet({3, sh, sw}, 1.0);
  for (std::int64_t k = 0; k < n; ++k) {
    const std::int64_t oy = (k / cols) * (h + 1) + 1, ox = (k % cols) * (w + 1) + 1;
    for (int c = 0; c < 3; ++c)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
          sheet[(c * sh + oy + y) * sw + ox + x] = images[static_cast<std::size_t>(k)][(c * h + y) * w + x];
  }
  return sheet;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out.flush()) throw IoError("writing '" + path + "' failed");
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace lavi::cli
