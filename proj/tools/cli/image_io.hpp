#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "lavi/tensor.hpp"

namespace lavi::cli {

// Filesystem and image-file failures; the CLI maps them to exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// [-1, 1] to [0, 255]: (x + 1) * 127.5 rounded half to even, clamped.
std::uint8_t to_byte(double x);
double from_byte(std::uint8_t b);

// 8-bit RGB PNG from an image [3, H, W].
void write_png(const std::string& path, const Tensor& image);
// Any 8-bit PNG, expanded to RGB: [3, H, W].
Tensor read_png(const std::string& path);

// Images of equal size laid out row-major on a grid with a 1-pixel white
// gutter.
Tensor contact_sheet(const std::vector<Tensor>& images, int columns);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace lavi::cli
