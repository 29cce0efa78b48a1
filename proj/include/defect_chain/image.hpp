#ifndef DEFECT_CHAIN_IMAGE_HPP
#define DEFECT_CHAIN_IMAGE_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <png.h>

#include "defect_chain/error.hpp"

namespace defect_chain {

/// 8-bit grayscale image with physical pixel pitch. Column index runs along
/// x1, row index runs down through the thickness (x3).
class GrayImage {
 public:
  GrayImage() = default;
  GrayImage(int width, int height, double pitch_x1_mm, double pitch_x3_mm, std::uint8_t fill = 0)
      : width_(width),
        height_(height),
        pitch_x1_(pitch_x1_mm),
        pitch_x3_(pitch_x3_mm),
        pixels_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill) {
    if (width < 16 || height < 16) throw ParameterError("images must be at least 16x16 pixels");
    if (!(pitch_x1_mm > 0.0) || !(pitch_x3_mm > 0.0))
      throw ParameterError("pixel pitch must be positive");
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  double pitch_x1() const noexcept { return pitch_x1_; }
  double pitch_x3() const noexcept { return pitch_x3_; }
  void set_pitch(double pitch_x1_mm, double pitch_x3_mm) {
    if (!(pitch_x1_mm > 0.0) || !(pitch_x3_mm > 0.0))
      throw ParameterError("pixel pitch must be positive");
    pitch_x1_ = pitch_x1_mm;
    pitch_x3_ = pitch_x3_mm;
  }

  std::uint8_t at(int col, int row) const {
    return pixels_[static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
                   static_cast<std::size_t>(col)];
  }
  std::uint8_t& at(int col, int row) {
    return pixels_[static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
                   static_cast<std::size_t>(col)];
  }

  bool contains(double col, double row) const noexcept {
    return col >= 0.0 && row >= 0.0 && col <= width_ - 1 && row <= height_ - 1;
  }

  /// Bilinear interpolation at a point inside the image (pixel centres at
  /// integer coordinates).
  double bilinear(double col, double row) const {
    const int c0 = std::min(static_cast<int>(col), width_ - 2);
    const int r0 = std::min(static_cast<int>(row), height_ - 2);
    const double fc = col - c0;
    const double fr = row - r0;
    const double top = (1.0 - fc) * at(c0, r0) + fc * at(c0 + 1, r0);
    const double bottom = (1.0 - fc) * at(c0, r0 + 1) + fc * at(c0 + 1, r0 + 1);
    return (1.0 - fr) * top + fr * bottom;
  }

  /// Bilinear interpolation with coordinates clamped to the image.
  double bilinear_clamped(double col, double row) const {
    return bilinear(std::clamp(col, 0.0, width_ - 1.0), std::clamp(row, 0.0, height_ - 1.0));
  }

  const std::vector<std::uint8_t>& pixels() const noexcept { return pixels_; }
  std::vector<std::uint8_t>& pixels() noexcept { return pixels_; }

 private:
  int width_ = 0;
  int height_ = 0;
  double pitch_x1_ = 1.0;
  double pitch_x3_ = 1.0;
  std::vector<std::uint8_t> pixels_;
};

inline std::uint8_t to_gray(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) and PNG. Pitches are not stored in either format; they
// come from the sidecar metadata.

inline void write_pgm(const GrayImage& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels().data()),
            static_cast<std::streamsize>(img.pixels().size()));
}

inline GrayImage read_pgm(const std::string& path, double pitch_x1_mm = 1.0,
                          double pitch_x3_mm = 1.0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string comment;
        std::getline(in, comment);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  if (token() != "P5") throw DataError(path + " is not a binary PGM (P5)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw DataError("malformed PGM header in " + path);
  }
  if (maxval != 255) throw DataError("only 8-bit PGM is supported: " + path);
  GrayImage img(w, h, pitch_x1_mm, pitch_x3_mm);
  in.read(reinterpret_cast<char*>(img.pixels().data()),
          static_cast<std::streamsize>(img.pixels().size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels().size()))
    throw DataError("truncated PGM data in " + path);
  return img;
}

inline GrayImage read_png(const std::string& path, double pitch_x1_mm = 1.0,
                          double pitch_x3_mm = 1.0) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw IoError("cannot read PNG " + path + ": " + image.message);
  image.format = PNG_FORMAT_GRAY;
  const auto w = static_cast<int>(image.width);
  const auto h = static_cast<int>(image.height);
  if (w < 16 || h < 16) {
    png_image_free(&image);
    throw DataError("image too small: " + path);
  }
  GrayImage img(w, h, pitch_x1_mm, pitch_x3_mm);
  if (!png_image_finish_read(&image, nullptr, img.pixels().data(), 0, nullptr))
    throw DataError("cannot decode PNG " + path + ": " + image.message);
  return img;
}

inline void write_png(const GrayImage& img, const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.pixels().data(), 0, nullptr))
    throw IoError("cannot write PNG " + path + ": " + image.message);
}

/// Reads PGM or PNG by extension.
inline GrayImage read_image(const std::string& path, double pitch_x1_mm = 1.0,
                            double pitch_x3_mm = 1.0) {
  auto ext = std::filesystem::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".png") return read_png(path, pitch_x1_mm, pitch_x3_mm);
  return read_pgm(path, pitch_x1_mm, pitch_x3_mm);
}

}  // namespace defect_chain

#endif  // DEFECT_CHAIN_IMAGE_HPP
