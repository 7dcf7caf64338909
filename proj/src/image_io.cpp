#include "semantix/image_io.hpp"

#include "semantix/rng.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>

namespace semantix {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Tensor load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("failed to decode " + path);
  }

  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_uint_32 width = png_get_image_width(png, info);
  png_uint_32 height = png_get_image_height(png, info);
  png_byte color_type = png_get_color_type(png, info);
  png_byte bit_depth = png_get_bit_depth(png, info);

  // normalize everything to 8-bit RGB
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if (color_type & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS))
    png_set_strip_alpha(png);
  png_read_update_info(png, info);

  std::vector<png_byte> row(png_get_rowbytes(png, info));
  Tensor img(1, 3, static_cast<int>(height), static_cast<int>(width));
  for (png_uint_32 y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(0, c, static_cast<int>(y), static_cast<int>(x)) = row[3 * x + c] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void save_png(const Tensor& image, const std::string& path, int frame) {
  if (image.channels() != 3 && image.channels() != 1)
    throw std::invalid_argument("save_png: need 1 or 3 channels, got " +
                                std::to_string(image.channels()));
  if (frame < 0 || frame >= image.batch())
    throw std::invalid_argument("save_png: frame out of range");

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot write " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("failed to encode " + path);
  }

  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width()),
               static_cast<png_uint_32>(image.height()), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_byte> row(static_cast<size_t>(image.width()) * 3);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        Real v = image.at(frame, std::min(c, image.channels() - 1), y, x);
        v = std::clamp(v, 0.0, 1.0);
        row[3 * static_cast<size_t>(x) + static_cast<size_t>(c)] =
            static_cast<png_byte>(std::lround(v * 255.0));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor resize_image(const Tensor& image, int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("resize_image: bad target dims");
  if (height == image.height() && width == image.width()) return image;
  Tensor out(image.batch(), image.channels(), height, width);
  const Real sy = Real(image.height()) / Real(height);
  const Real sx = Real(image.width()) / Real(width);
  for (int b = 0; b < image.batch(); ++b)
    for (int c = 0; c < image.channels(); ++c)
      for (int y = 0; y < height; ++y) {
        Real fy = (Real(y) + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        Real wy = fy - y0;
        int y1 = std::min(std::max(y0 + 1, 0), image.height() - 1);
        y0 = std::min(std::max(y0, 0), image.height() - 1);
        for (int x = 0; x < width; ++x) {
          Real fx = (Real(x) + 0.5) * sx - 0.5;
          int x0 = static_cast<int>(std::floor(fx));
          Real wx = fx - x0;
          int x1 = std::min(std::max(x0 + 1, 0), image.width() - 1);
          x0 = std::min(std::max(x0, 0), image.width() - 1);
          out.at(b, c, y, x) = (1 - wy) * ((1 - wx) * image.at(b, c, y0, x0) +
                                           wx * image.at(b, c, y0, x1)) +
                               wy * ((1 - wx) * image.at(b, c, y1, x0) +
                                     wx * image.at(b, c, y1, x1));
        }
      }
  return out;
}

Tensor load_frame_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> frames;
  for (int i = 0;; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04d.png", i);
    fs::path p = fs::path(dir) / name;
    if (!fs::exists(p)) break;
    frames.push_back(p.string());
  }
  if (frames.empty())
    throw std::runtime_error("no frame_%04d.png files found in " + dir);

  Tensor first = load_png(frames[0]);
  Tensor video(static_cast<int>(frames.size()), first.channels(), first.height(), first.width());
  for (size_t i = 0; i < frames.size(); ++i) {
    Tensor f = i == 0 ? first : load_png(frames[i]);
    if (f.height() != first.height() || f.width() != first.width())
      throw std::runtime_error("frame size mismatch at " + frames[i]);
    for (int c = 0; c < f.channels(); ++c) video.plane(static_cast<int>(i), c) = f.plane(0, c);
  }
  return video;
}

void save_frame_dir(const Tensor& video, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (int b = 0; b < video.batch(); ++b) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04d.png", b);
    save_png(video, (fs::path(dir) / name).string(), b);
  }
}

std::string file_content_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  char buf[19];
  std::snprintf(buf, sizeof(buf), "fnv1a-%012llx",
                static_cast<unsigned long long>(fnv1a64(bytes) & 0xffffffffffffULL));
  return buf;
}

}  // namespace semantix
