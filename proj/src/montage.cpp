#include "ctsynth/montage.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "ctsynth/errors.hpp"
#include "ctsynth/volume_io.hpp"

namespace ctsynth {

std::uint8_t window_to_byte(float value, IntensityDomain domain) {
  double lo = 0.0;
  double hi = 1.0;
  if (domain == IntensityDomain::HU) {
    lo = kHuMin;
    hi = kHuMax;
  }
  if (!std::isfinite(value)) return 0;
  const double u = std::clamp((static_cast<double>(value) - lo) / (hi - lo), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(u * 255.0));
}

GrayImage central_slice_image(const CtVolume& v, Plane plane) {
  const Dims d = v.dims();
  std::size_t index = 0;
  switch (plane) {
    case Plane::XY: index = d.z / 2; break;
    case Plane::YZ: index = d.x / 2; break;
    case Plane::ZX: index = d.y / 2; break;
  }
  const Slice2D s = extract_plane_slice(v, plane, index);
  GrayImage img{s.rows, s.cols, std::vector<std::uint8_t>(s.pixels.size())};
  std::transform(s.pixels.begin(), s.pixels.end(), img.pixels.begin(),
                 [&](float p) { return window_to_byte(p, v.domain()); });
  return img;
}

void write_png(const std::filesystem::path& path, const GrayImage& image) {
  if (image.rows == 0 || image.cols == 0 || image.pixels.size() != image.rows * image.cols) {
    throw ShapeError("png image buffer does not match its shape");
  }
  write_atomically(path, [&](const std::filesystem::path& tmp) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(tmp.c_str(), "wb"), &std::fclose);
    if (!fp) throw Error("cannot open " + tmp.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (png == nullptr) throw Error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (info == nullptr || setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw Error("libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.cols), static_cast<png_uint_32>(image.rows), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t r = 0; r < image.rows; ++r) {
      png_write_row(png, image.pixels.data() + r * image.cols);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  });
}

std::vector<std::filesystem::path> write_montage(const CtVolume& v, const std::filesystem::path& out_dir,
                                                 const std::string& id) {
  std::filesystem::create_directories(out_dir);
  static constexpr const char* kSuffix[] = {"_xy.png", "_yz.png", "_zx.png"};
  std::vector<std::filesystem::path> paths;
  for (std::size_t i = 0; i < kAllPlanes.size(); ++i) {
    auto p = out_dir / (id + kSuffix[i]);
    write_png(p, central_slice_image(v, kAllPlanes[i]));
    paths.push_back(p);
  }
  return paths;
}

}  // namespace ctsynth
