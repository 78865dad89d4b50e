#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctsynth/volume.hpp"

namespace ctsynth {

struct GrayImage {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

// HU volumes map [-1000, 1000] and UNIT volumes map [0, 1] onto 0..255, clipped.
std::uint8_t window_to_byte(float value, IntensityDomain domain);

// Central slice of the given plane, windowed.
GrayImage central_slice_image(const CtVolume& v, Plane plane);

void write_png(const std::filesystem::path& path, const GrayImage& image);

// Writes <id>_xy.png, <id>_yz.png and <id>_zx.png into out_dir; returns the paths.
std::vector<std::filesystem::path> write_montage(const CtVolume& v, const std::filesystem::path& out_dir,
                                                 const std::string& id);

}  // namespace ctsynth
