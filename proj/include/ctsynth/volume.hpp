#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ctsynth {

// Grid extents along (x, y, z).
struct Dims {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t z = 0;

  std::size_t voxels() const { return x * y * z; }
  std::size_t operator[](std::size_t axis) const { return axis == 0 ? x : axis == 1 ? y : z; }
  bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& d);

// Physical voxel size in millimetres along (x, y, z).
using Spacing = std::array<double, 3>;

enum class IntensityDomain { HU, UNIT };

const char* to_string(IntensityDomain d);
IntensityDomain intensity_domain_from_string(const std::string& s);

// Clinical window applied before normalization.
inline constexpr float kHuMin = -1000.0F;
inline constexpr float kHuMax = 1000.0F;

// Canonical axis order every loaded volume is brought into: +x right, +y anterior, +z superior.
inline constexpr const char* kCanonicalOrientation = "RAS";

// A 3D scalar grid. Storage is C-order with z fastest: index = (x * ny + y) * nz + z.
class CtVolume {
 public:
  CtVolume() = default;
  CtVolume(Dims dims, Spacing spacing_mm, IntensityDomain domain, float fill = 0.0F);
  CtVolume(Dims dims, Spacing spacing_mm, IntensityDomain domain, std::vector<float> data);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing_mm() const { return spacing_; }
  IntensityDomain domain() const { return domain_; }
  const std::string& orientation() const { return orientation_; }

  void set_spacing_mm(const Spacing& s);
  void set_domain(IntensityDomain d) { domain_ = d; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return (x * dims_.y + y) * dims_.z + z;
  }
  float& at(std::size_t x, std::size_t y, std::size_t z) { return data_[index(x, y, z)]; }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return data_[index(x, y, z)]; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  bool operator==(const CtVolume&) const = default;

 private:
  Dims dims_;
  Spacing spacing_{1.0, 1.0, 1.0};
  IntensityDomain domain_ = IntensityDomain::UNIT;
  std::string orientation_ = kCanonicalOrientation;
  std::vector<float> data_;
};

void validate_spacing(const Spacing& s);

// Clamp HU to [-1000, 1000] and map affinely onto [0, 1].
CtVolume clip_and_normalize(const CtVolume& v);

// Exact affine inverse of clip_and_normalize: u * 2000 - 1000.
CtVolume denormalize_to_hu(const CtVolume& v);

// Trilinear resampling with voxel-centre alignment. Output spacing is rescaled by
// input_extent / target_extent per axis so the physical field of view is preserved.
CtVolume resample_to_grid(const CtVolume& v, const Dims& target);

enum class Plane { XY, YZ, ZX };

const char* to_string(Plane p);
Plane plane_from_string(const std::string& s);
inline constexpr std::array<Plane, 3> kAllPlanes{Plane::XY, Plane::YZ, Plane::ZX};

// Row-major 2D image.
struct Slice2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> pixels;

  float at(std::size_t r, std::size_t c) const { return pixels[r * cols + c]; }
};

// XY: one slice per z (x rows, y cols). YZ: one per x (y rows, z cols).
// ZX: one per y (z rows, x cols). Slices are ordered by the orthogonal index.
std::vector<Slice2D> extract_plane_slices(const CtVolume& v, Plane plane);

// Single slice at a given orthogonal index.
Slice2D extract_plane_slice(const CtVolume& v, Plane plane, std::size_t index);

}  // namespace ctsynth
