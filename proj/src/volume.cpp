#include "ctsynth/volume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ctsynth/errors.hpp"

namespace ctsynth {

std::string to_string(const Dims& d) {
  std::ostringstream os;
  os << "(" << d.x << "," << d.y << "," << d.z << ")";
  return os.str();
}

const char* to_string(IntensityDomain d) { return d == IntensityDomain::HU ? "HU" : "UNIT"; }

IntensityDomain intensity_domain_from_string(const std::string& s) {
  if (s == "HU") return IntensityDomain::HU;
  if (s == "UNIT") return IntensityDomain::UNIT;
  throw ValidationError("unknown intensity domain '" + s + "'");
}

void validate_spacing(const Spacing& s) {
  for (std::size_t i = 0; i < 3; ++i) {
    if (!(s[i] > 0.0) || !std::isfinite(s[i])) {
      throw ValidationError("spacing_mm[" + std::to_string(i) + "] must be positive, got " +
                            std::to_string(s[i]));
    }
  }
}

CtVolume::CtVolume(Dims dims, Spacing spacing_mm, IntensityDomain domain, float fill)
    : CtVolume(dims, spacing_mm, domain, std::vector<float>(dims.voxels(), fill)) {}

CtVolume::CtVolume(Dims dims, Spacing spacing_mm, IntensityDomain domain, std::vector<float> data)
    : dims_(dims), spacing_(spacing_mm), domain_(domain), data_(std::move(data)) {
  validate_spacing(spacing_);
  if (data_.size() != dims_.voxels()) {
    throw ShapeError("volume data has " + std::to_string(data_.size()) + " values, grid " +
                     to_string(dims_) + " needs " + std::to_string(dims_.voxels()));
  }
}

void CtVolume::set_spacing_mm(const Spacing& s) {
  validate_spacing(s);
  spacing_ = s;
}

CtVolume clip_and_normalize(const CtVolume& v) {
  if (v.domain() != IntensityDomain::HU) {
    throw DomainError("clip_and_normalize expects an HU volume, got UNIT");
  }
  std::vector<float> out(v.data().begin(), v.data().end());
  const double range = static_cast<double>(kHuMax) - kHuMin;
  for (float& value : out) {
    const double clipped = std::clamp(static_cast<double>(value), double{kHuMin}, double{kHuMax});
    value = static_cast<float>((clipped - kHuMin) / range);
  }
  return CtVolume(v.dims(), v.spacing_mm(), IntensityDomain::UNIT, std::move(out));
}

CtVolume denormalize_to_hu(const CtVolume& v) {
  if (v.domain() != IntensityDomain::UNIT) {
    throw DomainError("denormalize_to_hu expects a UNIT volume, got HU");
  }
  std::vector<float> out(v.data().begin(), v.data().end());
  const double range = static_cast<double>(kHuMax) - kHuMin;
  for (float& value : out) {
    value = static_cast<float>(static_cast<double>(value) * range + kHuMin);
  }
  return CtVolume(v.dims(), v.spacing_mm(), IntensityDomain::HU, std::move(out));
}

namespace {

struct AxisSample {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

// Voxel-centre mapping: output centre i sits at input coordinate (i + 0.5) * n_in / n_out - 0.5.
std::vector<AxisSample> axis_samples(std::size_t n_in, std::size_t n_out) {
  std::vector<AxisSample> samples(n_out);
  const double ratio = static_cast<double>(n_in) / static_cast<double>(n_out);
  const double max_coord = static_cast<double>(n_in - 1);
  for (std::size_t i = 0; i < n_out; ++i) {
    double c = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    c = std::clamp(c, 0.0, max_coord);
    const auto lo = static_cast<std::size_t>(std::floor(c));
    const std::size_t hi = std::min(lo + 1, n_in - 1);
    samples[i] = {lo, hi, c - static_cast<double>(lo)};
  }
  return samples;
}

}  // namespace

CtVolume resample_to_grid(const CtVolume& v, const Dims& target) {
  const Dims& in = v.dims();
  for (std::size_t a = 0; a < 3; ++a) {
    if (in[a] == 0) throw ShapeError("cannot resample: input axis " + std::to_string(a) + " has zero extent");
    if (target[a] == 0) throw ShapeError("resample target axis " + std::to_string(a) + " must be >= 1");
  }
  const auto sx = axis_samples(in.x, target.x);
  const auto sy = axis_samples(in.y, target.y);
  const auto sz = axis_samples(in.z, target.z);

  Spacing spacing = v.spacing_mm();
  for (std::size_t a = 0; a < 3; ++a) {
    spacing[a] *= static_cast<double>(in[a]) / static_cast<double>(target[a]);
  }
  CtVolume out(target, spacing, v.domain());
  auto src = v.data();
  auto dst = out.data();
  for (std::size_t x = 0; x < target.x; ++x) {
    for (std::size_t y = 0; y < target.y; ++y) {
      for (std::size_t z = 0; z < target.z; ++z) {
        const AxisSample& ax = sx[x];
        const AxisSample& ay = sy[y];
        const AxisSample& az = sz[z];
        auto val = [&](std::size_t i, std::size_t j, std::size_t k) {
          return static_cast<double>(src[(i * in.y + j) * in.z + k]);
        };
        const double c00 = val(ax.lo, ay.lo, az.lo) * (1 - az.frac) + val(ax.lo, ay.lo, az.hi) * az.frac;
        const double c01 = val(ax.lo, ay.hi, az.lo) * (1 - az.frac) + val(ax.lo, ay.hi, az.hi) * az.frac;
        const double c10 = val(ax.hi, ay.lo, az.lo) * (1 - az.frac) + val(ax.hi, ay.lo, az.hi) * az.frac;
        const double c11 = val(ax.hi, ay.hi, az.lo) * (1 - az.frac) + val(ax.hi, ay.hi, az.hi) * az.frac;
        const double c0 = c00 * (1 - ay.frac) + c01 * ay.frac;
        const double c1 = c10 * (1 - ay.frac) + c11 * ay.frac;
        dst[out.index(x, y, z)] = static_cast<float>(c0 * (1 - ax.frac) + c1 * ax.frac);
      }
    }
  }
  return out;
}

const char* to_string(Plane p) {
  switch (p) {
    case Plane::XY: return "xy";
    case Plane::YZ: return "yz";
    case Plane::ZX: return "zx";
  }
  return "?";
}

Plane plane_from_string(const std::string& s) {
  if (s == "xy" || s == "XY") return Plane::XY;
  if (s == "yz" || s == "YZ") return Plane::YZ;
  if (s == "zx" || s == "ZX") return Plane::ZX;
  throw ValidationError("unknown plane '" + s + "'");
}

Slice2D extract_plane_slice(const CtVolume& v, Plane plane, std::size_t index) {
  const Dims& d = v.dims();
  Slice2D s;
  switch (plane) {
    case Plane::XY:
      if (index >= d.z) throw ShapeError("XY slice index out of range");
      s.rows = d.x;
      s.cols = d.y;
      s.pixels.resize(s.rows * s.cols);
      for (std::size_t x = 0; x < d.x; ++x)
        for (std::size_t y = 0; y < d.y; ++y) s.pixels[x * d.y + y] = v.at(x, y, index);
      break;
    case Plane::YZ:
      if (index >= d.x) throw ShapeError("YZ slice index out of range");
      s.rows = d.y;
      s.cols = d.z;
      s.pixels.assign(v.data().begin() + static_cast<std::ptrdiff_t>(index * d.y * d.z),
                      v.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * d.y * d.z));
      break;
    case Plane::ZX:
      if (index >= d.y) throw ShapeError("ZX slice index out of range");
      s.rows = d.z;
      s.cols = d.x;
      s.pixels.resize(s.rows * s.cols);
      for (std::size_t z = 0; z < d.z; ++z)
        for (std::size_t x = 0; x < d.x; ++x) s.pixels[z * d.x + x] = v.at(x, index, z);
      break;
  }
  return s;
}

std::vector<Slice2D> extract_plane_slices(const CtVolume& v, Plane plane) {
  const Dims& d = v.dims();
  if (d.voxels() == 0) throw ShapeError("cannot slice an empty volume " + to_string(d));
  const std::size_t count = plane == Plane::XY ? d.z : plane == Plane::YZ ? d.x : d.y;
  std::vector<Slice2D> slices;
  slices.reserve(count);
  for (std::size_t i = 0; i < count; ++i) slices.push_back(extract_plane_slice(v, plane, i));
  return slices;
}

}  // namespace ctsynth
