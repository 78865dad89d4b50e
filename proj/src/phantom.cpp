#include "ctsynth/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <random>
#include <regex>

#include "ctsynth/errors.hpp"

namespace ctsynth {

const char* to_string(Primitive p) { return p == Primitive::Sphere ? "sphere" : "ellipsoid"; }

const char* to_string(Quadrant q) {
  switch (q) {
    case Quadrant::UpperLeft: return "upper-left";
    case Quadrant::UpperRight: return "upper-right";
    case Quadrant::LowerLeft: return "lower-left";
    case Quadrant::LowerRight: return "lower-right";
  }
  return "?";
}

std::optional<Quadrant> parse_quadrant(const std::string& text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  static const std::regex pattern(R"((upper|lower)[\s_-]+(left|right))");
  std::smatch m;
  if (!std::regex_search(lower, m, pattern)) return std::nullopt;
  const bool upper = m[1] == "upper";
  const bool left = m[2] == "left";
  if (upper) return left ? Quadrant::UpperLeft : Quadrant::UpperRight;
  return left ? Quadrant::LowerLeft : Quadrant::LowerRight;
}

Quadrant quadrant_of(double x, double y, const Dims& grid) {
  const bool left = x < static_cast<double>(grid.x) / 2.0;
  const bool upper = y < static_cast<double>(grid.y) / 2.0;
  if (upper) return left ? Quadrant::UpperLeft : Quadrant::UpperRight;
  return left ? Quadrant::LowerLeft : Quadrant::LowerRight;
}

namespace {

std::array<double, 3> semi_axes(const PhantomSpec& spec) {
  const double r = spec.radius_voxels;
  if (spec.primitive == Primitive::Sphere) return {r, r, r};
  return {r * kEllipsoidAxes[0], r * kEllipsoidAxes[1], r * kEllipsoidAxes[2]};
}

struct QuadrantBox {
  std::size_t x0, x1, y0, y1;  // half-open
};

QuadrantBox quadrant_box(Quadrant q, const Dims& g) {
  const std::size_t hx = g.x / 2;
  const std::size_t hy = g.y / 2;
  const bool left = q == Quadrant::UpperLeft || q == Quadrant::LowerLeft;
  const bool upper = q == Quadrant::UpperLeft || q == Quadrant::UpperRight;
  return {left ? 0 : hx, left ? hx : g.x, upper ? 0 : hy, upper ? hy : g.y};
}

// Inclusive range of centre positions along one axis that keep [c - r, c + r] in [lo, hi).
std::pair<long, long> centre_range(std::size_t lo, std::size_t hi, double r) {
  const long extent = static_cast<long>(std::ceil(r));
  return {static_cast<long>(lo) + extent, static_cast<long>(hi) - 1 - extent};
}

}  // namespace

void validate_phantom_spec(const PhantomSpec& spec) {
  if (spec.grid_shape.voxels() == 0) throw ValidationError("phantom grid must be non-empty");
  if (spec.radius_voxels < 0) throw ValidationError("phantom radius must be >= 0");
  if (!(spec.intensity >= 0.0F && spec.intensity <= 1.0F)) {
    throw ValidationError("phantom intensity must lie in [0, 1]");
  }
  validate_spacing(spec.spacing_mm);
  const auto axes = semi_axes(spec);
  const QuadrantBox box = quadrant_box(spec.center_quadrant, spec.grid_shape);
  const auto rx = centre_range(box.x0, box.x1, axes[0]);
  const auto ry = centre_range(box.y0, box.y1, axes[1]);
  const auto rz = centre_range(0, spec.grid_shape.z, axes[2]);
  if (rx.first > rx.second || ry.first > ry.second || rz.first > rz.second) {
    throw ValidationError(std::string(to_string(spec.primitive)) + " of radius " +
                          std::to_string(spec.radius_voxels) + " does not fit in the " +
                          to_string(spec.center_quadrant) + " quadrant of grid " + to_string(spec.grid_shape));
  }
}

bool inside_primitive(const PhantomSpec& spec, const std::array<std::size_t, 3>& center, std::size_t x,
                      std::size_t y, std::size_t z) {
  const std::array<double, 3> d{static_cast<double>(x) - static_cast<double>(center[0]),
                                static_cast<double>(y) - static_cast<double>(center[1]),
                                static_cast<double>(z) - static_cast<double>(center[2])};
  if (spec.radius_voxels == 0) return d[0] == 0 && d[1] == 0 && d[2] == 0;
  const auto axes = semi_axes(spec);
  double q = 0;
  for (int a = 0; a < 3; ++a) q += (d[a] / axes[a]) * (d[a] / axes[a]);
  return q <= 1.0;
}

Phantom generate_phantom(const PhantomSpec& spec) {
  validate_phantom_spec(spec);
  std::mt19937_64 rng(spec.seed);
  const Dims& g = spec.grid_shape;
  const auto axes = semi_axes(spec);
  const QuadrantBox box = quadrant_box(spec.center_quadrant, g);

  // Nominal centre is the quadrant middle; jitter up to 2 voxels where the radius allows.
  auto place = [&](std::size_t lo, std::size_t hi, double r) {
    const auto [cmin, cmax] = centre_range(lo, hi, r);
    const long mid = static_cast<long>((lo + hi) / 2);
    const long jmin = std::max(cmin, mid - 2);
    const long jmax = std::min(cmax, mid + 2);
    std::uniform_int_distribution<long> jitter(std::min(jmin, jmax), std::max(jmin, jmax));
    return static_cast<std::size_t>(std::clamp(jitter(rng), cmin, cmax));
  };
  Phantom p;
  p.center = {place(box.x0, box.x1, axes[0]), place(box.y0, box.y1, axes[1]), place(0, g.z, axes[2])};

  std::uniform_real_distribution<float> noise(0.0F, kPhantomNoiseAmplitude);
  p.volume = CtVolume(g, spec.spacing_mm, IntensityDomain::UNIT);
  for (std::size_t x = 0; x < g.x; ++x)
    for (std::size_t y = 0; y < g.y; ++y)
      for (std::size_t z = 0; z < g.z; ++z) {
        const float background = noise(rng);
        p.volume.at(x, y, z) = inside_primitive(spec, p.center, x, y, z) ? spec.intensity : background;
      }

  const std::string quadrant = to_string(spec.center_quadrant);
  p.report.findings = std::string(to_string(spec.primitive)) + " of radius " + std::to_string(spec.radius_voxels) +
                      " voxels in the " + quadrant + " region";
  p.report.impression = "single " + std::string(to_string(spec.primitive)) + " lesion, " + quadrant + " quadrant";
  p.report.spacing_mm = spec.spacing_mm;
  return p;
}

PhantomSpec corpus_phantom_spec(std::size_t index, std::uint64_t seed, const Dims& grid) {
  PhantomSpec spec;
  spec.grid_shape = grid;
  spec.center_quadrant = kAllQuadrants[index % 4];
  spec.primitive = (index / 4) % 2 == 0 ? Primitive::Sphere : Primitive::Ellipsoid;
  // Radius scales with the grid so the corpus works at any size; 8 voxels on the 64^2 x 32 desk grid.
  const std::size_t limit = std::min({grid.x / 4, grid.y / 4, grid.z / 2});
  const int base = std::max(1, static_cast<int>(limit) / 2);
  spec.radius_voxels = base + static_cast<int>((index / 8) % 3);
  spec.radius_voxels = std::min(spec.radius_voxels, std::max(0, static_cast<int>(limit) - 3));
  spec.intensity = 0.8F;
  spec.seed = seed * 1000003ULL + index;
  return spec;
}

}  // namespace ctsynth
