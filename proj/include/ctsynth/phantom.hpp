#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "ctsynth/conditioning_types.hpp"
#include "ctsynth/volume.hpp"

namespace ctsynth {

enum class Primitive { Sphere, Ellipsoid };

// The four axial (XY-plane) quadrants. "upper" is y < ny/2, "left" is x < nx/2.
enum class Quadrant { UpperLeft, UpperRight, LowerLeft, LowerRight };

inline constexpr std::array<Quadrant, 4> kAllQuadrants{Quadrant::UpperLeft, Quadrant::UpperRight,
                                                       Quadrant::LowerLeft, Quadrant::LowerRight};

const char* to_string(Primitive p);
const char* to_string(Quadrant q);  // "upper-left", ...

// Finds the first quadrant phrase ("upper-left", "lower right", ...) in free text.
std::optional<Quadrant> parse_quadrant(const std::string& text);

// Quadrant containing an (x, y) position of a grid.
Quadrant quadrant_of(double x, double y, const Dims& grid);

struct PhantomSpec {
  Dims grid_shape{64, 64, 32};
  Primitive primitive = Primitive::Sphere;
  Quadrant center_quadrant = Quadrant::UpperLeft;
  int radius_voxels = 8;
  float intensity = 0.8F;
  std::uint64_t seed = 0;
  Spacing spacing_mm{0.75, 0.75, 1.5};
};

// Ellipsoid semi-axes relative to the radius along (x, y, z).
inline constexpr std::array<double, 3> kEllipsoidAxes{1.0, 0.75, 0.5};

// Upper bound of the uniform background noise.
inline constexpr float kPhantomNoiseAmplitude = 0.05F;

struct Phantom {
  CtVolume volume;  // UNIT domain
  RadiologyReport report;
  std::array<std::size_t, 3> center{};  // voxel coordinates of the primitive centre
};

void validate_phantom_spec(const PhantomSpec& spec);

// Pure function of the spec. The primitive is centred in its quadrant (seeded jitter
// within whatever slack the radius leaves) and filled with `intensity`; the background
// carries uniform noise in [0, 0.05]. Findings/impression are templated from the geometry.
Phantom generate_phantom(const PhantomSpec& spec);

// True when voxel (x, y, z) lies inside the primitive placed at `center`.
bool inside_primitive(const PhantomSpec& spec, const std::array<std::size_t, 3>& center, std::size_t x,
                      std::size_t y, std::size_t z);

// Deterministic corpus used by phantom-gen and the desk-scale tests: quadrants cycle
// with the index, primitive and radius alternate so every report is distinct.
PhantomSpec corpus_phantom_spec(std::size_t index, std::uint64_t seed, const Dims& grid);

}  // namespace ctsynth
