#pragma once

#include <string>

#include "ctsynth/volume.hpp"

namespace ctsynth {

// The conditioning source: both report sections plus the voxel spacing.
struct RadiologyReport {
  std::string findings;
  std::string impression;
  Spacing spacing_mm{1.0, 1.0, 1.0};

  bool operator==(const RadiologyReport&) const = default;
};

}  // namespace ctsynth
