#pragma once

#include <torch/torch.h>

#include <cstdint>

#include "ctsynth/volume.hpp"

namespace ctsynth {

// [1, 1, X, Y, Z] float copy of the volume.
torch::Tensor volume_to_tensor(const CtVolume& v);

// Accepts [X, Y, Z], [1, X, Y, Z] or [1, 1, X, Y, Z].
CtVolume tensor_to_volume(const torch::Tensor& t, const Spacing& spacing_mm, IntensityDomain domain);

torch::Generator make_generator(std::uint64_t seed);

// Group count for GroupNorm: gcd(channels, 32), capped so each group keeps >= 2 channels.
std::int64_t norm_groups(std::int64_t channels);

}  // namespace ctsynth
