#include "ctsynth/tensor_util.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <numeric>

#include "ctsynth/errors.hpp"

namespace ctsynth {

torch::Tensor volume_to_tensor(const CtVolume& v) {
  const Dims& d = v.dims();
  auto t = torch::empty({1, 1, static_cast<std::int64_t>(d.x), static_cast<std::int64_t>(d.y),
                         static_cast<std::int64_t>(d.z)},
                        torch::kFloat);
  std::copy(v.data().begin(), v.data().end(), t.data_ptr<float>());
  return t;
}

CtVolume tensor_to_volume(const torch::Tensor& t, const Spacing& spacing_mm, IntensityDomain domain) {
  auto s = t.detach().to(torch::kFloat).contiguous();
  while (s.dim() > 3) {
    if (s.size(0) != 1) throw ShapeError("tensor_to_volume expects a single-channel, single-item tensor");
    s = s.squeeze(0);
  }
  if (s.dim() != 3) throw ShapeError("tensor_to_volume expects a 3D grid");
  const Dims dims{static_cast<std::size_t>(s.size(0)), static_cast<std::size_t>(s.size(1)),
                  static_cast<std::size_t>(s.size(2))};
  const float* p = s.data_ptr<float>();
  return CtVolume(dims, spacing_mm, domain, std::vector<float>(p, p + dims.voxels()));
}

torch::Generator make_generator(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

std::int64_t norm_groups(std::int64_t channels) {
  std::int64_t g = std::gcd(channels, std::int64_t{32});
  while (g > 1 && channels / g < 2) g /= 2;
  return std::max<std::int64_t>(g, 1);
}

}  // namespace ctsynth
