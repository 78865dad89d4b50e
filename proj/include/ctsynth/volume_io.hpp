#pragma once

#include <filesystem>

#include "ctsynth/volume.hpp"

namespace ctsynth {

// Reads a volume and brings it into canonical RAS axis order.
// `.nii` is read as single-file NIfTI-1; `.raw` expects a `<file>.json` sidecar header.
CtVolume read_volume(const std::filesystem::path& path);

// Writes `.nii` (NIfTI-1, float32) or `.raw` + sidecar, chosen by extension.
// The file appears atomically: data goes to a temporary name that is renamed on success.
void write_volume(const std::filesystem::path& path, const CtVolume& v);

CtVolume read_nifti(const std::filesystem::path& path);
void write_nifti(const std::filesystem::path& path, const CtVolume& v);

CtVolume read_raw(const std::filesystem::path& path);
void write_raw(const std::filesystem::path& path, const CtVolume& v);

// Temp-then-rename helper shared by every on-disk artifact writer.
template <typename WriteFn>
void write_atomically(const std::filesystem::path& path, WriteFn&& write) {
  auto tmp = path;
  tmp += ".partial";
  write(tmp);
  std::filesystem::rename(tmp, path);
}

}  // namespace ctsynth
