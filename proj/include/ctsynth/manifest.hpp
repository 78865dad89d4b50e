#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ctsynth/volume.hpp"

namespace ctsynth {

enum class Split { Train, Val };

const char* to_string(Split s);

struct ManifestEntry {
  std::string case_id;  // defaults to the volume file stem
  std::filesystem::path volume_path;
  std::string findings;
  std::string impression;
  Spacing spacing_mm{1.0, 1.0, 1.0};
  Split split = Split::Train;

  bool operator==(const ManifestEntry&) const = default;
};

// One JSON object per line:
//   {"volume_path": ..., "findings": ..., "impression": ..., "spacing_mm": [x,y,z], "split": "train"|"val"}
// plus an optional "case_id". Relative volume paths resolve against the manifest's directory.
struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> split(Split s) const;
  const ManifestEntry& find(const std::string& case_id) const;
};

DatasetManifest load_manifest(const std::filesystem::path& path);

// Paths are written relative to the manifest directory when they live beneath it.
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// Validates and parses one line; `line_number` is 1-based and appears in error text.
ManifestEntry parse_manifest_line(const std::string& line, std::size_t line_number,
                                  const std::filesystem::path& base_dir);

// Reads an entry's volume and brings it to the model domain: canonical orientation,
// clipped and normalized to UNIT, resampled onto `grid` when the shape differs.
// The manifest's spacing wins over the file header when they disagree.
CtVolume load_case_volume(const ManifestEntry& entry, const Dims& grid);

}  // namespace ctsynth
