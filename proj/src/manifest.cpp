#include "ctsynth/manifest.hpp"

#include <fstream>
#include <set>

#include "json.hpp"

#include "ctsynth/errors.hpp"
#include "ctsynth/volume_io.hpp"

namespace ctsynth {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(Split s) { return s == Split::Train ? "train" : "val"; }

std::vector<ManifestEntry> DatasetManifest::split(Split s) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == s) out.push_back(e);
  return out;
}

const ManifestEntry& DatasetManifest::find(const std::string& case_id) const {
  for (const auto& e : entries)
    if (e.case_id == case_id) return e;
  throw ValidationError("unknown case id '" + case_id + "'");
}

ManifestEntry parse_manifest_line(const std::string& line, std::size_t line_number, const fs::path& base_dir) {
  const std::string where = "manifest line " + std::to_string(line_number);
  json record;
  try {
    record = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ValidationError(where + ": malformed JSON (" + e.what() + ")");
  }
  if (!record.is_object()) throw ValidationError(where + ": expected a JSON object");
  for (const char* field : {"volume_path", "findings", "impression", "spacing_mm", "split"}) {
    if (!record.contains(field)) {
      throw ValidationError(where + ": missing field \"" + field + "\"");
    }
  }
  ManifestEntry entry;
  try {
    const fs::path raw_path = record["volume_path"].get<std::string>();
    entry.volume_path = raw_path.is_absolute() ? raw_path : base_dir / raw_path;
    entry.findings = record["findings"].get<std::string>();
    entry.impression = record["impression"].get<std::string>();
    const auto& spacing = record["spacing_mm"];
    if (!spacing.is_array() || spacing.size() != 3) {
      throw ValidationError(where + ": field \"spacing_mm\" must be a 3-element array");
    }
    entry.spacing_mm = spacing.get<Spacing>();
    const auto split = record["split"].get<std::string>();
    if (split == "train") {
      entry.split = Split::Train;
    } else if (split == "val") {
      entry.split = Split::Val;
    } else {
      throw ValidationError(where + ": field \"split\" must be \"train\" or \"val\", got \"" + split + "\"");
    }
    entry.case_id = record.contains("case_id") ? record["case_id"].get<std::string>()
                                               : raw_path.stem().string();
  } catch (const json::type_error& e) {
    throw ValidationError(where + ": wrong field type (" + e.what() + ")");
  }
  for (std::size_t i = 0; i < 3; ++i) {
    if (!(entry.spacing_mm[i] > 0.0)) {
      throw ValidationError(where + ": field \"spacing_mm\" must be positive");
    }
  }
  return entry;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  DatasetManifest manifest;
  std::set<fs::path> paths;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ManifestEntry entry = parse_manifest_line(line, line_number, base);
    const auto normalized = entry.volume_path.lexically_normal();
    if (!paths.insert(normalized).second) {
      throw ValidationError("manifest line " + std::to_string(line_number) + ": duplicate volume_path " +
                            normalized.string());
    }
    if (!ids.insert(entry.case_id).second) {
      throw ValidationError("manifest line " + std::to_string(line_number) + ": duplicate case_id " + entry.case_id);
    }
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest) {
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  write_atomically(path, [&](const fs::path& tmp) {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw ValidationError("cannot write manifest " + path.string());
    for (const auto& e : manifest.entries) {
      fs::path stored = e.volume_path;
      const auto rel = e.volume_path.lexically_relative(base);
      if (!rel.empty() && *rel.begin() != "..") stored = rel;
      const json record{{"case_id", e.case_id},
                        {"volume_path", stored.string()},
                        {"findings", e.findings},
                        {"impression", e.impression},
                        {"spacing_mm", e.spacing_mm},
                        {"split", to_string(e.split)}};
      out << record.dump() << "\n";
    }
  });
}

CtVolume load_case_volume(const ManifestEntry& entry, const Dims& grid) {
  CtVolume v = read_volume(entry.volume_path);
  v.set_spacing_mm(entry.spacing_mm);
  if (v.domain() == IntensityDomain::HU) v = clip_and_normalize(v);
  if (!(v.dims() == grid)) v = resample_to_grid(v, grid);
  return v;
}

}  // namespace ctsynth
