#include "ctsynth/checkpoint.hpp"

#include "ctsynth/errors.hpp"

namespace ctsynth {

namespace fs = std::filesystem;

void save_checkpoint(const fs::path& path, const std::string& kind, nlohmann::json meta,
                     const torch::nn::Module& module) {
  meta["schema_version"] = kCheckpointSchemaVersion;
  meta["kind"] = kind;
  torch::serialize::OutputArchive archive;
  archive.write("meta", c10::IValue(meta.dump()));
  torch::serialize::OutputArchive weights;
  module.save(weights);
  archive.write("weights", weights);
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".partial";
  archive.save_to(tmp.string());
  fs::rename(tmp, path);
}

CheckpointReader::CheckpointReader(const fs::path& path, const std::string& kind) : path_(path) {
  if (!fs::exists(path)) throw ValidationError("checkpoint not found: " + path.string());
  try {
    archive_.load_from(path.string());
    c10::IValue meta;
    archive_.read("meta", meta);
    meta_ = nlohmann::json::parse(meta.toStringRef());
  } catch (const c10::Error& e) {
    throw ValidationError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  if (meta_.value("kind", "") != kind) {
    throw ValidationError(path.string() + " is a '" + meta_.value("kind", "") + "' checkpoint, expected '" +
                          kind + "'");
  }
  if (meta_.value("schema_version", 0) > kCheckpointSchemaVersion) {
    throw ValidationError(path.string() + " uses a newer checkpoint schema");
  }
}

void CheckpointReader::load_into(torch::nn::Module& module) {
  torch::serialize::InputArchive weights;
  try {
    archive_.read("weights", weights);
    module.load(weights);
  } catch (const c10::Error& e) {
    throw ValidationError("checkpoint " + path_.string() + " does not match the model: " +
                          e.what_without_backtrace());
  }
}

}  // namespace ctsynth
