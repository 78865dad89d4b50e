#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>

#include "json.hpp"

namespace ctsynth {

inline constexpr int kCheckpointSchemaVersion = 1;

// Checkpoints are torch archives holding the module's parameters and buffers plus one
// JSON metadata blob: {"schema_version", "kind", ...caller fields}.
void save_checkpoint(const std::filesystem::path& path, const std::string& kind, nlohmann::json meta,
                     const torch::nn::Module& module);

class CheckpointReader {
 public:
  // Throws ValidationError if the file is unreadable, of another kind, or of a newer schema.
  CheckpointReader(const std::filesystem::path& path, const std::string& kind);

  const nlohmann::json& meta() const { return meta_; }
  void load_into(torch::nn::Module& module);

 private:
  std::filesystem::path path_;
  torch::serialize::InputArchive archive_;
  nlohmann::json meta_;
};

}  // namespace ctsynth
