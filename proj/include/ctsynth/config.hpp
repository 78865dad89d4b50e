#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctsynth/codec.hpp"
#include "ctsynth/diffusion.hpp"
#include "ctsynth/metrics.hpp"

namespace ctsynth {

// Environment variable naming the default config file; the only environment input.
inline constexpr const char* kConfigEnvVar = "CTSYNTH_CONFIG";

struct DataConfig {
  std::filesystem::path manifest = "data/manifest.jsonl";
  Dims grid_shape{64, 64, 32};
  std::filesystem::path work_dir = "runs/desk";
};

struct ConditioningConfig {
  std::int64_t max_tokens = 512;
  std::uint64_t encoder_seed = 0;
};

struct DiffusionStageConfig {
  DenoiserConfig denoiser;
  DiffusionTrainConfig train;
  std::int64_t log_every = 10;
  std::int64_t checkpoint_every = 500;
};

struct SamplingConfig {
  std::vector<double> cfg_scales{0.0, 1.0, 3.0, 7.0};
  int inference_steps = 30;
  std::vector<std::uint64_t> seeds{0};
};

struct EvalConfig {
  FeatureExtractorSpec extractor;
  JointEmbedderSpec embedder;
};

// Every field has a default (the desk-scale profile); files and overrides may only set
// keys that exist in the defaults.
struct RunConfig {
  DataConfig data;
  ConditioningConfig conditioning;
  CodecTrainConfig codec;
  DiffusionStageConfig diffusion;
  SamplingConfig sampling;
  EvalConfig eval;

  // Exact serialized form stored with every checkpoint, sample record and metrics file.
  nlohmann::json json;
};

nlohmann::json default_config_json();

// Merges `overrides` onto the defaults. Unknown keys and type mismatches raise ConfigError
// naming the dotted key path.
RunConfig make_run_config(const nlohmann::json& overrides = nlohmann::json::object());

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& set_overrides = {});

// Applies "a.b.c=value" onto a JSON object; the value is parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& target, const std::string& assignment);

}  // namespace ctsynth
