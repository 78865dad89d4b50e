#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctsynth/codec.hpp"
#include "ctsynth/config.hpp"
#include "ctsynth/diffusion.hpp"
#include "ctsynth/manifest.hpp"

namespace ctsynth {

// Well-known files below data.work_dir.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path vae_checkpoint() const { return root / "vae.ckpt"; }
  std::filesystem::path vae_log() const { return root / "vae_log.jsonl"; }
  std::filesystem::path ldm_checkpoint() const { return root / "ldm.ckpt"; }
  std::filesystem::path ldm_state() const { return root / "ldm.state"; }
  std::filesystem::path ldm_log() const { return root / "ldm_log.jsonl"; }
  std::filesystem::path latent_dir() const { return root / "latents"; }
  std::filesystem::path sample_dir() const { return root / "samples"; }
  std::filesystem::path lock_file() const { return root / "train.lock"; }
};

RunPaths run_paths(const RunConfig& config);

// Held for the lifetime of a training stage; a second holder fails with an Error.
class TrainingLock {
 public:
  explicit TrainingLock(std::filesystem::path path);
  ~TrainingLock();
  TrainingLock(const TrainingLock&) = delete;
  TrainingLock& operator=(const TrainingLock&) = delete;

 private:
  std::filesystem::path path_;
};

// Appends one JSON object per line and flushes after each record.
void append_jsonl(const std::filesystem::path& path, const nlohmann::json& record);
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct PhantomCorpusOptions {
  std::size_t count = 8;
  std::uint64_t seed = 0;
  Dims grid{64, 64, 32};
  std::size_t val_count = 0;  // the last val_count cases go to the val split
};

// Writes UNIT-domain phantoms as NIfTI plus manifest.jsonl; returns the manifest path.
std::filesystem::path generate_phantom_corpus(const std::filesystem::path& out_dir, const PhantomCorpusOptions& options);

// Loads every case, normalizes, resamples to `grid` and writes a new corpus and manifest.
std::filesystem::path preprocess_corpus(const std::filesystem::path& manifest_path,
                                        const std::filesystem::path& out_dir, const Dims& grid);

struct VaeStageResult {
  std::vector<EpochLoss> history;
  double scale_factor = 1.0;
  KlAutoencoder codec{nullptr};
};

// Trains on the train split of data.manifest, calibrates the scale factor on the same
// volumes and writes vae.ckpt.
VaeStageResult run_vae_stage(const RunConfig& config);

struct CachedCase {
  std::string case_id;
  Split split = Split::Train;
  std::filesystem::path latent_path;
  std::filesystem::path text_path;
};

// Encodes every manifest case with the posterior mean, scales it and stores the latent and
// the pooled report embedding. Writes index.jsonl in out_dir.
std::vector<CachedCase> cache_latents(const RunConfig& config, const std::filesystem::path& manifest_path,
                                      const std::filesystem::path& out_dir);
std::vector<CachedCase> read_latent_cache(const std::filesystem::path& dir);

struct LdmStageResult {
  std::vector<StepResult> steps;  // steps run in this invocation
  DiffusionModel model{nullptr};
  std::int64_t steps_done = 0;
};

// Uses the cache in latents/ (built on demand), trains up to diffusion.total_steps and writes
// ldm.ckpt plus the trainer state. With resume, continues from the saved state. A positive
// max_new_steps stops early (checkpointing first), as a preempted job would.
LdmStageResult run_ldm_stage(const RunConfig& config, bool resume, std::int64_t max_new_steps = -1);

struct SampleRequest {
  std::filesystem::path manifest;       // prompt source; defaults to data.manifest
  std::vector<std::string> case_ids;    // empty: every case of the manifest
  std::optional<std::vector<double>> cfg_scales;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::filesystem::path out_dir;        // defaults to samples/ under the work dir
  bool write_montages = true;
};

// One generated case per (case, scale, seed); records go to samples.jsonl in out_dir.
std::vector<nlohmann::json> run_sampling(const RunConfig& config, const SampleRequest& request);

// Metrics per cfg_scale over the records of samples.jsonl, comparing against the manifest's
// volumes for the same case ids. Written to out_path when it is non-empty.
nlohmann::json run_evaluation(const RunConfig& config, const std::filesystem::path& samples_jsonl,
                              const std::filesystem::path& manifest_path, const std::filesystem::path& out_path);

}  // namespace ctsynth
