#include <cstdlib>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "ctsynth/config.hpp"
#include "ctsynth/errors.hpp"
#include "ctsynth/montage.hpp"
#include "ctsynth/pipeline.hpp"
#include "ctsynth/volume_io.hpp"

namespace fs = std::filesystem;
using namespace ctsynth;

namespace {

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
};

RunConfig resolve_config(const Globals& g) {
  fs::path path = g.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv(kConfigEnvVar)) path = env;
  }
  return load_run_config(path, g.overrides);
}

Dims dims_of(const std::vector<std::size_t>& v) { return {v.at(0), v.at(1), v.at(2)}; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Report-conditioned 3D CT synthesis with a latent rectified-flow model"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("-c,--config", g.config_path, std::string("JSON run config (default: $") + kConfigEnvVar + ")");
  app.add_option("--set", g.overrides, "Override a config key, e.g. --set diffusion.total_steps=200");

  auto* phantom = app.add_subcommand("phantom-gen", "Write a synthetic phantom corpus and its manifest");
  PhantomCorpusOptions popts;
  std::vector<std::size_t> pgrid{64, 64, 32};
  std::string pout;
  phantom->add_option("--count", popts.count, "Number of phantoms")->check(CLI::PositiveNumber);
  phantom->add_option("--seed", popts.seed, "Corpus seed");
  phantom->add_option("--val", popts.val_count, "Cases placed in the val split");
  phantom->add_option("--grid", pgrid, "Grid X Y Z")->expected(3);
  phantom->add_option("--out", pout, "Output directory")->required();

  auto* prep = app.add_subcommand("preprocess", "Normalize and resample a manifest's volumes");
  std::string prep_manifest, prep_out;
  prep->add_option("--manifest", prep_manifest, "Input manifest (default: data.manifest)");
  prep->add_option("--out", prep_out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train the codec (vae) or the diffusion model (ldm)");
  std::string stage;
  bool resume = false;
  train->add_option("--stage", stage, "vae or ldm")->required()->check(CLI::IsMember({"vae", "ldm"}));
  train->add_flag("--resume", resume, "Continue the ldm stage from its saved state");
  std::int64_t max_steps = -1;
  train->add_option("--max-steps", max_steps, "Stop the ldm stage after this many steps in this invocation");
  auto* train_vae = app.add_subcommand("train-vae", "Alias for train --stage vae");

  auto* cache = app.add_subcommand("cache-latents", "Encode a manifest into scaled latents and report embeddings");
  std::string cache_manifest, cache_out;
  cache->add_option("--manifest", cache_manifest, "Manifest (default: data.manifest)");
  cache->add_option("--out", cache_out, "Output directory (default: <work_dir>/latents)");

  auto* sample = app.add_subcommand("sample", "Generate volumes for manifest reports");
  SampleRequest sreq;
  std::string sample_manifest, sample_out;
  std::vector<double> scales;
  std::vector<std::uint64_t> seeds;
  bool no_montage = false;
  sample->add_option("--manifest", sample_manifest, "Prompt manifest (default: data.manifest)");
  sample->add_option("--case", sreq.case_ids, "Case id to sample (repeatable; default all)");
  sample->add_option("--cfg-scale", scales, "Guidance scale (repeatable; default sampling.cfg_scales)");
  sample->add_option("--seed", seeds, "Sampling seed (repeatable; default sampling.seeds)");
  sample->add_option("--out", sample_out, "Output directory (default: <work_dir>/samples)");
  sample->add_flag("--no-montage", no_montage, "Skip the PNG montages");

  auto* eval = app.add_subcommand("evaluate", "Compute FID, CLIP-style and alignment metrics per scale");
  std::string eval_samples, eval_manifest, eval_out;
  eval->add_option("--samples", eval_samples, "samples.jsonl (default: <work_dir>/samples/samples.jsonl)");
  eval->add_option("--manifest", eval_manifest, "Reference manifest (default: data.manifest)");
  eval->add_option("--out", eval_out, "Metrics JSON (default: <work_dir>/metrics.json)");

  auto* montage = app.add_subcommand("montage", "Central-slice PNGs for volumes");
  std::vector<std::string> montage_in;
  std::string montage_out;
  montage->add_option("volumes", montage_in, "Volume files")->required();
  montage->add_option("--out", montage_out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*phantom) {
      popts.grid = dims_of(pgrid);
      std::cout << generate_phantom_corpus(pout, popts).string() << "\n";
      return 0;
    }
    if (*montage) {
      for (const auto& in : montage_in) {
        const CtVolume v = read_volume(in);
        for (const auto& p : write_montage(v, montage_out, fs::path(in).stem().string())) {
          std::cout << p.string() << "\n";
        }
      }
      return 0;
    }

    const RunConfig config = resolve_config(g);
    if (*prep) {
      const fs::path in = prep_manifest.empty() ? config.data.manifest : fs::path(prep_manifest);
      std::cout << preprocess_corpus(in, prep_out, config.data.grid_shape).string() << "\n";
    } else if (*train_vae || (*train && stage == "vae")) {
      const auto r = run_vae_stage(config);
      std::cout << "codec trained for " << r.history.size() << " epochs; final loss " << r.history.back().total
                << "; scale factor " << r.scale_factor << "\n";
    } else if (*train) {
      const auto r = run_ldm_stage(config, resume, max_steps);
      std::cout << "diffusion at step " << r.steps_done;
      if (!r.steps.empty()) std::cout << "; last loss " << r.steps.back().loss;
      std::cout << "\n";
    } else if (*cache) {
      const fs::path in = cache_manifest.empty() ? config.data.manifest : fs::path(cache_manifest);
      const fs::path out = cache_out.empty() ? run_paths(config).latent_dir() : fs::path(cache_out);
      std::cout << cache_latents(config, in, out).size() << " cases cached in " << out.string() << "\n";
    } else if (*sample) {
      sreq.manifest = sample_manifest;
      sreq.out_dir = sample_out;
      if (!scales.empty()) sreq.cfg_scales = scales;
      if (!seeds.empty()) sreq.seeds = seeds;
      sreq.write_montages = !no_montage;
      const auto records = run_sampling(config, sreq);
      for (const auto& r : records) std::cout << r.at("volume").get<std::string>() << "\n";
    } else if (*eval) {
      const fs::path samples =
          eval_samples.empty() ? run_paths(config).sample_dir() / "samples.jsonl" : fs::path(eval_samples);
      const fs::path out = eval_out.empty() ? run_paths(config).root / "metrics.json" : fs::path(eval_out);
      std::cout << run_evaluation(config, samples, eval_manifest, out).at("results").dump(2) << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
