#include "ctsynth/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "ctsynth/errors.hpp"
#include "ctsynth/metrics.hpp"
#include "ctsynth/montage.hpp"
#include "ctsynth/phantom.hpp"
#include "ctsynth/volume_io.hpp"

namespace ctsynth {

namespace fs = std::filesystem;
using nlohmann::json;

RunPaths run_paths(const RunConfig& config) { return {config.data.work_dir}; }

TrainingLock::TrainingLock(fs::path path) : path_(std::move(path)) {
  fs::create_directories(path_.parent_path());
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw Error("another training run holds " + path_.string() + "; remove it if that run is gone");
    }
    throw Error("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

TrainingLock::~TrainingLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

void append_jsonl(const fs::path& path, const json& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot append to " + path.string());
  out << record.dump() << '\n';
  out.flush();
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw ValidationError(path.string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

namespace {

void write_text_atomically(const fs::path& path, const std::string& text) {
  write_atomically(path, [&](const fs::path& tmp) {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
  });
}

std::vector<CtVolume> load_split_volumes(const DatasetManifest& manifest, Split split, const Dims& grid) {
  std::vector<CtVolume> volumes;
  for (const auto& e : manifest.split(split)) volumes.push_back(load_case_volume(e, grid));
  return volumes;
}

SectionEncoder sections_for(const json& run_config) {
  const auto& c = run_config.at("conditioning");
  return SectionEncoder::toy(c.at("max_tokens").get<std::int64_t>(), c.at("encoder_seed").get<std::uint64_t>());
}

std::string scale_tag(double s) {
  std::ostringstream os;
  os << s;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------

fs::path generate_phantom_corpus(const fs::path& out_dir, const PhantomCorpusOptions& options) {
  if (options.count == 0) throw ConfigError("phantom corpus needs count >= 1");
  if (options.val_count > options.count) throw ConfigError("val_count exceeds count");
  fs::create_directories(out_dir / "volumes");
  DatasetManifest manifest;
  for (std::size_t i = 0; i < options.count; ++i) {
    const PhantomSpec spec = corpus_phantom_spec(i, options.seed, options.grid);
    const Phantom ph = generate_phantom(spec);
    char id[32];
    std::snprintf(id, sizeof id, "phantom_%04zu", i);
    ManifestEntry e;
    e.case_id = id;
    e.volume_path = out_dir / "volumes" / (std::string(id) + ".nii");
    e.findings = ph.report.findings;
    e.impression = ph.report.impression;
    e.spacing_mm = ph.report.spacing_mm;
    e.split = i + options.val_count >= options.count ? Split::Val : Split::Train;
    write_volume(e.volume_path, ph.volume);
    manifest.entries.push_back(std::move(e));
  }
  const auto path = out_dir / "manifest.jsonl";
  save_manifest(path, manifest);
  return path;
}

fs::path preprocess_corpus(const fs::path& manifest_path, const fs::path& out_dir, const Dims& grid) {
  const DatasetManifest in = load_manifest(manifest_path);
  fs::create_directories(out_dir / "volumes");
  DatasetManifest out;
  for (const auto& e : in.entries) {
    const CtVolume v = load_case_volume(e, grid);
    ManifestEntry o = e;
    o.volume_path = out_dir / "volumes" / (e.case_id + ".nii");
    o.spacing_mm = v.spacing_mm();
    write_volume(o.volume_path, v);
    out.entries.push_back(std::move(o));
  }
  const auto path = out_dir / "manifest.jsonl";
  save_manifest(path, out);
  return path;
}

// ---------------------------------------------------------------------------

VaeStageResult run_vae_stage(const RunConfig& config) {
  const RunPaths paths = run_paths(config);
  fs::create_directories(paths.root);
  TrainingLock lock(paths.lock_file());

  const DatasetManifest manifest = load_manifest(config.data.manifest);
  const auto volumes = load_split_volumes(manifest, Split::Train, config.data.grid_shape);
  if (volumes.empty()) throw ValidationError("manifest has no train cases");

  append_jsonl(paths.vae_log(), {{"event", "start"}, {"config", config.json}});
  auto trained = train_autoencoder(volumes, config.codec, [&](const EpochLoss& e) {
    append_jsonl(paths.vae_log(), {{"epoch", e.epoch}, {"loss", e.total}, {"recon", e.recon}, {"kl", e.kl},
                                   {"lr", config.codec.learning_rate}});
  });
  const double scale = calibrate_scale_factor(trained.codec, volumes);
  save_codec_checkpoint(paths.vae_checkpoint(), trained.codec, scale, config.json);
  append_jsonl(paths.vae_log(), {{"event", "done"}, {"scale_factor", scale}});
  return {std::move(trained.history), scale, trained.codec};
}

std::vector<CachedCase> cache_latents(const RunConfig& config, const fs::path& manifest_path, const fs::path& out_dir) {
  const DatasetManifest manifest = load_manifest(manifest_path);
  auto ckpt = load_codec_checkpoint(run_paths(config).vae_checkpoint());
  const SectionEncoder sections = sections_for(config.json);
  fs::create_directories(out_dir);

  std::vector<CachedCase> cached;
  std::ostringstream index;
  for (const auto& e : manifest.entries) {
    const CtVolume v = load_case_volume(e, config.data.grid_shape);
    const auto z = scale_latent(encode(ckpt.codec, v, false).first, ckpt.scale_factor);
    CachedCase c{e.case_id, e.split, out_dir / (e.case_id + ".latent"), out_dir / (e.case_id + ".text")};
    save_latent(c.latent_path, z);
    save_report_embedding(c.text_path,
                          embed_report_text(RadiologyReport{e.findings, e.impression, e.spacing_mm}, sections));
    index << json{{"case_id", c.case_id},
                  {"split", to_string(c.split)},
                  {"latent", c.latent_path.filename().string()},
                  {"text", c.text_path.filename().string()},
                  {"scale_factor", ckpt.scale_factor},
                  {"config", config.json}}
                 .dump()
          << '\n';
    cached.push_back(std::move(c));
  }
  write_text_atomically(out_dir / "index.jsonl", index.str());
  return cached;
}

std::vector<CachedCase> read_latent_cache(const fs::path& dir) {
  std::vector<CachedCase> cases;
  for (const auto& row : read_jsonl(dir / "index.jsonl")) {
    CachedCase c;
    c.case_id = row.at("case_id").get<std::string>();
    c.split = row.at("split").get<std::string>() == "val" ? Split::Val : Split::Train;
    c.latent_path = dir / row.at("latent").get<std::string>();
    c.text_path = dir / row.at("text").get<std::string>();
    cases.push_back(std::move(c));
  }
  return cases;
}

LdmStageResult run_ldm_stage(const RunConfig& config, bool resume, std::int64_t max_new_steps) {
  const RunPaths paths = run_paths(config);
  fs::create_directories(paths.root);
  const auto codec = load_codec_checkpoint(paths.vae_checkpoint());

  std::vector<CachedCase> cache;
  if (fs::exists(paths.latent_dir() / "index.jsonl")) {
    cache = read_latent_cache(paths.latent_dir());
  } else {
    cache = cache_latents(config, config.data.manifest, paths.latent_dir());
  }
  std::vector<TrainingItem> items;
  for (const auto& c : cache) {
    if (c.split != Split::Train) continue;
    const LatentVolume z = load_latent(c.latent_path);
    if (!z.scaled || z.scale_factor != codec.scale_factor) {
      throw ContractError("cached latent " + c.latent_path.string() +
                          " was not scaled with the current codec's scale factor; rebuild the cache");
    }
    items.push_back({c.case_id, z.data.to(torch::kFloat), load_report_embedding(c.text_path)});
  }
  if (items.empty()) throw ValidationError("latent cache has no train cases");

  TrainingLock lock(paths.lock_file());
  torch::manual_seed(config.diffusion.train.seed);
  DiffusionModel model(config.diffusion.denoiser);
  const RFlowSchedule schedule = make_schedule(config.diffusion.denoiser.num_train_steps);
  if (resume) {
    if (!fs::exists(paths.ldm_checkpoint()) || !fs::exists(paths.ldm_state())) {
      throw ValidationError("nothing to resume in " + paths.root.string());
    }
    model = load_diffusion_checkpoint(paths.ldm_checkpoint()).model;
  }
  DiffusionTrainer trainer(model, schedule, config.diffusion.train);
  if (resume) trainer.load_state(paths.ldm_state());

  auto checkpoint = [&] {
    save_diffusion_checkpoint(paths.ldm_checkpoint(), trainer.model(), schedule, codec.scale_factor,
                              paths.vae_checkpoint().string(), trainer.steps_done(), config.json);
    trainer.save_state(paths.ldm_state());
  };

  append_jsonl(paths.ldm_log(), {{"event", resume ? "resume" : "start"}, {"step", trainer.steps_done()},
                                 {"config", config.json}});
  LdmStageResult result;
  while (trainer.steps_done() < config.diffusion.train.total_steps) {
    if (max_new_steps > 0 && static_cast<std::int64_t>(result.steps.size()) >= max_new_steps) break;
    const StepResult r = trainer.step(items);
    result.steps.push_back(r);
    if (r.step % config.diffusion.log_every == 0 || r.step == 1) {
      append_jsonl(paths.ldm_log(), {{"step", r.step}, {"loss", r.loss}, {"lr", r.learning_rate}});
    }
    if (r.step % config.diffusion.checkpoint_every == 0) checkpoint();
  }
  checkpoint();
  result.model = trainer.model();
  result.steps_done = trainer.steps_done();
  return result;
}

// ---------------------------------------------------------------------------

std::vector<json> run_sampling(const RunConfig& config, const SampleRequest& request) {
  const RunPaths paths = run_paths(config);
  auto ldm = load_diffusion_checkpoint(paths.ldm_checkpoint());
  auto codec = load_codec_checkpoint(paths.vae_checkpoint());
  if (codec.scale_factor != ldm.scale_factor) {
    throw ContractError("diffusion checkpoint was trained with scale factor " + std::to_string(ldm.scale_factor) +
                        " but the codec checkpoint carries " + std::to_string(codec.scale_factor));
  }
  const SectionEncoder sections = sections_for(ldm.run_config.is_object() && ldm.run_config.contains("conditioning")
                                                   ? ldm.run_config
                                                   : config.json);
  const DatasetManifest manifest = load_manifest(request.manifest.empty() ? config.data.manifest : request.manifest);
  std::vector<ManifestEntry> cases;
  if (request.case_ids.empty()) {
    cases = manifest.entries;
  } else {
    for (const auto& id : request.case_ids) cases.push_back(manifest.find(id));
  }
  const auto scales = request.cfg_scales.value_or(config.sampling.cfg_scales);
  const auto seeds = request.seeds.value_or(config.sampling.seeds);
  const fs::path out = request.out_dir.empty() ? paths.sample_dir() : request.out_dir;
  fs::create_directories(out / "volumes");
  fs::create_directories(out / "latents");
  if (request.write_montages) fs::create_directories(out / "montage");

  const Dims ld = codec.codec->latent_dims(config.data.grid_shape);
  const std::vector<std::int64_t> latent_shape{codec.codec->config().latent_channels,
                                               static_cast<std::int64_t>(ld.x), static_cast<std::int64_t>(ld.y),
                                               static_cast<std::int64_t>(ld.z)};
  ldm.model->eval();
  DenoiserVelocity field(ldm.model->unet);

  std::vector<json> records;
  std::ostringstream lines;
  for (const auto& e : cases) {
    const RadiologyReport report{e.findings, e.impression, e.spacing_mm};
    ConditioningTensor cond;
    {
      torch::NoGradGuard no_grad;
      cond = build_conditioning(report, sections, ldm.model->spacing);
    }
    for (double s : scales) {
      for (std::uint64_t seed : seeds) {
        SampleOptions opts;
        opts.cfg_scale = s;
        opts.num_inference_steps = config.sampling.inference_steps;
        opts.seed = seed;
        opts.latent_shape = latent_shape;
        opts.scale_factor = ldm.scale_factor;
        const LatentVolume z = sample_latent(field, cond, opts);
        CtVolume unit = decode(codec.codec, unscale_latent(z), e.spacing_mm);
        CtVolume hu = denormalize_to_hu(unit);

        const std::string id = e.case_id + "_cfg" + scale_tag(s) + "_seed" + std::to_string(seed);
        const fs::path volume_path = out / "volumes" / (id + ".nii");
        const fs::path latent_path = out / "latents" / (id + ".latent");
        write_volume(volume_path, hu);
        save_latent(latent_path, z);
        json montage = json::array();
        if (request.write_montages) {
          for (const auto& p : write_montage(hu, out / "montage", id)) montage.push_back(p.string());
        }
        json rec{{"sample_id", id},
                 {"case_id", e.case_id},
                 {"findings", e.findings},
                 {"impression", e.impression},
                 {"spacing_mm", e.spacing_mm},
                 {"cfg_scale", s},
                 {"seed", seed},
                 {"inference_steps", opts.num_inference_steps},
                 {"volume", volume_path.string()},
                 {"latent", latent_path.string()},
                 {"montage", montage},
                 {"scale_factor", ldm.scale_factor},
                 {"diffusion_step", ldm.step},
                 {"config", config.json}};
        lines << rec.dump() << '\n';
        records.push_back(std::move(rec));
      }
    }
  }
  write_text_atomically(out / "samples.jsonl", lines.str());
  return records;
}

json run_evaluation(const RunConfig& config, const fs::path& samples_jsonl, const fs::path& manifest_path,
                    const fs::path& out_path) {
  const auto records = read_jsonl(samples_jsonl);
  if (records.empty()) throw ValidationError(samples_jsonl.string() + " has no samples");
  const DatasetManifest manifest = load_manifest(manifest_path.empty() ? config.data.manifest : manifest_path);

  std::map<double, std::vector<const json*>> by_scale;
  for (const auto& r : records) by_scale[r.at("cfg_scale").get<double>()].push_back(&r);

  FeatureExtractorSpec fspec = config.eval.extractor;
  SeededConvExtractor extractor(fspec);
  LayoutEmbedder embedder(config.eval.embedder);

  std::map<std::string, CtVolume> reference;
  auto reference_for = [&](const std::string& case_id) -> const CtVolume& {
    auto it = reference.find(case_id);
    if (it == reference.end()) {
      it = reference.emplace(case_id, load_case_volume(manifest.find(case_id), config.data.grid_shape)).first;
    }
    return it->second;
  };

  json results = json::array();
  for (const auto& [scale, recs] : by_scale) {
    std::vector<CtVolume> generated;
    std::vector<CtVolume> real;
    std::vector<std::string> seen;
    double t2i = 0;
    double i2i = 0;
    std::size_t hits = 0;
    bool alignment_defined = true;
    for (const json* r : recs) {
      const std::string case_id = r->at("case_id").get<std::string>();
      CtVolume g = read_volume(r->at("volume").get<std::string>());
      if (g.domain() == IntensityDomain::HU) g = clip_and_normalize(g);
      const CtVolume& ref = reference_for(case_id);
      const RadiologyReport prompt{r->at("findings").get<std::string>(), r->at("impression").get<std::string>(),
                                   r->at("spacing_mm").get<Spacing>()};
      const ClipScores cs = clip_scores(g, prompt, ref, embedder, case_id);
      t2i += cs.t2i;
      i2i += cs.i2i;
      if (parse_quadrant(prompt.findings)) {
        hits += phantom_alignment_score(g, prompt.findings).hit ? 1 : 0;
      } else {
        alignment_defined = false;
      }
      if (std::find(seen.begin(), seen.end(), case_id) == seen.end()) {
        seen.push_back(case_id);
        real.push_back(ref);
      }
      generated.push_back(std::move(g));
    }
    const double n = static_cast<double>(recs.size());
    json fid_block{{"fid_xy", nullptr}, {"fid_yz", nullptr}, {"fid_zx", nullptr}, {"fid_mean", nullptr}};
    try {
      const FidResult fid = fid_score(real, generated, extractor);
      fid_block = {{"fid_xy", fid.fid_xy}, {"fid_yz", fid.fid_yz}, {"fid_zx", fid.fid_zx}, {"fid_mean", fid.fid_mean}};
    } catch (const ValidationError& e) {
      // Too few slices for a full-rank covariance; report the reason instead of a number.
      fid_block["fid_error"] = e.what();
    }
    json block{{"cfg_scale", scale},
                       {"clip_t2i_mean", t2i / n},
                       {"clip_i2i_mean", i2i / n},
                       {"alignment_accuracy", alignment_defined ? json(static_cast<double>(hits) / n) : json(nullptr)},
                       {"n_cases", recs.size()},
                       {"n_reference_cases", real.size()},
                       {"extractor_id", extractor.id()},
                       {"embedder_id", embedder.id()}};
    block.update(fid_block);
    results.push_back(std::move(block));
  }
  json metrics{{"samples", samples_jsonl.string()}, {"results", results}, {"config", config.json}};
  if (!out_path.empty()) {
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    write_text_atomically(out_path, metrics.dump(2) + "\n");
  }
  return metrics;
}

}  // namespace ctsynth
