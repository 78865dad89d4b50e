// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <torch/torch.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ctsynth/codec.hpp"
#include "ctsynth/conditioning.hpp"
#include "ctsynth/diffusion.hpp"
#include "ctsynth/errors.hpp"
#include "ctsynth/metrics.hpp"
#include "ctsynth/phantom.hpp"
#include "ctsynth/pipeline.hpp"
#include "ctsynth/tensor_util.hpp"
#include "ctsynth/volume_io.hpp"
#include "support.hpp"

using namespace ctsynth;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Pinned tolerances and budgets.
constexpr double kCfgLinearityTol = 1e-6;
constexpr int kCfgTrials = 1000;
constexpr double kEulerTol = 1e-5;
constexpr double kPoolTol = 1e-6;
constexpr int kPoolTrials = 1000;
constexpr double kFrechetSelfTol = 1e-6;
constexpr double kFrechetClosedTol = 1e-8;
constexpr double kFrechetSampledRelTol = 0.05;
constexpr std::int64_t kFrechetSamples = 10000;
constexpr double kFidSelfMax = 1e-4;
constexpr int kCodecEpochs = 100;  // criterion allows up to 200
constexpr double kCodecMseMax = 0.01;
constexpr std::int64_t kDiffusionSteps = 500;
constexpr double kDiffusionLossRatioMax = 0.1;
constexpr std::size_t kFinalLossWindow = 20;
constexpr double kDropTarget = 0.15;
constexpr double kDropTol = 0.01;
constexpr int kDropTrials = 10000;
constexpr double kAlignmentMin = 0.75;
constexpr double kShuffledChance = 0.25;
constexpr double kShuffledTol = 0.05;
constexpr std::size_t kMinAlignmentSamples = 20;
constexpr double kGradRelTol = 1e-3;
constexpr double kFiniteDiffStep = 1e-6;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

// ---------------------------------------------------------------------------

Outcome cfg_identities() {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> scale(-10.0, 10.0);
  auto gen = make_generator(1);
  double worst = 0;
  for (int i = 0; i < kCfgTrials; ++i) {
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng() % 64);
    const auto u = torch::randn({n, 3}, gen, torch::kDouble);
    const auto c = torch::randn({n, 3}, gen, torch::kDouble);
    if (!torch::equal(cfg_combine(u, c, 1.0), c) || !torch::equal(cfg_combine(u, c, 0.0), u)) {
      return {false, "identity broken at trial " + std::to_string(i)};
    }
    const double s1 = scale(rng), s2 = scale(rng);
    const auto lhs = cfg_combine(u, c, s1) + cfg_combine(u, c, s2);
    const auto rhs = 2.0 * cfg_combine(u, c, 0.5 * (s1 + s2));
    worst = std::max(worst, max_abs(lhs - rhs));
  }
  return {worst <= kCfgLinearityTol, "max linearity error " + fmt(worst) + " over " + std::to_string(kCfgTrials)};
}

class ConstantVelocity final : public VelocityField {
 public:
  explicit ConstantVelocity(torch::Tensor v) : v_(std::move(v)) {}
  torch::Tensor velocity(const torch::Tensor&, double, const ConditioningTensor&) override { return v_; }

 private:
  torch::Tensor v_;
};

Outcome rflow_consistency() {
  auto gen = make_generator(2);
  const auto x0 = torch::randn({4, 8, 8, 4}, gen);
  const auto eps = torch::randn({4, 8, 8, 4}, gen);
  if (!torch::equal(forward_interpolate(x0, eps, 0.0), x0) || !torch::equal(forward_interpolate(x0, eps, 1.0), eps)) {
    return {false, "interpolation endpoints are not exact"};
  }
  const auto b0 = torch::stack({x0, eps}), b1 = torch::stack({eps, x0});
  const auto bt = forward_interpolate(b0, b1, torch::tensor({0.0F, 1.0F}));
  if (!torch::equal(bt[0], x0) || !torch::equal(bt[1], x0)) return {false, "batched endpoints are not exact"};

  const std::vector<std::int64_t> shape{4, 16, 16, 8};
  const auto target = torch::randn(shape, gen);
  const ConditioningTensor cond{torch::ones({3, kContextDim}), false};
  double worst = 0;
  for (int steps : {1, 5, 30}) {
    for (double s : {1.0, 3.0}) {
      SampleOptions opts;
      opts.num_inference_steps = steps;
      opts.cfg_scale = s;
      opts.seed = 11;
      opts.latent_shape = shape;
      ConstantVelocity field(initial_noise(shape, opts.seed) - target);
      const auto z = sample_latent(field, cond, opts);
      worst = std::max(worst, max_abs(z.data - target.to(torch::kDouble)));
    }
  }
  return {worst <= kEulerTol, "max Euler error " + fmt(worst) + " for steps {1, 5, 30}"};
}

Outcome masked_pooling() {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  double worst = 0;
  for (int i = 0; i < kPoolTrials; ++i) {
    const auto len = static_cast<std::int64_t>(1 + rng() % 24);
    const auto dim = static_cast<std::int64_t>(1 + rng() % 16);
    std::vector<double> h(static_cast<std::size_t>(len * dim));
    for (auto& x : h) x = n01(rng);
    std::vector<std::int64_t> mask(static_cast<std::size_t>(len));
    for (auto& m : mask) m = static_cast<std::int64_t>(rng() % 2);
    mask[static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(len))] = 1;

    const auto pooled = masked_mean_pool(torch::tensor(h).reshape({len, dim}), torch::tensor(mask));
    for (std::int64_t d = 0; d < dim; ++d) {
      double sum = 0, count = 0;
      for (std::int64_t t = 0; t < len; ++t) {
        if (mask[static_cast<std::size_t>(t)] == 0) continue;
        sum += h[static_cast<std::size_t>(t * dim + d)];
        count += 1;
      }
      worst = std::max(worst, std::abs(pooled[d].item<double>() - sum / count));
    }
  }
  bool zero_mask_rejected = false;
  try {
    masked_mean_pool(torch::ones({4, 3}), torch::zeros({4}, torch::kLong));
  } catch (const ContractError&) {
    zero_mask_rejected = true;
  }
  return {worst <= kPoolTol && zero_mask_rejected,
          "max error " + fmt(worst) + "; all-zero mask " + (zero_mask_rejected ? "rejected" : "accepted")};
}

Outcome conditioning_contract() {
  const auto specs = default_encoder_specs();
  const bool widths = specs[0].hidden_dim == 768 && specs[1].hidden_dim == 768 && specs[2].hidden_dim == 1024;
  const SectionEncoder sections = SectionEncoder::toy();
  SpacingEmbedding spacing;
  const RadiologyReport report{"Sphere of radius 8, upper-left.", "Solitary lesion.", {0.75, 0.75, 1.5}};
  const ConditioningTensor c = build_conditioning(report, sections, spacing);
  const bool shape = c.context.dim() == 2 && c.context.size(0) == 3 && c.context.size(1) == 2560;
  torch::NoGradGuard no_grad;
  const bool order = shape && torch::equal(c.context[0], sections.encode(report.findings)) &&
                     torch::equal(c.context[1], sections.encode(report.impression)) &&
                     torch::equal(c.context[2], spacing->embed(report.spacing_mm));
  const ConditioningTensor null = null_conditioning();
  const bool null_ok = null.is_null && null.context.sizes() == c.context.sizes() &&
                       null.context.abs().sum().item<double>() == 0.0;
  std::ostringstream msg;
  msg << "context " << c.context.sizes() << ", section width " << sections.width() << " = " << specs[0].hidden_dim
      << "+" << specs[1].hidden_dim << "+" << specs[2].hidden_dim << ", row order " << (order ? "ok" : "wrong")
      << ", null " << (null_ok ? "all zero" : "not zero");
  return {widths && shape && order && null_ok && sections.width() == 2560, msg.str()};
}

GaussianStats stats(Eigen::VectorXd m, Eigen::MatrixXd c) { return {std::move(m), std::move(c), 2}; }

Outcome frechet_numerics() {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  const int d = 6;
  Eigen::MatrixXd a(d, d), b(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = n01(rng), b(i, j) = n01(rng);
  Eigen::VectorXd ma(d), mb(d);
  for (int i = 0; i < d; ++i) ma(i) = n01(rng), mb(i) = n01(rng);
  const auto g1 = stats(ma, a * a.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d));
  const auto g2 = stats(mb, b * b.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d));

  const double self = std::abs(frechet_distance(g1, g1));
  const double uni = frechet_distance(stats(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)),
                                      stats(Eigen::VectorXd::Ones(1), Eigen::MatrixXd::Identity(1, 1)));
  const double two = frechet_distance(stats(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)),
                                      stats(Eigen::VectorXd::Zero(2), 4.0 * Eigen::MatrixXd::Identity(2, 2)));
  const double asym = std::abs(frechet_distance(g1, g2) - frechet_distance(g2, g1));

  // N(0, I) against N(mu, diag(s^2)): |mu|^2 + sum (1 + s^2 - 2 s).
  const int dim = 4;
  const std::vector<double> mu{0.5, -1.0, 0.0, 2.0}, sd{1.0, 2.0, 0.5, 1.5};
  double analytic = 0;
  for (int i = 0; i < dim; ++i) analytic += mu[i] * mu[i] + 1.0 + sd[i] * sd[i] - 2.0 * sd[i];
  Eigen::MatrixXd x(kFrechetSamples, dim), y(kFrechetSamples, dim);
  for (std::int64_t r = 0; r < kFrechetSamples; ++r) {
    for (int i = 0; i < dim; ++i) {
      x(r, i) = n01(rng);
      y(r, i) = mu[i] + sd[i] * n01(rng);
    }
  }
  const double sampled = frechet_distance(fit_gaussian(x), fit_gaussian(y));
  const double rel = std::abs(sampled - analytic) / analytic;

  const bool pass = self <= kFrechetSelfTol && std::abs(uni - 1.0) <= kFrechetClosedTol &&
                    std::abs(two - 2.0) <= kFrechetClosedTol && asym <= kFrechetClosedTol &&
                    rel <= kFrechetSampledRelTol;
  return {pass, "d(g,g) " + fmt(self) + ", 1D " + fmt(uni - 1.0) + ", 2D " + fmt(two - 2.0) + ", asym " + fmt(asym) +
                    ", sampled " + fmt(sampled) + " vs " + fmt(analytic) + " (rel " + fmt(rel) + ")"};
}

Outcome fid_self_score() {
  std::vector<CtVolume> set;
  for (std::size_t i = 0; i < 8; ++i) set.push_back(generate_phantom(corpus_phantom_spec(i, 0, {64, 64, 32})).volume);
  SeededConvExtractor extractor;
  const FidResult self = fid_score(set, set, extractor);

  std::vector<CtVolume> other;
  for (std::size_t i = 0; i < 8; ++i) other.push_back(generate_phantom(corpus_phantom_spec(i, 9, {64, 64, 32})).volume);
  const FidResult cross = fid_score(set, other, extractor);
  auto set_p = set, other_p = other;
  std::reverse(set_p.begin(), set_p.end());
  std::rotate(other_p.begin(), other_p.begin() + 3, other_p.end());
  const FidResult self_p = fid_score(set_p, set, extractor);
  const FidResult cross_p = fid_score(set_p, other_p, extractor);
  const bool exact = self_p.fid_mean == self.fid_mean && cross_p.fid_mean == cross.fid_mean &&
                     cross_p.fid_xy == cross.fid_xy && cross_p.fid_yz == cross.fid_yz && cross_p.fid_zx == cross.fid_zx;
  return {self.fid_mean <= kFidSelfMax && exact,
          "self fid_mean " + fmt(self.fid_mean) + ", permuted sets " + (exact ? "bit-identical" : "differ")};
}

Outcome shape_contract() {
  KlAutoencoder codec{CodecConfig{}};
  const Dims paper = codec->latent_dims({480, 480, 256});
  const Dims desk = codec->latent_dims({64, 64, 32});
  torch::NoGradGuard no_grad;
  const auto moments = codec->encode_moments(torch::zeros({1, 1, 64, 64, 32}));
  const bool traced = moments.mean.sizes() == torch::IntArrayRef{1, 4, 16, 16, 8};
  const auto c = codec->config().latent_channels;
  std::ostringstream msg;
  msg << "480x480x256 -> " << c << "x" << paper.x << "x" << paper.y << "x" << paper.z << ", 64x64x32 -> " << c << "x"
      << desk.x << "x" << desk.y << "x" << desk.z << ", encoder output " << moments.mean.sizes();
  return {c == 4 && paper == Dims{120, 120, 64} && desk == Dims{16, 16, 8} && traced, msg.str()};
}

// ---------------------------------------------------------------------------
// Desk-scale experiments share one phantom corpus and run directory.

struct DeskRun {
  testing::TempDir dir{"acceptance"};
  fs::path manifest;
  RunConfig config;
  bool codec_ready = false;
  bool ldm_ready = false;

  DeskRun() {
    manifest = generate_phantom_corpus(dir / "data", {8, 0, {64, 64, 32}, 0});
    config = make_run_config({{"data", {{"manifest", manifest.string()}, {"work_dir", (dir / "run").string()}}},
                              {"codec", {{"epochs", kCodecEpochs}}},
                              {"diffusion",
                               {{"total_steps", kDiffusionSteps},
                                {"batch_size", 8},
                                {"learning_rate", 2e-3},
                                {"decay_power", 0.5},
                                {"grad_clip_norm", 1.0},
                                {"channel_widths", {16, 32, 64, 128}},
                                {"time_embed_dim", 128},
                                {"log_every", 50},
                                {"checkpoint_every", kDiffusionSteps}}},
                              {"sampling", {{"cfg_scales", {0.0, 3.0}}, {"inference_steps", 30}, {"seeds", {0, 1, 2}}}}});
  }
};

Outcome codec_overfit(DeskRun& run) {
  VaeStageResult vae = run_vae_stage(run.config);
  run.codec_ready = true;
  double mse = 0;
  const auto entries = load_manifest(run.manifest).entries;
  torch::NoGradGuard no_grad;
  vae.codec->eval();
  for (const auto& e : entries) {
    const CtVolume v = load_case_volume(e, run.config.data.grid_shape);
    const CtVolume r = decode(vae.codec, encode(vae.codec, v, false).first, v.spacing_mm());
    double sum = 0;
    for (std::size_t i = 0; i < v.data().size(); ++i) {
      const double d = static_cast<double>(v.data()[i]) - static_cast<double>(r.data()[i]);
      sum += d * d;
    }
    mse += sum / static_cast<double>(v.data().size()) / static_cast<double>(entries.size());
  }
  return {mse <= kCodecMseMax, std::to_string(kCodecEpochs) + " epochs, mean reconstruction MSE " + fmt(mse)};
}

Outcome diffusion_overfit(DeskRun& run) {
  std::mt19937_64 rng(15);
  const ConditioningTensor cond{torch::ones({3, kContextDim}), false};
  int dropped = 0;
  for (int i = 0; i < kDropTrials; ++i) dropped += drop_conditioning(cond, kDropTarget, rng).is_null ? 1 : 0;
  const double freq = static_cast<double>(dropped) / kDropTrials;

  if (!run.codec_ready) return {false, "no codec checkpoint"};
  const LdmStageResult ldm = run_ldm_stage(run.config, false);
  run.ldm_ready = true;
  const auto& steps = ldm.steps;
  if (steps.size() < kFinalLossWindow) return {false, "too few steps"};
  double final_loss = 0;
  for (std::size_t i = steps.size() - kFinalLossWindow; i < steps.size(); ++i) final_loss += steps[i].loss;
  final_loss /= static_cast<double>(kFinalLossWindow);
  const double ratio = final_loss / steps.front().loss;
  const bool pass = ratio <= kDiffusionLossRatioMax && std::abs(freq - kDropTarget) <= kDropTol;
  return {pass, std::to_string(steps.size()) + " steps, loss " + fmt(steps.front().loss) + " -> " + fmt(final_loss) +
                    " (mean of last " + std::to_string(kFinalLossWindow) + ", ratio " + fmt(ratio) +
                    "); dropout frequency " + fmt(freq)};
}

Outcome alignment_benefit(DeskRun& run) {
  if (!run.ldm_ready) return {false, "no diffusion checkpoint"};
  SampleRequest req;
  req.out_dir = run.dir / "samples";
  req.write_montages = false;
  const auto records = run_sampling(run.config, req);
  std::map<double, std::pair<int, int>> by_scale;  // hits, total
  const auto entries = load_manifest(run.manifest).entries;
  int shuffled_hits = 0, shuffled_total = 0;
  for (const auto& r : records) {
    const double s = r.at("cfg_scale").get<double>();
    const CtVolume v = read_volume(r.at("volume").get<std::string>());
    auto& [hits, total] = by_scale[s];
    hits += phantom_alignment_score(v, r.at("findings").get<std::string>()).hit ? 1 : 0;
    ++total;
    if (s != 3.0) continue;
    // Every prompt of the corpus against this volume: the expectation under no alignment.
    for (const auto& e : entries) {
      shuffled_hits += phantom_alignment_score(v, e.findings).hit ? 1 : 0;
      ++shuffled_total;
    }
  }
  const auto acc = [&](double s) {
    const auto& [h, t] = by_scale[s];
    return t ? static_cast<double>(h) / t : 0.0;
  };
  const double a0 = acc(0.0), a3 = acc(3.0);
  const double chance = shuffled_total ? static_cast<double>(shuffled_hits) / shuffled_total : 0.0;
  const auto n3 = static_cast<std::size_t>(by_scale[3.0].second);
  const bool pass = n3 >= kMinAlignmentSamples && a3 >= kAlignmentMin && a3 >= a0 &&
                    std::abs(chance - kShuffledChance) <= kShuffledTol;
  return {pass, "accuracy at scale 3 " + fmt(a3) + " (n=" + std::to_string(n3) + "), at scale 0 " + fmt(a0) +
                    ", shuffled pairs " + fmt(chance)};
}

Outcome determinism(DeskRun& run) {
  if (!run.ldm_ready) return {false, "no diffusion checkpoint"};
  SampleRequest req;
  req.case_ids = {"phantom_0000", "phantom_0003"};
  req.cfg_scales = std::vector<double>{3.0};
  req.seeds = std::vector<std::uint64_t>{7};
  req.out_dir = run.dir / "det_a";
  const auto a = run_sampling(run.config, req);
  req.out_dir = run.dir / "det_b";
  const auto b = run_sampling(run.config, req);
  std::size_t files = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::vector<std::pair<std::string, std::string>> pairs{
        {a[i].at("volume").get<std::string>(), b[i].at("volume").get<std::string>()},
        {a[i].at("latent").get<std::string>(), b[i].at("latent").get<std::string>()}};
    for (std::size_t k = 0; k < a[i].at("montage").size(); ++k) {
      pairs.emplace_back(a[i].at("montage")[k].get<std::string>(), b[i].at("montage")[k].get<std::string>());
    }
    for (const auto& [pa, pb] : pairs) {
      const std::string ba = testing::read_bytes(pa);
      if (ba.empty() || ba != testing::read_bytes(pb)) return {false, "differs: " + fs::path(pa).filename().string()};
      ++files;
    }
  }
  return {files == a.size() * 5, std::to_string(files) + " files bit-identical across two runs"};
}

Outcome gradient_check() {
  torch::manual_seed(12);
  DenoiserConfig cfg;
  cfg.channel_widths = {4, 8};
  cfg.cross_attention_levels = {1};
  cfg.num_heads = 2;
  cfg.time_embed_dim = 8;
  UNet3d unet(cfg);
  unet->to(torch::kDouble);
  auto gen = make_generator(12);
  {
    torch::NoGradGuard no_grad;
    unet->conv_out->weight.copy_(torch::randn(unet->conv_out->weight.sizes(), gen, torch::kDouble) * 0.1);
  }
  const auto x0 = torch::randn({2, 4, 4, 4, 2}, gen, torch::kDouble);
  const auto noise = torch::randn({2, 4, 4, 4, 2}, gen, torch::kDouble);
  const auto t = torch::tensor({0.3, 0.8}, torch::kDouble);
  const auto context = torch::randn({2, 3, kContextDim}, gen, torch::kDouble);

  const auto loss_value = [&] {
    torch::NoGradGuard no_grad;
    return rflow_loss(unet, x0, noise, t, context).item<double>();
  };
  unet->zero_grad();
  rflow_loss(unet, x0, noise, t, context).backward();

  std::vector<std::pair<std::string, torch::Tensor>> probes;
  if (!unet->attention_blocks.empty()) probes.emplace_back("to_k", unet->attention_blocks.front()->to_k->weight);
  for (const auto& p : unet->named_parameters()) {
    if (p.key().find("conv_in.weight") != std::string::npos) probes.emplace_back(p.key(), p.value());
  }
  if (probes.size() < 2) return {false, "probe weights not found"};

  double worst = 0;
  std::string detail;
  for (auto& [name, w] : probes) {
    const auto flat_grad = w.grad().reshape({-1});
    const auto idx = flat_grad.abs().argmax().item<std::int64_t>();
    const double analytic = flat_grad[idx].item<double>();
    auto flat = w.view({-1});
    const double orig = flat[idx].item<double>();
    double plus = 0, minus = 0;
    {
      torch::NoGradGuard no_grad;
      flat[idx] = orig + kFiniteDiffStep;
      plus = loss_value();
      flat[idx] = orig - kFiniteDiffStep;
      minus = loss_value();
      flat[idx] = orig;
    }
    const double numeric = (plus - minus) / (2.0 * kFiniteDiffStep);
    const double rel = std::abs(numeric - analytic) / std::max(std::abs(analytic), 1e-12);
    worst = std::max(worst, rel);
    detail += (detail.empty() ? "" : ", ") + name + " rel err " + fmt(rel);
  }
  return {worst <= kGradRelTol, detail};
}

}  // namespace

// Optional arguments select criteria by number; the default runs all of them.
int main(int argc, char** argv) {
  torch::set_num_threads(1);
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  const auto wanted = [&](int id) {
    return selected.empty() || std::find(selected.begin(), selected.end(), id) != selected.end();
  };
  int failures = 0;
  int ran = 0;
  const auto run = [&](int id, const char* name, double budget_s, const std::function<Outcome()>& fn) {
    if (!wanted(id)) return;
    ++ran;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_budget = secs <= budget_s;
    const bool pass = o.pass && in_budget;
    failures += pass ? 0 : 1;
    std::printf("%s AC%02d %s: %s [%.1f s of %.0f s]%s\n", pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs,
                budget_s, in_budget ? "" : " over budget");
    std::fflush(stdout);
  };

  run(1, "cfg identities and linearity", 5, cfg_identities);
  run(2, "rectified-flow endpoints and Euler oracle", 10, rflow_consistency);
  run(3, "masked mean pooling", 5, masked_pooling);
  run(4, "conditioning contract", 30, conditioning_contract);
  run(5, "Frechet numerics", 30, frechet_numerics);
  run(6, "2.5D FID self-score", 60, fid_self_score);
  run(7, "latent shape contract", 30, shape_contract);

  std::optional<DeskRun> desk;
  try {
    if (wanted(8) || wanted(9) || wanted(10) || wanted(11)) desk.emplace();
  } catch (const std::exception& e) {
    std::printf("desk corpus setup failed: %s\n", e.what());
  }
  const auto with_desk = [&](Outcome (*fn)(DeskRun&)) {
    return [&desk, fn]() -> Outcome { return desk ? fn(*desk) : Outcome{false, "no desk corpus"}; };
  };
  run(8, "codec overfit", 15 * 60, with_desk(codec_overfit));
  run(9, "diffusion overfit and dropout frequency", 20 * 60, with_desk(diffusion_overfit));
  run(10, "alignment benefit of conditioning", 15 * 60, with_desk(alignment_benefit));
  run(11, "sampling and montage determinism", 5 * 60, with_desk(determinism));
  run(12, "gradient check", 60, gradient_check);

  std::printf("%d of %d criteria failed\n", failures, ran);
  return failures == 0 ? 0 : 1;
}
