#include "ctsynth/diffusion.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "ctsynth/checkpoint.hpp"
#include "ctsynth/errors.hpp"
#include "ctsynth/rng.hpp"
#include "ctsynth/tensor_util.hpp"

namespace ctsynth {

namespace fs = std::filesystem;
namespace nn = torch::nn;
namespace F = torch::nn::functional;

RFlowSchedule make_schedule(std::int64_t num_train_steps) {
  if (num_train_steps < 1) throw ConfigError("rectified-flow schedule needs at least one step");
  RFlowSchedule s;
  s.num_train_steps = num_train_steps;
  s.timesteps.reserve(static_cast<std::size_t>(num_train_steps));
  for (std::int64_t k = 1; k <= num_train_steps; ++k) {
    s.timesteps.push_back(static_cast<double>(k) / static_cast<double>(num_train_steps));
  }
  return s;
}

torch::Tensor forward_interpolate(const torch::Tensor& x0, const torch::Tensor& noise, double t) {
  if (!x0.sizes().equals(noise.sizes())) throw ShapeError("forward_interpolate: x0 and noise shapes differ");
  if (!(t >= 0.0 && t <= 1.0)) throw ContractError("forward_interpolate: t must lie in [0, 1]");
  if (t == 0.0) return x0.clone();
  if (t == 1.0) return noise.clone();
  return (1.0 - t) * x0 + t * noise;
}

torch::Tensor forward_interpolate(const torch::Tensor& x0, const torch::Tensor& noise, const torch::Tensor& t) {
  if (!x0.sizes().equals(noise.sizes())) throw ShapeError("forward_interpolate: x0 and noise shapes differ");
  if (t.dim() != 1 || t.size(0) != x0.size(0)) throw ShapeError("forward_interpolate: t must be [B]");
  if (t.min().item<double>() < 0.0 || t.max().item<double>() > 1.0) {
    throw ContractError("forward_interpolate: t must lie in [0, 1]");
  }
  std::vector<std::int64_t> view(static_cast<std::size_t>(x0.dim()), 1);
  view[0] = x0.size(0);
  const auto tb = t.to(x0.scalar_type()).view(view);
  return (1 - tb) * x0 + tb * noise;
}

torch::Tensor velocity_target(const torch::Tensor& x0, const torch::Tensor& noise) {
  if (!x0.sizes().equals(noise.sizes())) throw ShapeError("velocity_target: x0 and noise shapes differ");
  return noise - x0;
}

// ---------------------------------------------------------------------------

void DenoiserConfig::validate() const {
  if (channel_widths.empty()) throw ConfigError("denoiser channel_widths must not be empty");
  for (std::size_t i = 1; i < channel_widths.size(); ++i) {
    if (channel_widths[i] <= channel_widths[i - 1]) {
      throw ConfigError("denoiser channel_widths must be strictly increasing");
    }
  }
  for (auto level : cross_attention_levels) {
    if (level < 0 || level >= static_cast<std::int64_t>(channel_widths.size())) {
      throw ConfigError("cross_attention_levels entry " + std::to_string(level) + " is out of range");
    }
    if (channel_widths[static_cast<std::size_t>(level)] % num_heads != 0) {
      throw ConfigError("channel width " + std::to_string(channel_widths[static_cast<std::size_t>(level)]) +
                        " is not divisible by num_heads " + std::to_string(num_heads));
    }
  }
  if (context_dim < 1 || num_heads < 1) throw ConfigError("context_dim and num_heads must be positive");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be even");
  if (in_channels < 1) throw ConfigError("in_channels must be positive");
}

std::int64_t DenoiserConfig::spatial_multiple() const {
  return std::int64_t{1} << (channel_widths.size() - 1);
}

nlohmann::json to_json(const DenoiserConfig& c) {
  return {{"channel_widths", c.channel_widths}, {"cross_attention_levels", c.cross_attention_levels},
          {"context_dim", c.context_dim},       {"num_heads", c.num_heads},
          {"time_embed_dim", c.time_embed_dim}, {"in_channels", c.in_channels},
          {"num_train_steps", c.num_train_steps}};
}

DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.channel_widths = j.at("channel_widths").get<std::vector<std::int64_t>>();
  c.cross_attention_levels = j.at("cross_attention_levels").get<std::vector<std::int64_t>>();
  c.context_dim = j.at("context_dim").get<std::int64_t>();
  c.num_heads = j.at("num_heads").get<std::int64_t>();
  c.time_embed_dim = j.at("time_embed_dim").get<std::int64_t>();
  c.in_channels = j.at("in_channels").get<std::int64_t>();
  c.num_train_steps = j.at("num_train_steps").get<std::int64_t>();
  return c;
}

namespace {

nn::Conv3d conv3(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  return nn::Conv3d(nn::Conv3dOptions(in, out, 3).stride(stride).padding(1));
}

nn::GroupNorm group_norm(std::int64_t channels) {
  return nn::GroupNorm(nn::GroupNormOptions(norm_groups(channels), channels));
}

}  // namespace

TimeEmbeddingImpl::TimeEmbeddingImpl(std::int64_t dim, double t_scale) : dim_(dim), t_scale_(t_scale) {
  fc1 = register_module("fc1", nn::Linear(dim, dim));
  fc2 = register_module("fc2", nn::Linear(dim, dim));
}

torch::Tensor TimeEmbeddingImpl::forward(const torch::Tensor& t) {
  const std::int64_t half = dim_ / 2;
  const auto opts = fc1->weight.options();
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, opts) / static_cast<double>(half));
  auto args = (t.to(opts.dtype()) * t_scale_).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
  return fc2->forward(torch::silu(fc1->forward(emb)));
}

ResBlock3dImpl::ResBlock3dImpl(std::int64_t in, std::int64_t out, std::int64_t time_dim) {
  norm1 = register_module("norm1", group_norm(in));
  conv1 = register_module("conv1", conv3(in, out));
  time_proj = register_module("time_proj", nn::Linear(time_dim, out));
  norm2 = register_module("norm2", group_norm(out));
  conv2 = register_module("conv2", conv3(out, out));
  if (in != out) skip = register_module("skip", nn::Conv3d(nn::Conv3dOptions(in, out, 1)));
}

torch::Tensor ResBlock3dImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1->forward(torch::silu(norm1->forward(x)));
  h = h + time_proj->forward(torch::silu(temb)).view({h.size(0), h.size(1), 1, 1, 1});
  h = conv2->forward(torch::silu(norm2->forward(h)));
  return (skip ? skip->forward(x) : x) + h;
}

CrossAttention3dImpl::CrossAttention3dImpl(std::int64_t channels, std::int64_t context_dim, std::int64_t heads)
    : heads_(heads) {
  norm = register_module("norm", group_norm(channels));
  to_q = register_module("to_q", nn::Linear(nn::LinearOptions(channels, channels).bias(false)));
  to_k = register_module("to_k", nn::Linear(nn::LinearOptions(context_dim, channels).bias(false)));
  to_v = register_module("to_v", nn::Linear(nn::LinearOptions(context_dim, channels).bias(false)));
  to_out = register_module("to_out", nn::Linear(channels, channels));
}

torch::Tensor CrossAttention3dImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  const auto b = x.size(0), c = x.size(1);
  const auto n = x.size(2) * x.size(3) * x.size(4);
  const auto m = context.size(1);
  const auto head_dim = c / heads_;
  auto tokens = norm->forward(x).flatten(2).transpose(1, 2);  // [B, N, C]
  auto q = to_q->forward(tokens).view({b, n, heads_, head_dim}).transpose(1, 2);
  auto k = to_k->forward(context).view({b, m, heads_, head_dim}).transpose(1, 2);
  auto v = to_v->forward(context).view({b, m, heads_, head_dim}).transpose(1, 2);
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim)), -1);
  auto out = torch::matmul(attn, v).transpose(1, 2).reshape({b, n, c});
  out = to_out->forward(out).transpose(1, 2).reshape(x.sizes());
  return x + out;
}

bool UNet3dImpl::has_attention(std::size_t level) const {
  const auto& levels = config_.cross_attention_levels;
  return std::find(levels.begin(), levels.end(), static_cast<std::int64_t>(level)) != levels.end();
}

UNet3dImpl::UNet3dImpl(DenoiserConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& w = config_.channel_widths;
  const std::size_t levels = w.size();
  const auto tdim = config_.time_embed_dim;
  time_embed = register_module("time_embed", TimeEmbedding(tdim, static_cast<double>(config_.num_train_steps)));
  conv_in = register_module("conv_in", conv3(config_.in_channels, w[0]));

  auto make_attn = [&](std::size_t level, const std::string& name) -> CrossAttention3d {
    if (!has_attention(level)) return CrossAttention3d(nullptr);
    auto block = register_module(name, CrossAttention3d(w[level], config_.context_dim, config_.num_heads));
    attention_blocks.push_back(block);
    return block;
  };

  for (std::size_t i = 0; i < levels; ++i) {
    const auto in = i == 0 ? w[0] : w[i - 1];
    down_res_.push_back(register_module("down_res" + std::to_string(i), ResBlock3d(in, w[i], tdim)));
    down_attn_.push_back(make_attn(i, "down_attn" + std::to_string(i)));
    if (i + 1 < levels) {
      downsample_.push_back(register_module("downsample" + std::to_string(i), conv3(w[i], w[i], 2)));
    }
  }
  const auto deepest = w[levels - 1];
  mid_res1 = register_module("mid_res1", ResBlock3d(deepest, deepest, tdim));
  mid_attn = make_attn(levels - 1, "mid_attn");
  mid_res2 = register_module("mid_res2", ResBlock3d(deepest, deepest, tdim));

  up_res_.resize(levels, ResBlock3d(nullptr));
  up_attn_.resize(levels, CrossAttention3d(nullptr));
  upsample_.resize(levels, nn::Conv3d(nullptr));
  for (std::size_t r = 0; r < levels; ++r) {
    const std::size_t i = levels - 1 - r;
    up_res_[i] = register_module("up_res" + std::to_string(i), ResBlock3d(2 * w[i], w[i], tdim));
    up_attn_[i] = make_attn(i, "up_attn" + std::to_string(i));
    if (i > 0) upsample_[i] = register_module("upsample" + std::to_string(i), conv3(w[i], w[i - 1]));
  }
  norm_out = register_module("norm_out", group_norm(w[0]));
  conv_out = register_module("conv_out", conv3(w[0], config_.in_channels));
  torch::NoGradGuard no_grad;
  conv_out->weight.zero_();
  conv_out->bias.zero_();
}

torch::Tensor UNet3dImpl::forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& context) {
  const std::size_t levels = config_.channel_widths.size();
  if (x.dim() != 5 || x.size(1) != config_.in_channels) {
    throw ShapeError("denoiser expects x of shape [B, " + std::to_string(config_.in_channels) + ", X, Y, Z]");
  }
  for (int a = 2; a < 5; ++a) {
    if (x.size(a) % config_.spatial_multiple() != 0) {
      throw ShapeError("denoiser input spatial axis " + std::to_string(a - 2) + " (extent " +
                       std::to_string(x.size(a)) + ") must be a multiple of " +
                       std::to_string(config_.spatial_multiple()));
    }
  }
  if (context.dim() != 3 || context.size(0) != x.size(0) || context.size(2) != config_.context_dim) {
    throw ShapeError("denoiser expects context [B, tokens, " + std::to_string(config_.context_dim) + "]");
  }
  if (t.dim() != 1 || t.size(0) != x.size(0)) throw ShapeError("denoiser expects t of shape [B]");

  const auto temb = time_embed->forward(t);
  auto h = conv_in->forward(x);
  std::vector<torch::Tensor> skips;
  for (std::size_t i = 0; i < levels; ++i) {
    h = down_res_[i]->forward(h, temb);
    if (down_attn_[i]) h = down_attn_[i]->forward(h, context);
    skips.push_back(h);
    if (i + 1 < levels) h = downsample_[i]->forward(h);
  }
  h = mid_res1->forward(h, temb);
  if (mid_attn) h = mid_attn->forward(h, context);
  h = mid_res2->forward(h, temb);
  for (std::size_t r = 0; r < levels; ++r) {
    const std::size_t i = levels - 1 - r;
    h = up_res_[i]->forward(torch::cat({h, skips[i]}, 1), temb);
    if (up_attn_[i]) h = up_attn_[i]->forward(h, context);
    if (i > 0) {
      h = F::interpolate(h, F::InterpolateFuncOptions()
                                .scale_factor(std::vector<double>{2.0, 2.0, 2.0})
                                .mode(torch::kNearest));
      h = upsample_[i]->forward(h);
    }
  }
  return conv_out->forward(torch::silu(norm_out->forward(h)));
}

DiffusionModelImpl::DiffusionModelImpl(DenoiserConfig config) {
  const auto dim = config.context_dim;
  unet = register_module("unet", UNet3d(std::move(config)));
  spacing = register_module("spacing", SpacingEmbedding(dim));
}

torch::Tensor denoiser_forward(UNet3d& unet, const torch::Tensor& x_t, double t, const ConditioningTensor& cond) {
  if (x_t.dim() != 4) throw ShapeError("denoiser_forward expects a single latent [C, X, Y, Z]");
  if (!cond.context.defined() || cond.context.dim() != 2 || cond.context.size(1) != unet->config().context_dim) {
    throw ShapeError("conditioning width does not match the denoiser context_dim " +
                     std::to_string(unet->config().context_dim));
  }
  torch::NoGradGuard no_grad;
  const auto dtype = unet->conv_out->weight.scalar_type();
  auto tt = torch::full({1}, t, torch::TensorOptions().dtype(dtype));
  return unet->forward(x_t.to(dtype).unsqueeze(0), tt, cond.context.to(dtype).unsqueeze(0)).squeeze(0);
}

// ---------------------------------------------------------------------------

void CfgParams::validate() const {
  if (!(scale >= 0.0)) throw ConfigError("cfg scale must be >= 0");
  if (!(drop_probability >= 0.0 && drop_probability <= 1.0)) {
    throw ConfigError("drop_probability must lie in [0, 1]");
  }
}

ConditioningTensor drop_conditioning(const ConditioningTensor& cond, double p, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("drop probability must lie in [0, 1]");
  const double u = static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);  // [0, 1)
  if (u < p) {
    return {torch::zeros_like(cond.context), true};
  }
  return cond;
}

torch::Tensor cfg_combine(const torch::Tensor& pred_uncond, const torch::Tensor& pred_cond, double s) {
  if (!pred_uncond.sizes().equals(pred_cond.sizes())) throw ShapeError("cfg_combine: prediction shapes differ");
  if (s == 1.0) return pred_cond;
  if (s == 0.0) return pred_uncond;
  return pred_uncond + s * (pred_cond - pred_uncond);
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const DiffusionTrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"total_steps", c.total_steps},     {"drop_probability", c.drop_probability},
          {"decay_power", c.decay_power},     {"grad_clip_norm", c.grad_clip_norm},
          {"seed", c.seed}};
}

torch::Tensor rflow_loss(UNet3d& unet, const torch::Tensor& x0, const torch::Tensor& noise, const torch::Tensor& t,
                         const torch::Tensor& context) {
  const auto x_t = forward_interpolate(x0, noise, t);
  const auto target = velocity_target(x0, noise);
  return torch::mse_loss(unet->forward(x_t, t, context), target);
}

DiffusionTrainer::DiffusionTrainer(DiffusionModel model, RFlowSchedule schedule, DiffusionTrainConfig config)
    : model_(std::move(model)), schedule_(std::move(schedule)), config_(config) {
  if (config_.batch_size < 1) throw ConfigError("diffusion batch_size must be >= 1");
  if (config_.total_steps < 1) throw ConfigError("diffusion total_steps must be >= 1");
  CfgParams{1.0, config_.drop_probability}.validate();
  optimizer_ = std::make_unique<torch::optim::Adam>(model_->parameters(),
                                                    torch::optim::AdamOptions(config_.learning_rate));
}

double DiffusionTrainer::learning_rate_at(std::int64_t step_index) const {
  const double progress = static_cast<double>(step_index) / static_cast<double>(config_.total_steps);
  return config_.learning_rate * std::pow(std::max(0.0, 1.0 - progress), config_.decay_power);
}

StepResult DiffusionTrainer::training_step(const std::vector<const TrainingItem*>& batch) {
  if (batch.empty()) throw ContractError("training_step needs a non-empty batch");
  const std::int64_t k = steps_done_;
  std::mt19937_64 rng(mix_seed(config_.seed, static_cast<std::uint64_t>(2 * k)));
  auto gen = make_generator(mix_seed(config_.seed, static_cast<std::uint64_t>(2 * k + 1)));
  const auto n_t = static_cast<std::uint64_t>(schedule_.timesteps.size());

  model_->train();
  std::vector<torch::Tensor> x0s, noises, contexts;
  std::vector<double> ts;
  for (const TrainingItem* item : batch) {
    const auto x0 = item->latent.to(torch::kFloat);
    ts.push_back(schedule_.timesteps[static_cast<std::size_t>(rng() % n_t)]);
    noises.push_back(torch::randn(x0.sizes(), gen, x0.options()));
    x0s.push_back(x0);
    const ConditioningTensor cond = assemble_conditioning(item->text, model_->spacing);
    contexts.push_back(drop_conditioning(cond, config_.drop_probability, rng).context);
  }
  const auto x0 = torch::stack(x0s);
  const auto noise = torch::stack(noises);
  const auto context = torch::stack(contexts);
  const auto t = torch::tensor(ts, torch::kFloat);

  const double lr = learning_rate_at(k);
  for (auto& group : optimizer_->param_groups()) {
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }
  optimizer_->zero_grad();
  auto loss = rflow_loss(model_->unet, x0, noise, t, context);
  const double value = loss.item<double>();
  if (!std::isfinite(value)) {
    std::ostringstream msg;
    msg << "diffusion loss is " << value << " at step " << k + 1 << "; t = [";
    for (std::size_t i = 0; i < ts.size(); ++i) msg << (i ? ", " : "") << ts[i];
    msg << "], cases = [";
    for (std::size_t i = 0; i < batch.size(); ++i) msg << (i ? ", " : "") << batch[i]->case_id;
    msg << "]";
    throw NumericError(msg.str());
  }
  loss.backward();
  if (config_.grad_clip_norm > 0) torch::nn::utils::clip_grad_norm_(model_->parameters(), config_.grad_clip_norm);
  optimizer_->step();
  ++steps_done_;
  return {steps_done_, value, lr};
}

StepResult DiffusionTrainer::step(const std::vector<TrainingItem>& dataset) {
  if (dataset.empty()) throw ValidationError("diffusion training set is empty");
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(config_.seed ^ 0xBA7C4ULL, static_cast<std::uint64_t>(steps_done_)));
  std::shuffle(order.begin(), order.end(), rng);
  const auto count = std::min<std::size_t>(dataset.size(), static_cast<std::size_t>(config_.batch_size));
  std::vector<const TrainingItem*> batch;
  for (std::size_t i = 0; i < count; ++i) batch.push_back(&dataset[order[i]]);
  // Keep batch composition independent of shuffle output order.
  std::sort(batch.begin(), batch.end());
  return training_step(batch);
}

void DiffusionTrainer::save_state(const fs::path& path) const {
  torch::serialize::OutputArchive archive;
  archive.write("steps_done", c10::IValue(steps_done_));
  torch::serialize::OutputArchive opt;
  optimizer_->save(opt);
  archive.write("optimizer", opt);
  auto tmp = path;
  tmp += ".partial";
  archive.save_to(tmp.string());
  fs::rename(tmp, path);
}

void DiffusionTrainer::load_state(const fs::path& path) {
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
    c10::IValue steps;
    archive.read("steps_done", steps);
    steps_done_ = steps.toInt();
    torch::serialize::InputArchive opt;
    archive.read("optimizer", opt);
    optimizer_->load(opt);
  } catch (const c10::Error& e) {
    throw ValidationError("cannot read trainer state " + path.string() + ": " + e.what_without_backtrace());
  }
}

// ---------------------------------------------------------------------------

torch::Tensor initial_noise(const std::vector<std::int64_t>& latent_shape, std::uint64_t seed) {
  auto gen = make_generator(seed);
  return torch::randn(latent_shape, gen, torch::kFloat);
}

LatentVolume sample_latent(VelocityField& field, const ConditioningTensor& cond, const SampleOptions& options) {
  if (options.num_inference_steps < 1) throw ConfigError("num_inference_steps must be >= 1");
  CfgParams{options.cfg_scale, 0.0}.validate();
  const ConditioningTensor null_cond = null_conditioning(cond.context.size(1));
  auto x = initial_noise(options.latent_shape, options.seed);
  const int n = options.num_inference_steps;
  for (int k = 0; k < n; ++k) {
    const double t = static_cast<double>(n - k) / n;
    const double t_next = static_cast<double>(n - k - 1) / n;
    torch::Tensor v;
    if (options.cfg_scale == 1.0) {
      v = field.velocity(x, t, cond);
    } else {
      const auto pred_uncond = field.velocity(x, t, null_cond);
      const auto pred_cond = field.velocity(x, t, cond);
      v = cfg_combine(pred_uncond, pred_cond, options.cfg_scale);
    }
    x = x + (t_next - t) * v.to(x.scalar_type());
  }
  return {x.to(torch::kDouble), true, options.scale_factor};
}

// ---------------------------------------------------------------------------

void save_diffusion_checkpoint(const fs::path& path, const DiffusionModel& model, const RFlowSchedule& schedule,
                               double scale_factor, const std::string& codec_reference, std::int64_t step,
                               const nlohmann::json& run_config) {
  save_checkpoint(path, "diffusion",
                  {{"denoiser", to_json(model->unet->config())},
                   {"num_train_steps", schedule.num_train_steps},
                   {"scale_factor", scale_factor},
                   {"codec_reference", codec_reference},
                   {"step", step},
                   {"run_config", run_config}},
                  *model);
}

DiffusionCheckpoint load_diffusion_checkpoint(const fs::path& path) {
  CheckpointReader reader(path, "diffusion");
  const auto& meta = reader.meta();
  DiffusionCheckpoint ckpt;
  ckpt.model = DiffusionModel(denoiser_config_from_json(meta.at("denoiser")));
  reader.load_into(*ckpt.model);
  ckpt.model->eval();
  ckpt.schedule = make_schedule(meta.at("num_train_steps").get<std::int64_t>());
  ckpt.scale_factor = meta.at("scale_factor").get<double>();
  ckpt.codec_reference = meta.value("codec_reference", "");
  ckpt.step = meta.value("step", std::int64_t{0});
  ckpt.run_config = meta.value("run_config", nlohmann::json::object());
  return ckpt;
}

}  // namespace ctsynth
