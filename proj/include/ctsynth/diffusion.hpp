#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctsynth/codec.hpp"
#include "ctsynth/conditioning.hpp"

namespace ctsynth {

// ---------------------------------------------------------------------------
// Rectified-flow schedule
// ---------------------------------------------------------------------------

struct RFlowSchedule {
  std::int64_t num_train_steps = 1000;
  std::vector<double> timesteps;  // k / N for k = 1..N
};

RFlowSchedule make_schedule(std::int64_t num_train_steps = 1000);

// x_t = (1 - t) * x0 + t * noise. Endpoints return copies of x0 / noise exactly.
torch::Tensor forward_interpolate(const torch::Tensor& x0, const torch::Tensor& noise, double t);
// Per-item t of shape [B] broadcast over the remaining dims.
torch::Tensor forward_interpolate(const torch::Tensor& x0, const torch::Tensor& noise, const torch::Tensor& t);

// d x_t / dt of the linear path: noise - x0.
torch::Tensor velocity_target(const torch::Tensor& x0, const torch::Tensor& noise);

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

struct DenoiserConfig {
  std::vector<std::int64_t> channel_widths{8, 16, 32, 64};
  std::vector<std::int64_t> cross_attention_levels{2, 3};  // the last two resolution levels
  std::int64_t context_dim = kContextDim;
  std::int64_t num_heads = 8;
  std::int64_t time_embed_dim = 64;
  std::int64_t in_channels = kLatentChannels;
  std::int64_t num_train_steps = 1000;  // scales t before the sinusoidal embedding

  void validate() const;
  // Spatial dims must be multiples of this (2^(levels - 1)).
  std::int64_t spatial_multiple() const;
};

nlohmann::json to_json(const DenoiserConfig& c);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);

class TimeEmbeddingImpl : public torch::nn::Module {
 public:
  TimeEmbeddingImpl(std::int64_t dim, double t_scale);
  torch::Tensor forward(const torch::Tensor& t);  // [B] in [0, 1] -> [B, dim]

 private:
  std::int64_t dim_;
  double t_scale_;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TimeEmbedding);

class ResBlock3dImpl : public torch::nn::Module {
 public:
  ResBlock3dImpl(std::int64_t in, std::int64_t out, std::int64_t time_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

 private:
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv3d conv1{nullptr}, conv2{nullptr};
  torch::nn::Linear time_proj{nullptr};
  torch::nn::Conv3d skip{nullptr};
};
TORCH_MODULE(ResBlock3d);

// Multi-head attention from voxel tokens (queries) onto the context tokens (keys/values).
class CrossAttention3dImpl : public torch::nn::Module {
 public:
  CrossAttention3dImpl(std::int64_t channels, std::int64_t context_dim, std::int64_t heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

  torch::nn::Linear to_k{nullptr}, to_v{nullptr};

 private:
  std::int64_t heads_;
  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Linear to_q{nullptr}, to_out{nullptr};
};
TORCH_MODULE(CrossAttention3d);

class UNet3dImpl : public torch::nn::Module {
 public:
  explicit UNet3dImpl(DenoiserConfig config);

  // x [B, C, X, Y, Z], t [B], context [B, 3, D] -> velocity prediction shaped like x.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& context);

  const DenoiserConfig& config() const { return config_; }
  torch::nn::Conv3d conv_out{nullptr};
  std::vector<CrossAttention3d> attention_blocks;  // every cross-attention block, for probing

 private:
  bool has_attention(std::size_t level) const;

  DenoiserConfig config_;
  TimeEmbedding time_embed{nullptr};
  torch::nn::Conv3d conv_in{nullptr};
  std::vector<ResBlock3d> down_res_;
  std::vector<CrossAttention3d> down_attn_;  // null holder where a level has no attention
  std::vector<torch::nn::Conv3d> downsample_;
  ResBlock3d mid_res1{nullptr}, mid_res2{nullptr};
  CrossAttention3d mid_attn{nullptr};
  std::vector<ResBlock3d> up_res_;
  std::vector<CrossAttention3d> up_attn_;
  std::vector<torch::nn::Conv3d> upsample_;
  torch::nn::GroupNorm norm_out{nullptr};
};
TORCH_MODULE(UNet3d);

// Denoiser plus the learned spacing token; all weights the diffusion stage trains.
class DiffusionModelImpl : public torch::nn::Module {
 public:
  explicit DiffusionModelImpl(DenoiserConfig config);
  UNet3d unet{nullptr};
  SpacingEmbedding spacing{nullptr};
};
TORCH_MODULE(DiffusionModel);

// Single-item evaluation: x [C, X, Y, Z] -> prediction [C, X, Y, Z]. No autograd.
torch::Tensor denoiser_forward(UNet3d& unet, const torch::Tensor& x_t, double t, const ConditioningTensor& cond);

// ---------------------------------------------------------------------------
// Classifier-free guidance
// ---------------------------------------------------------------------------

struct CfgParams {
  double scale = 1.0;
  double drop_probability = 0.15;

  void validate() const;
};

// Returns null_conditioning() with probability p, else `cond`.
ConditioningTensor drop_conditioning(const ConditioningTensor& cond, double p, std::mt19937_64& rng);

// pred_uncond + s * (pred_cond - pred_uncond). s = 1 and s = 0 return the branch itself.
torch::Tensor cfg_combine(const torch::Tensor& pred_uncond, const torch::Tensor& pred_cond, double s);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainingItem {
  std::string case_id;
  torch::Tensor latent;  // scaled, [C, X, Y, Z]
  ReportEmbedding text;
};

struct DiffusionTrainConfig {
  double learning_rate = 1e-4;
  std::int64_t batch_size = 2;
  std::int64_t total_steps = 500;
  double drop_probability = 0.15;
  double decay_power = 1.0;
  double grad_clip_norm = 0.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const DiffusionTrainConfig& c);

// Mean squared error between the prediction and the rectified-flow velocity target for
// explicit (x0, noise, t, context); shared by the trainer and gradient checks.
torch::Tensor rflow_loss(UNet3d& unet, const torch::Tensor& x0, const torch::Tensor& noise, const torch::Tensor& t,
                         const torch::Tensor& context);

struct StepResult {
  std::int64_t step = 0;  // 1-based index of the completed step
  double loss = 0;
  double learning_rate = 0;
};

// Single-controller loop state: model, Adam moments and step counter. Randomness for step k
// derives from (seed, k) alone, so a resumed run replays the same draws it would have made.
class DiffusionTrainer {
 public:
  DiffusionTrainer(DiffusionModel model, RFlowSchedule schedule, DiffusionTrainConfig config);

  // Polynomial decay to zero over total_steps.
  double learning_rate_at(std::int64_t step_index) const;

  // One optimizer update on `batch`: per item draw t from the schedule, Gaussian noise and a
  // dropout decision, then regress the velocity target.
  StepResult training_step(const std::vector<const TrainingItem*>& batch);

  // Picks the batch for the next step from `dataset` (seeded by step) and runs it.
  StepResult step(const std::vector<TrainingItem>& dataset);

  std::int64_t steps_done() const { return steps_done_; }
  DiffusionModel& model() { return model_; }
  const DiffusionTrainConfig& config() const { return config_; }

  void save_state(const std::filesystem::path& path) const;
  void load_state(const std::filesystem::path& path);

 private:
  DiffusionModel model_;
  RFlowSchedule schedule_;
  DiffusionTrainConfig config_;
  std::unique_ptr<torch::optim::Adam> optimizer_;
  std::int64_t steps_done_ = 0;
};

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// Velocity of the reverse ODE at (x, t) under a conditioning tensor. x is [C, X, Y, Z].
class VelocityField {
 public:
  virtual ~VelocityField() = default;
  virtual torch::Tensor velocity(const torch::Tensor& x, double t, const ConditioningTensor& cond) = 0;
};

class DenoiserVelocity final : public VelocityField {
 public:
  explicit DenoiserVelocity(UNet3d unet) : unet_(std::move(unet)) {}
  torch::Tensor velocity(const torch::Tensor& x, double t, const ConditioningTensor& cond) override {
    return denoiser_forward(unet_, x, t, cond);
  }

 private:
  UNet3d unet_;
};

// Seeded standard-normal start point x_1.
torch::Tensor initial_noise(const std::vector<std::int64_t>& latent_shape, std::uint64_t seed);

struct SampleOptions {
  double cfg_scale = 1.0;
  int num_inference_steps = 30;
  std::uint64_t seed = 0;
  std::vector<std::int64_t> latent_shape{kLatentChannels, 16, 16, 8};
  double scale_factor = 1.0;
};

// Euler integration of dx/dt = v from t = 1 to t = 0 on a uniform grid. Each step evaluates
// the conditional and the null branch and combines them, except at scale 1 where only the
// conditional branch runs.
LatentVolume sample_latent(VelocityField& field, const ConditioningTensor& cond, const SampleOptions& options);

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

struct DiffusionCheckpoint {
  DiffusionModel model{nullptr};
  RFlowSchedule schedule;
  double scale_factor = 1.0;
  std::string codec_reference;
  std::int64_t step = 0;
  nlohmann::json run_config;
};

void save_diffusion_checkpoint(const std::filesystem::path& path, const DiffusionModel& model,
                               const RFlowSchedule& schedule, double scale_factor, const std::string& codec_reference,
                               std::int64_t step, const nlohmann::json& run_config);
DiffusionCheckpoint load_diffusion_checkpoint(const std::filesystem::path& path);

}  // namespace ctsynth
