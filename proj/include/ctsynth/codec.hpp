#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "json.hpp"

#include "ctsynth/manifest.hpp"
#include "ctsynth/volume.hpp"

namespace ctsynth {

inline constexpr std::int64_t kLatentChannels = 4;
inline constexpr std::size_t kSpatialCompression = 4;

// Latent grid [4, X/4, Y/4, Z/4]. Unscaled latents are float32; scaled ones are float64 so
// that unscale(scale(z)) reproduces z bit for bit (see scale_latent).
struct LatentVolume {
  torch::Tensor data;
  bool scaled = false;
  double scale_factor = 1.0;
};

struct PosteriorParams {
  torch::Tensor mean;
  torch::Tensor log_variance;
};

struct CodecConfig {
  // Channel widths at full, half and quarter resolution.
  std::vector<std::int64_t> widths{8, 16, 32};
  std::int64_t latent_channels = kLatentChannels;
};

nlohmann::json to_json(const CodecConfig& c);
CodecConfig codec_config_from_json(const nlohmann::json& j);

class CodecResBlockImpl : public torch::nn::Module {
 public:
  explicit CodecResBlockImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv3d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(CodecResBlock);

// 3D convolutional KL autoencoder with two stride-2 stages (4x per axis).
class KlAutoencoderImpl : public torch::nn::Module {
 public:
  explicit KlAutoencoderImpl(CodecConfig config = {});

  // x: [B, 1, X, Y, Z] -> posterior moments, each [B, C, X/4, Y/4, Z/4].
  PosteriorParams encode_moments(const torch::Tensor& x);
  // z: [B, C, X/4, Y/4, Z/4] -> [B, 1, X, Y, Z] in [0, 1].
  torch::Tensor decode_tensor(const torch::Tensor& z);

  // Latent grid a given input grid maps to, derived from the encoder's layer geometry.
  Dims latent_dims(const Dims& input) const;
  const CodecConfig& config() const { return config_; }

 private:
  CodecConfig config_;
  torch::nn::Conv3d enc_in{nullptr}, enc_down1{nullptr}, enc_down2{nullptr}, enc_moments{nullptr};
  CodecResBlock enc_res1{nullptr}, enc_res2{nullptr};
  torch::nn::GroupNorm enc_norm{nullptr};
  torch::nn::Conv3d dec_in{nullptr}, dec_out{nullptr};
  CodecResBlock dec_res1{nullptr}, dec_res2{nullptr};
  torch::nn::ConvTranspose3d dec_up1{nullptr}, dec_up2{nullptr};
  torch::nn::GroupNorm dec_norm{nullptr};
};
TORCH_MODULE(KlAutoencoder);

// Throws ShapeError naming the first axis not divisible by 4.
void check_codec_input_dims(const Dims& d);

// sample=false returns the posterior mean; sample=true draws mean + sigma * eps from `rng_seed`.
std::pair<LatentVolume, PosteriorParams> encode(KlAutoencoder& codec, const CtVolume& v, bool sample,
                                                std::uint64_t rng_seed = 0);

// Rejects scaled latents (ContractError); output is UNIT-domain with the given spacing.
CtVolume decode(KlAutoencoder& codec, const LatentVolume& z, const Spacing& spacing_mm = {1.0, 1.0, 1.0});

struct VaeLoss {
  torch::Tensor total;
  torch::Tensor recon;
  torch::Tensor kl;
};

// recon = MSE; kl = mean over elements of 0.5 * (mu^2 + exp(logvar) - 1 - logvar).
VaeLoss vae_loss(const torch::Tensor& input, const torch::Tensor& reconstruction, const PosteriorParams& posterior,
                 double kl_weight);

struct CodecTrainConfig {
  CodecConfig arch;
  double kl_weight = 1e-6;
  int epochs = 200;
  int batch_size = 2;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct EpochLoss {
  int epoch = 0;
  double total = 0;
  double recon = 0;
  double kl = 0;
};

struct CodecTrainResult {
  KlAutoencoder codec{nullptr};
  std::vector<EpochLoss> history;
};

using EpochCallback = std::function<void(const EpochLoss&)>;

CodecTrainResult train_autoencoder(const std::vector<CtVolume>& volumes, const CodecTrainConfig& config,
                                   const EpochCallback& on_epoch = {});
CodecTrainResult train_autoencoder(const DatasetManifest& manifest, const Dims& grid,
                                   const CodecTrainConfig& config, const EpochCallback& on_epoch = {});

// 1 / std over every component of the given latents, rounded to float precision.
double scale_factor_from_latents(const std::vector<torch::Tensor>& latents);
// Uses posterior means of the calibration volumes.
double calibrate_scale_factor(KlAutoencoder& codec, const std::vector<CtVolume>& volumes);

// The single place that fixes the convention: diffusion sees z * scale_factor.
LatentVolume scale_latent(const LatentVolume& z, double scale_factor);
LatentVolume unscale_latent(const LatentVolume& z);

struct CodecCheckpoint {
  KlAutoencoder codec{nullptr};
  double scale_factor = 1.0;
  nlohmann::json run_config;
};

void save_codec_checkpoint(const std::filesystem::path& path, const KlAutoencoder& codec, double scale_factor,
                           const nlohmann::json& run_config);
CodecCheckpoint load_codec_checkpoint(const std::filesystem::path& path);

void save_latent(const std::filesystem::path& path, const LatentVolume& z);
LatentVolume load_latent(const std::filesystem::path& path);

}  // namespace ctsynth
