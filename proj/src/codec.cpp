#include "ctsynth/codec.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "ctsynth/checkpoint.hpp"
#include "ctsynth/errors.hpp"
#include "ctsynth/rng.hpp"
#include "ctsynth/tensor_util.hpp"
#include "ctsynth/volume_io.hpp"

namespace ctsynth {

namespace fs = std::filesystem;
namespace nn = torch::nn;

nlohmann::json to_json(const CodecConfig& c) {
  return {{"widths", c.widths}, {"latent_channels", c.latent_channels}};
}

CodecConfig codec_config_from_json(const nlohmann::json& j) {
  CodecConfig c;
  c.widths = j.at("widths").get<std::vector<std::int64_t>>();
  c.latent_channels = j.at("latent_channels").get<std::int64_t>();
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

CodecResBlockImpl::CodecResBlockImpl(std::int64_t channels) {
  norm1 = register_module("norm1", group_norm(channels));
  conv1 = register_module("conv1", conv3(channels, channels));
  norm2 = register_module("norm2", group_norm(channels));
  conv2 = register_module("conv2", conv3(channels, channels));
}

torch::Tensor CodecResBlockImpl::forward(const torch::Tensor& x) {
  auto h = conv1->forward(torch::silu(norm1->forward(x)));
  h = conv2->forward(torch::silu(norm2->forward(h)));
  return x + h;
}

KlAutoencoderImpl::KlAutoencoderImpl(CodecConfig config) : config_(std::move(config)) {
  if (config_.widths.size() != 3) throw ConfigError("codec widths must list 3 levels (full, half, quarter)");
  if (config_.latent_channels != kLatentChannels) throw ConfigError("codec latent_channels must be 4");
  const auto w0 = config_.widths[0], w1 = config_.widths[1], w2 = config_.widths[2];
  const auto c = config_.latent_channels;
  enc_in = register_module("enc_in", conv3(1, w0));
  enc_down1 = register_module("enc_down1", conv3(w0, w1, 2));
  enc_res1 = register_module("enc_res1", CodecResBlock(w1));
  enc_down2 = register_module("enc_down2", conv3(w1, w2, 2));
  enc_res2 = register_module("enc_res2", CodecResBlock(w2));
  enc_norm = register_module("enc_norm", group_norm(w2));
  enc_moments = register_module("enc_moments", conv3(w2, 2 * c));

  dec_in = register_module("dec_in", conv3(c, w2));
  dec_res1 = register_module("dec_res1", CodecResBlock(w2));
  dec_up1 = register_module("dec_up1", nn::ConvTranspose3d(nn::ConvTranspose3dOptions(w2, w1, 2).stride(2)));
  dec_res2 = register_module("dec_res2", CodecResBlock(w1));
  dec_up2 = register_module("dec_up2", nn::ConvTranspose3d(nn::ConvTranspose3dOptions(w1, w0, 2).stride(2)));
  dec_norm = register_module("dec_norm", group_norm(w0));
  dec_out = register_module("dec_out", conv3(w0, 1));
}

PosteriorParams KlAutoencoderImpl::encode_moments(const torch::Tensor& x) {
  auto h = torch::silu(enc_in->forward(x));
  h = enc_res1->forward(enc_down1->forward(h));
  h = enc_res2->forward(enc_down2->forward(h));
  auto moments = enc_moments->forward(torch::silu(enc_norm->forward(h)));
  auto parts = moments.chunk(2, 1);
  return {parts[0], parts[1].clamp(-30.0, 20.0)};
}

torch::Tensor KlAutoencoderImpl::decode_tensor(const torch::Tensor& z) {
  auto h = dec_res1->forward(dec_in->forward(z));
  h = dec_res2->forward(dec_up1->forward(h));
  h = dec_up2->forward(h);
  return torch::sigmoid(dec_out->forward(torch::silu(dec_norm->forward(h))));
}

Dims KlAutoencoderImpl::latent_dims(const Dims& input) const {
  std::array<std::size_t, 3> n{input.x, input.y, input.z};
  for (const nn::Conv3d* conv : {&enc_in, &enc_down1, &enc_down2, &enc_moments}) {
    const auto& opt = (*conv)->options;
    for (int a = 0; a < 3; ++a) {
      const auto k = static_cast<std::int64_t>((*opt.kernel_size())[a]);
      const auto s = static_cast<std::int64_t>((*opt.stride())[a]);
      const auto p = static_cast<std::int64_t>(std::get<torch::ExpandingArray<3>>(opt.padding())->at(a));
      n[a] = static_cast<std::size_t>((static_cast<std::int64_t>(n[a]) + 2 * p - k) / s + 1);
    }
  }
  return {n[0], n[1], n[2]};
}

void check_codec_input_dims(const Dims& d) {
  static const char* kAxisNames[] = {"x", "y", "z"};
  for (std::size_t a = 0; a < 3; ++a) {
    if (d[a] == 0 || d[a] % kSpatialCompression != 0) {
      throw ShapeError("codec input axis " + std::to_string(a) + " (" + kAxisNames[a] + ") has extent " +
                       std::to_string(d[a]) + ", which is not divisible by 4");
    }
  }
}

std::pair<LatentVolume, PosteriorParams> encode(KlAutoencoder& codec, const CtVolume& v, bool sample,
                                                std::uint64_t rng_seed) {
  if (v.domain() != IntensityDomain::UNIT) throw DomainError("codec encodes UNIT volumes only");
  check_codec_input_dims(v.dims());
  torch::NoGradGuard no_grad;
  auto posterior = codec->encode_moments(volume_to_tensor(v));
  posterior.mean = posterior.mean.squeeze(0);
  posterior.log_variance = posterior.log_variance.squeeze(0);
  LatentVolume z;
  if (sample) {
    auto gen = make_generator(rng_seed);
    auto eps = torch::randn(posterior.mean.sizes(), gen, posterior.mean.options());
    z.data = posterior.mean + torch::exp(0.5 * posterior.log_variance) * eps;
  } else {
    z.data = posterior.mean.clone();
  }
  return {z, posterior};
}

CtVolume decode(KlAutoencoder& codec, const LatentVolume& z, const Spacing& spacing_mm) {
  if (z.scaled) throw ContractError("decode expects an unscaled latent; call unscale_latent first");
  if (z.data.dim() != 4 || z.data.size(0) != kLatentChannels) {
    throw ShapeError("decode expects a [4, X, Y, Z] latent");
  }
  torch::NoGradGuard no_grad;
  auto out = codec->decode_tensor(z.data.to(torch::kFloat).unsqueeze(0));
  return tensor_to_volume(out, spacing_mm, IntensityDomain::UNIT);
}

VaeLoss vae_loss(const torch::Tensor& input, const torch::Tensor& reconstruction, const PosteriorParams& posterior,
                 double kl_weight) {
  if (!input.sizes().equals(reconstruction.sizes())) throw ShapeError("vae_loss: input/reconstruction shapes differ");
  if (!posterior.mean.sizes().equals(posterior.log_variance.sizes())) {
    throw ShapeError("vae_loss: posterior mean/log_variance shapes differ");
  }
  VaeLoss loss;
  loss.recon = torch::mse_loss(reconstruction, input);
  const auto& mu = posterior.mean;
  const auto& lv = posterior.log_variance;
  // expm1(lv) - lv is >= 0 for every lv without cancellation near 0.
  loss.kl = (0.5 * (mu * mu + (torch::expm1(lv) - lv))).mean();
  loss.total = loss.recon + kl_weight * loss.kl;
  return loss;
}

CodecTrainResult train_autoencoder(const std::vector<CtVolume>& volumes, const CodecTrainConfig& config,
                                   const EpochCallback& on_epoch) {
  if (volumes.empty()) throw ValidationError("train_autoencoder: training set is empty");
  if (config.batch_size < 1 || config.epochs < 1) throw ConfigError("codec epochs and batch_size must be >= 1");
  std::vector<torch::Tensor> items;
  for (const auto& v : volumes) {
    if (v.domain() != IntensityDomain::UNIT) throw DomainError("codec trains on UNIT volumes");
    check_codec_input_dims(v.dims());
    if (!(v.dims() == volumes.front().dims())) throw ShapeError("codec training volumes must share one grid");
    items.push_back(volume_to_tensor(v));
  }
  const auto data = torch::cat(items, 0);

  torch::manual_seed(config.seed);
  CodecTrainResult result;
  result.codec = KlAutoencoder(config.arch);
  result.codec->train();
  torch::optim::Adam optimizer(result.codec->parameters(), torch::optim::AdamOptions(config.learning_rate));
  auto gen = make_generator(mix_seed(config.seed, 0xC0DECULL));
  std::mt19937_64 order_rng(config.seed);
  std::vector<std::int64_t> order(static_cast<std::size_t>(data.size(0)));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    EpochLoss sums{epoch};
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<std::int64_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(end));
      auto batch = data.index_select(0, torch::tensor(idx, torch::kLong));
      optimizer.zero_grad();
      auto posterior = result.codec->encode_moments(batch);
      auto eps = torch::randn(posterior.mean.sizes(), gen, posterior.mean.options());
      auto z = posterior.mean + torch::exp(0.5 * posterior.log_variance) * eps;
      auto recon = result.codec->decode_tensor(z);
      auto loss = vae_loss(batch, recon, posterior, config.kl_weight);
      const double total = loss.total.item<double>();
      if (!std::isfinite(total)) {
        throw NumericError("codec training diverged at epoch " + std::to_string(epoch) + " (loss " +
                           std::to_string(total) + ")");
      }
      loss.total.backward();
      optimizer.step();
      sums.total += total;
      sums.recon += loss.recon.item<double>();
      sums.kl += loss.kl.item<double>();
      ++batches;
    }
    sums.total /= static_cast<double>(batches);
    sums.recon /= static_cast<double>(batches);
    sums.kl /= static_cast<double>(batches);
    result.history.push_back(sums);
    if (on_epoch) on_epoch(sums);
  }
  result.codec->eval();
  return result;
}

CodecTrainResult train_autoencoder(const DatasetManifest& manifest, const Dims& grid,
                                   const CodecTrainConfig& config, const EpochCallback& on_epoch) {
  std::vector<CtVolume> volumes;
  for (const auto& e : manifest.split(Split::Train)) volumes.push_back(load_case_volume(e, grid));
  if (volumes.empty()) throw ValidationError("train_autoencoder: manifest has no train entries");
  return train_autoencoder(volumes, config, on_epoch);
}

double scale_factor_from_latents(const std::vector<torch::Tensor>& latents) {
  if (latents.empty()) throw ValidationError("scale factor calibration needs at least one latent");
  std::vector<torch::Tensor> flat;
  for (const auto& z : latents) flat.push_back(z.detach().to(torch::kDouble).flatten());
  const auto all = torch::cat(flat);
  const double std = all.std(/*unbiased=*/false).item<double>();
  if (!(std > 0.0) || !std::isfinite(std)) {
    throw NumericError("latents have zero variance; cannot calibrate a scale factor");
  }
  return static_cast<double>(static_cast<float>(1.0 / std));
}

double calibrate_scale_factor(KlAutoencoder& codec, const std::vector<CtVolume>& volumes) {
  std::vector<torch::Tensor> latents;
  for (const auto& v : volumes) latents.push_back(encode(codec, v, false).first.data);
  return scale_factor_from_latents(latents);
}

LatentVolume scale_latent(const LatentVolume& z, double scale_factor) {
  if (z.scaled) throw ContractError("latent is already scaled");
  if (!(scale_factor > 0.0) || !std::isfinite(scale_factor)) throw ContractError("scale factor must be positive");
  // A float-representable factor times a float value is exact in double, and so is the
  // division that undoes it.
  const double s = static_cast<double>(static_cast<float>(scale_factor));
  return {z.data.to(torch::kDouble) * s, true, s};
}

LatentVolume unscale_latent(const LatentVolume& z) {
  if (!z.scaled) throw ContractError("latent is not scaled");
  return {(z.data.to(torch::kDouble) / z.scale_factor).to(torch::kFloat), false, z.scale_factor};
}

void save_codec_checkpoint(const fs::path& path, const KlAutoencoder& codec, double scale_factor,
                           const nlohmann::json& run_config) {
  save_checkpoint(path, "codec",
                  {{"codec", to_json(codec->config())}, {"scale_factor", scale_factor}, {"run_config", run_config}},
                  *codec);
}

CodecCheckpoint load_codec_checkpoint(const fs::path& path) {
  CheckpointReader reader(path, "codec");
  CodecCheckpoint ckpt;
  ckpt.codec = KlAutoencoder(codec_config_from_json(reader.meta().at("codec")));
  reader.load_into(*ckpt.codec);
  ckpt.codec->eval();
  ckpt.scale_factor = reader.meta().at("scale_factor").get<double>();
  ckpt.run_config = reader.meta().value("run_config", nlohmann::json::object());
  return ckpt;
}

namespace {
constexpr char kLatentMagic[8] = {'C', 'T', 'S', 'Y', 'L', 'A', 'T', '1'};
}

void save_latent(const fs::path& path, const LatentVolume& z) {
  if (z.data.dim() != 4) throw ShapeError("latent must be [C, X, Y, Z]");
  const auto data = z.data.detach().to(torch::kDouble).contiguous();
  std::array<std::int64_t, 4> shape{};
  for (int i = 0; i < 4; ++i) shape[static_cast<std::size_t>(i)] = data.size(i);
  const std::uint8_t scaled = z.scaled ? 1 : 0;
  write_atomically(path, [&](const fs::path& tmp) {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(kLatentMagic, sizeof(kLatentMagic));
    out.write(reinterpret_cast<const char*>(&scaled), 1);
    out.write(reinterpret_cast<const char*>(&z.scale_factor), sizeof(double));
    out.write(reinterpret_cast<const char*>(shape.data()), sizeof(shape));
    out.write(reinterpret_cast<const char*>(data.data_ptr<double>()),
              static_cast<std::streamsize>(data.numel() * sizeof(double)));
    if (!out) throw ValidationError("short write on " + path.string());
  });
}

LatentVolume load_latent(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::string(magic, 8) != std::string(kLatentMagic, 8)) {
    throw ValidationError(path.string() + ": not a latent file");
  }
  std::uint8_t scaled = 0;
  LatentVolume z;
  std::array<std::int64_t, 4> shape{};
  in.read(reinterpret_cast<char*>(&scaled), 1);
  in.read(reinterpret_cast<char*>(&z.scale_factor), sizeof(double));
  in.read(reinterpret_cast<char*>(shape.data()), sizeof(shape));
  auto data = torch::empty({shape[0], shape[1], shape[2], shape[3]}, torch::kDouble);
  in.read(reinterpret_cast<char*>(data.data_ptr<double>()), static_cast<std::streamsize>(data.numel() * 8));
  if (!in) throw ValidationError(path.string() + ": truncated latent");
  z.scaled = scaled != 0;
  z.data = z.scaled ? data : data.to(torch::kFloat);
  return z;
}

}  // namespace ctsynth
