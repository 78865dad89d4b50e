#pragma once

#include <torch/torch.h>

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctsynth/conditioning_types.hpp"
#include "ctsynth/phantom.hpp"
#include "ctsynth/volume.hpp"

namespace ctsynth {

// ---------------------------------------------------------------------------
// Gaussian fits and the Frechet distance
// ---------------------------------------------------------------------------

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  std::int64_t sample_count = 0;
};

// Sample mean and unbiased (n - 1) covariance of the rows of `features` [n, D]. Needs n >= 2.
GaussianStats fit_gaussian(const Eigen::MatrixXd& features);

// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}). The trace of the square root is taken from
// the eigenvalues of the symmetric S1^{1/2} S2 S1^{1/2}, negative eigenvalues clamped to 0.
double frechet_distance(const GaussianStats& g1, const GaussianStats& g2);

// ---------------------------------------------------------------------------
// 2.5D feature extraction
// ---------------------------------------------------------------------------

enum class ExtractorBackend { SeededRandomConv, ExternalPretrained };

struct FeatureExtractorSpec {
  ExtractorBackend backend = ExtractorBackend::SeededRandomConv;
  std::int64_t feature_dim = 64;
  std::int64_t input_channels = 3;
  std::uint64_t seed = 0;
};

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual const FeatureExtractorSpec& spec() const = 0;
  virtual std::string id() const = 0;
  // slices [N, 3, H, W], already normalized -> spatially averaged features [N, feature_dim].
  virtual torch::Tensor extract(const torch::Tensor& slices) = 0;
};

// Fixed 3-layer stride-2 2D conv stack with He-scaled weights drawn from the seed.
class SeededConvExtractor final : public FeatureExtractor {
 public:
  explicit SeededConvExtractor(FeatureExtractorSpec spec = {});
  const FeatureExtractorSpec& spec() const override { return spec_; }
  std::string id() const override;
  torch::Tensor extract(const torch::Tensor& slices) override;

 private:
  FeatureExtractorSpec spec_;
  std::array<torch::Tensor, 3> weights_;
  std::array<torch::Tensor, 3> biases_;
};

class ExternalExtractorAdapter final : public FeatureExtractor {
 public:
  using Callback = std::function<torch::Tensor(const torch::Tensor&)>;
  ExternalExtractorAdapter(std::string id, FeatureExtractorSpec spec, Callback callback);
  const FeatureExtractorSpec& spec() const override { return spec_; }
  std::string id() const override { return id_; }
  torch::Tensor extract(const torch::Tensor& slices) override { return callback_(slices); }

 private:
  std::string id_;
  FeatureExtractorSpec spec_;
  Callback callback_;
};

// One feature row per slice of `plane`: replicate to 3 channels, standardize each channel,
// run the extractor, check its width. Throws ContractError on a width mismatch.
Eigen::MatrixXd extract_features_2p5d(const CtVolume& volume, Plane plane, FeatureExtractor& extractor);

struct FidResult {
  double fid_xy = 0;
  double fid_yz = 0;
  double fid_zx = 0;
  double fid_mean = 0;
};

// HU volumes are clipped and normalized; if shapes differ across both sets, everything is
// resampled to the most common shape (ties: first seen).
std::vector<CtVolume> prepare_for_fid(std::span<const CtVolume> volumes, std::optional<Dims> target = {});

// Per-plane features pooled over all slices of all cases, indexed XY, YZ, ZX.
using PlaneFeatures = std::array<Eigen::MatrixXd, 3>;

PlaneFeatures pooled_plane_features(std::span<const CtVolume> volumes, FeatureExtractor& extractor);

// Requires at least feature_dim rows per plane in each set; the error names the plane.
FidResult fid_from_features(const PlaneFeatures& real, const PlaneFeatures& synth, std::int64_t feature_dim);

FidResult fid_score(std::span<const CtVolume> real_volumes, std::span<const CtVolume> synth_volumes,
                    FeatureExtractor& extractor);

// ---------------------------------------------------------------------------
// CLIP-style alignment
// ---------------------------------------------------------------------------

// a.b / (|a||b|), clamped to [-1, 1]. Throws ContractError on a zero vector.
double cosine_similarity(std::span<const double> a, std::span<const double> b);
double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

enum class EmbedderBackend { OracleFree, ExternalPretrained };

struct JointEmbedderSpec {
  EmbedderBackend backend = EmbedderBackend::OracleFree;
  std::int64_t embed_dim = 5;
  Dims resolution{32, 32, 16};  // volumes are resampled to this grid before embedding
};

class JointEmbedder {
 public:
  virtual ~JointEmbedder() = default;
  virtual const JointEmbedderSpec& spec() const = 0;
  virtual std::string id() const = 0;
  // Both return unit-norm vectors of length embed_dim.
  virtual Eigen::VectorXd embed_volume(const CtVolume& volume) = 0;
  virtual Eigen::VectorXd embed_text(const RadiologyReport& report) = 0;
};

// Weight-free joint space of axial layout: four quadrant occupancy components plus a
// constant component. Images contribute intensity mass above their 90th percentile; text
// contributes the quadrant phrase it mentions (uniform when none).
class LayoutEmbedder final : public JointEmbedder {
 public:
  explicit LayoutEmbedder(JointEmbedderSpec spec = {});
  const JointEmbedderSpec& spec() const override { return spec_; }
  std::string id() const override { return "oracle-free-layout"; }
  Eigen::VectorXd embed_volume(const CtVolume& volume) override;
  Eigen::VectorXd embed_text(const RadiologyReport& report) override;

 private:
  JointEmbedderSpec spec_;
};

class ExternalEmbedderAdapter final : public JointEmbedder {
 public:
  using VolumeFn = std::function<Eigen::VectorXd(const CtVolume&)>;
  using TextFn = std::function<Eigen::VectorXd(const RadiologyReport&)>;
  ExternalEmbedderAdapter(std::string id, JointEmbedderSpec spec, VolumeFn volume_fn, TextFn text_fn);
  const JointEmbedderSpec& spec() const override { return spec_; }
  std::string id() const override { return id_; }
  Eigen::VectorXd embed_volume(const CtVolume& volume) override;
  Eigen::VectorXd embed_text(const RadiologyReport& report) override;

 private:
  std::string id_;
  JointEmbedderSpec spec_;
  VolumeFn volume_fn_;
  TextFn text_fn_;
};

struct ClipScores {
  double t2i = 0;
  double i2i = 0;
};

// Errors from the embedder are rethrown with the case id attached.
ClipScores clip_scores(const CtVolume& generated, const RadiologyReport& prompt, const CtVolume& reference,
                       JointEmbedder& embedder, const std::string& case_id = "");

struct AlignmentResult {
  bool hit = false;
  std::optional<Quadrant> detected_quadrant;  // empty when no blob is found
};

// Thresholds at the 99th intensity percentile, takes the 6-connected component with the
// largest summed intensity and compares its centroid quadrant with the one named in the text.
// Throws ValidationError when the text names no quadrant.
AlignmentResult phantom_alignment_score(const CtVolume& generated, const std::string& findings);

}  // namespace ctsynth
