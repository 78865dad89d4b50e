#include "ctsynth/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <numeric>
#include <vector>

#include "ctsynth/errors.hpp"
#include "ctsynth/tensor_util.hpp"

namespace ctsynth {

GaussianStats fit_gaussian(const Eigen::MatrixXd& features) {
  const auto n = features.rows();
  if (n < 2) throw ValidationError("fit_gaussian needs at least 2 samples, got " + std::to_string(n));
  if (!features.allFinite()) throw NumericError("fit_gaussian: non-finite feature values");
  // Rows are summed in lexicographic order, so any permutation of the input gives bit-identical stats.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index j = 0; j < features.cols(); ++j) {
      if (features(a, j) != features(b, j)) return features(a, j) < features(b, j);
    }
    return false;
  });
  Eigen::MatrixXd sorted(n, features.cols());
  for (Eigen::Index i = 0; i < n; ++i) sorted.row(i) = features.row(order[static_cast<std::size_t>(i)]);
  GaussianStats g;
  g.sample_count = n;
  g.mean = sorted.colwise().mean().transpose();
  const Eigen::MatrixXd centered = sorted.rowwise() - g.mean.transpose();
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  g.covariance = 0.5 * (cov + cov.transpose());
  return g;
}

namespace {

Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eigen_with_ridge(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  if (solver.info() == Eigen::Success) return solver;
  const Eigen::MatrixXd ridged = m + 1e-6 * Eigen::MatrixXd::Identity(m.rows(), m.cols());
  solver.compute(ridged);
  if (solver.info() != Eigen::Success) throw NumericError("eigendecomposition failed even with a ridge");
  return solver;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const auto solver = eigen_with_ridge(m);
  const Eigen::VectorXd root = solver.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return solver.eigenvectors() * root.asDiagonal() * solver.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianStats& g1, const GaussianStats& g2) {
  if (g1.mean.size() != g2.mean.size() || g1.covariance.rows() != g2.covariance.rows()) {
    throw ShapeError("frechet_distance: dimension mismatch");
  }
  if (!g1.mean.allFinite() || !g2.mean.allFinite() || !g1.covariance.allFinite() || !g2.covariance.allFinite()) {
    throw NumericError("frechet_distance: non-finite statistics");
  }
  const Eigen::MatrixXd s1 = 0.5 * (g1.covariance + g1.covariance.transpose());
  const Eigen::MatrixXd s2 = 0.5 * (g2.covariance + g2.covariance.transpose());
  const Eigen::MatrixXd root1 = psd_sqrt(s1);
  Eigen::MatrixXd inner = root1 * s2 * root1;
  inner = 0.5 * (inner + inner.transpose());
  const double trace_sqrt = eigen_with_ridge(inner).eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double mean_term = (g1.mean - g2.mean).squaredNorm();
  const double d = mean_term + s1.trace() + s2.trace() - 2.0 * trace_sqrt;
  return std::max(0.0, d);
}

// ---------------------------------------------------------------------------

SeededConvExtractor::SeededConvExtractor(FeatureExtractorSpec spec) : spec_(spec) {
  if (spec_.feature_dim < 2) throw ConfigError("feature_dim must be >= 2");
  if (spec_.input_channels != 3) throw ConfigError("the 2D extractor takes 3-channel slices");
  spec_.backend = ExtractorBackend::SeededRandomConv;
  auto gen = make_generator(spec_.seed);
  const std::array<std::int64_t, 4> channels{3, 16, 32, spec_.feature_dim};
  for (std::size_t i = 0; i < 3; ++i) {
    const double fan_in = static_cast<double>(channels[i] * 9);
    weights_[i] = torch::randn({channels[i + 1], channels[i], 3, 3}, gen, torch::kFloat) * std::sqrt(2.0 / fan_in);
    biases_[i] = torch::randn({channels[i + 1]}, gen, torch::kFloat) * 0.1;
  }
}

std::string SeededConvExtractor::id() const {
  return "seeded-random-conv(d=" + std::to_string(spec_.feature_dim) + ",seed=" + std::to_string(spec_.seed) + ")";
}

torch::Tensor SeededConvExtractor::extract(const torch::Tensor& slices) {
  torch::NoGradGuard no_grad;
  auto h = slices.to(torch::kFloat);
  for (std::size_t i = 0; i < 3; ++i) {
    h = torch::conv2d(h, weights_[i], biases_[i], /*stride=*/2, /*padding=*/1);
    if (i < 2) h = torch::relu(h);
  }
  return h.mean({2, 3});
}

ExternalExtractorAdapter::ExternalExtractorAdapter(std::string id, FeatureExtractorSpec spec, Callback callback)
    : id_(std::move(id)), spec_(spec), callback_(std::move(callback)) {
  spec_.backend = ExtractorBackend::ExternalPretrained;
  if (!callback_) throw ContractError("external extractor adapter needs a callback");
}

Eigen::MatrixXd extract_features_2p5d(const CtVolume& volume, Plane plane, FeatureExtractor& extractor) {
  const auto slices = extract_plane_slices(volume, plane);
  const auto n = static_cast<std::int64_t>(slices.size());
  const auto rows = static_cast<std::int64_t>(slices.front().rows);
  const auto cols = static_cast<std::int64_t>(slices.front().cols);
  auto batch = torch::empty({n, 1, rows, cols}, torch::kFloat);
  float* dst = batch.data_ptr<float>();
  for (const auto& s : slices) dst = std::copy(s.pixels.begin(), s.pixels.end(), dst);

  // All three replicated channels carry the same values, so one standardization serves them all.
  auto mean = batch.mean({2, 3}, /*keepdim=*/true);
  auto std = batch.std({2, 3}, /*unbiased=*/false, /*keepdim=*/true);
  auto scale = torch::where(std > 1e-8, std, torch::ones_like(std));
  batch = ((batch - mean) / scale).expand({n, 3, rows, cols}).contiguous();

  const auto features = extractor.extract(batch).to(torch::kDouble).contiguous();
  const auto dim = extractor.spec().feature_dim;
  if (features.dim() != 2 || features.size(0) != n || features.size(1) != dim) {
    throw ContractError("extractor " + extractor.id() + " emitted features of shape [" +
                        std::to_string(features.size(0)) + ", " +
                        std::to_string(features.dim() > 1 ? features.size(1) : 0) + "], declared width " +
                        std::to_string(dim));
  }
  Eigen::MatrixXd out(n, dim);
  const auto acc = features.accessor<double, 2>();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t d = 0; d < dim; ++d) out(i, d) = acc[i][d];
  return out;
}

std::vector<CtVolume> prepare_for_fid(std::span<const CtVolume> volumes, std::optional<Dims> target) {
  std::vector<CtVolume> out;
  out.reserve(volumes.size());
  for (const auto& v : volumes) out.push_back(v.domain() == IntensityDomain::HU ? clip_and_normalize(v) : v);
  if (!target) {
    std::vector<std::pair<Dims, std::size_t>> counts;
    for (const auto& v : out) {
      auto it = std::find_if(counts.begin(), counts.end(), [&](const auto& c) { return c.first == v.dims(); });
      if (it == counts.end()) {
        counts.emplace_back(v.dims(), 1);
      } else {
        ++it->second;
      }
    }
    if (counts.size() <= 1) return out;
    target = std::max_element(counts.begin(), counts.end(),
                              [](const auto& a, const auto& b) { return a.second < b.second; })
                 ->first;
  }
  for (auto& v : out)
    if (!(v.dims() == *target)) v = resample_to_grid(v, *target);
  return out;
}

PlaneFeatures pooled_plane_features(std::span<const CtVolume> volumes, FeatureExtractor& extractor) {
  PlaneFeatures pooled;
  for (std::size_t p = 0; p < 3; ++p) {
    std::vector<Eigen::MatrixXd> parts;
    Eigen::Index total = 0;
    for (const auto& v : volumes) {
      parts.push_back(extract_features_2p5d(v, kAllPlanes[p], extractor));
      total += parts.back().rows();
    }
    pooled[p].resize(total, extractor.spec().feature_dim);
    Eigen::Index row = 0;
    for (const auto& part : parts) {
      pooled[p].middleRows(row, part.rows()) = part;
      row += part.rows();
    }
  }
  return pooled;
}

FidResult fid_from_features(const PlaneFeatures& real, const PlaneFeatures& synth, std::int64_t feature_dim) {
  std::array<double, 3> per_plane{};
  for (std::size_t p = 0; p < 3; ++p) {
    for (const auto* set : {&real[p], &synth[p]}) {
      if (set->rows() < feature_dim || set->rows() < 2) {
        throw ValidationError(std::string("insufficient samples for plane ") + to_string(kAllPlanes[p]) + ": " +
                              std::to_string(set->rows()) + " slices, need >= feature_dim " +
                              std::to_string(feature_dim));
      }
    }
    per_plane[p] = frechet_distance(fit_gaussian(real[p]), fit_gaussian(synth[p]));
  }
  return {per_plane[0], per_plane[1], per_plane[2], (per_plane[0] + per_plane[1] + per_plane[2]) / 3.0};
}

FidResult fid_score(std::span<const CtVolume> real_volumes, std::span<const CtVolume> synth_volumes,
                    FeatureExtractor& extractor) {
  if (real_volumes.empty() || synth_volumes.empty()) throw ValidationError("fid_score needs non-empty sets");
  std::vector<CtVolume> all(real_volumes.begin(), real_volumes.end());
  all.insert(all.end(), synth_volumes.begin(), synth_volumes.end());
  auto prepared = prepare_for_fid(all);
  const auto split = static_cast<std::ptrdiff_t>(real_volumes.size());
  const std::span<const CtVolume> real(prepared.data(), static_cast<std::size_t>(split));
  const std::span<const CtVolume> synth(prepared.data() + split, prepared.size() - static_cast<std::size_t>(split));
  return fid_from_features(pooled_plane_features(real, extractor), pooled_plane_features(synth, extractor),
                           extractor.spec().feature_dim);
}

// ---------------------------------------------------------------------------

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw ContractError("cosine_similarity: zero-norm vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return cosine_similarity(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
                           std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
}

namespace {

std::size_t quadrant_index(Quadrant q) { return static_cast<std::size_t>(q); }

Eigen::VectorXd normalized(Eigen::VectorXd v) {
  const double n = v.norm();
  if (!(n > 0.0)) throw ContractError("embedding has zero norm");
  return v / n;
}

float percentile(std::span<const float> values, double q) {
  std::vector<float> copy(values.begin(), values.end());
  const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(copy.size() - 1)));
  std::nth_element(copy.begin(), copy.begin() + static_cast<std::ptrdiff_t>(k), copy.end());
  return copy[k];
}

constexpr double kLayoutBias = 0.5;

}  // namespace

LayoutEmbedder::LayoutEmbedder(JointEmbedderSpec spec) : spec_(spec) {
  spec_.backend = EmbedderBackend::OracleFree;
  spec_.embed_dim = 5;
}

Eigen::VectorXd LayoutEmbedder::embed_volume(const CtVolume& volume) {
  const Dims& g = volume.dims();
  const float floor_value = percentile(volume.data(), 0.90);
  Eigen::VectorXd e = Eigen::VectorXd::Zero(5);
  for (std::size_t x = 0; x < g.x; ++x)
    for (std::size_t y = 0; y < g.y; ++y) {
      const double qx = static_cast<double>(x) + 0.5;
      const double qy = static_cast<double>(y) + 0.5;
      const auto q = quadrant_index(quadrant_of(qx, qy, g));
      for (std::size_t z = 0; z < g.z; ++z) e[static_cast<Eigen::Index>(q)] += std::max(0.0F, volume.at(x, y, z) - floor_value);
    }
  const double mass = e.head(4).sum();
  if (mass > 0) {
    e.head(4) /= mass;
  } else {
    e.head(4).setConstant(0.25);
  }
  e[4] = kLayoutBias;
  return normalized(e);
}

Eigen::VectorXd LayoutEmbedder::embed_text(const RadiologyReport& report) {
  Eigen::VectorXd e = Eigen::VectorXd::Constant(5, 0.25);
  auto q = parse_quadrant(report.findings);
  if (!q) q = parse_quadrant(report.impression);
  if (q) {
    e.head(4).setZero();
    e[static_cast<Eigen::Index>(quadrant_index(*q))] = 1.0;
  }
  e[4] = kLayoutBias;
  return normalized(e);
}

ExternalEmbedderAdapter::ExternalEmbedderAdapter(std::string id, JointEmbedderSpec spec, VolumeFn volume_fn,
                                                 TextFn text_fn)
    : id_(std::move(id)), spec_(spec), volume_fn_(std::move(volume_fn)), text_fn_(std::move(text_fn)) {
  spec_.backend = EmbedderBackend::ExternalPretrained;
  if (!volume_fn_ || !text_fn_) throw ContractError("external embedder adapter needs both callbacks");
}

Eigen::VectorXd ExternalEmbedderAdapter::embed_volume(const CtVolume& volume) {
  auto e = volume_fn_(volume);
  if (e.size() != spec_.embed_dim) throw ContractError("embedder " + id_ + " returned the wrong width");
  return normalized(std::move(e));
}

Eigen::VectorXd ExternalEmbedderAdapter::embed_text(const RadiologyReport& report) {
  auto e = text_fn_(report);
  if (e.size() != spec_.embed_dim) throw ContractError("embedder " + id_ + " returned the wrong width");
  return normalized(std::move(e));
}

ClipScores clip_scores(const CtVolume& generated, const RadiologyReport& prompt, const CtVolume& reference,
                       JointEmbedder& embedder, const std::string& case_id) {
  const Dims& res = embedder.spec().resolution;
  auto fit = [&](const CtVolume& v) {
    CtVolume u = v.domain() == IntensityDomain::HU ? clip_and_normalize(v) : v;
    return u.dims() == res ? u : resample_to_grid(u, res);
  };
  try {
    const auto g = embedder.embed_volume(fit(generated));
    const auto t = embedder.embed_text(prompt);
    const auto r = embedder.embed_volume(fit(reference));
    return {cosine_similarity(g, t), cosine_similarity(g, r)};
  } catch (const std::exception& e) {
    throw Error("embedder " + embedder.id() + " failed on case '" + case_id + "': " + e.what());
  }
}

AlignmentResult phantom_alignment_score(const CtVolume& generated, const std::string& findings) {
  const auto expected = parse_quadrant(findings);
  if (!expected) throw ValidationError("findings text names no quadrant: \"" + findings + "\"");
  const auto values = generated.data();
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (values.empty() || *hi <= *lo) return {false, std::nullopt};
  const float threshold = percentile(values, 0.99);

  const Dims& g = generated.dims();
  std::vector<int> label(values.size(), -1);
  double best_mass = -1;
  double best_cx = 0, best_cy = 0;
  int next_label = 0;
  std::deque<std::size_t> queue;
  for (std::size_t start = 0; start < values.size(); ++start) {
    if (values[start] < threshold || label[start] >= 0) continue;
    label[start] = next_label;
    queue.push_back(start);
    double mass = 0, sx = 0, sy = 0, count = 0;
    while (!queue.empty()) {
      const std::size_t idx = queue.front();
      queue.pop_front();
      const std::size_t z = idx % g.z;
      const std::size_t y = (idx / g.z) % g.y;
      const std::size_t x = idx / (g.z * g.y);
      mass += values[idx];
      sx += static_cast<double>(x);
      sy += static_cast<double>(y);
      count += 1;
      const std::array<std::array<long, 3>, 6> steps{{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
      for (const auto& s : steps) {
        const long nx = static_cast<long>(x) + s[0], ny = static_cast<long>(y) + s[1], nz = static_cast<long>(z) + s[2];
        if (nx < 0 || ny < 0 || nz < 0 || nx >= static_cast<long>(g.x) || ny >= static_cast<long>(g.y) ||
            nz >= static_cast<long>(g.z)) {
          continue;
        }
        const std::size_t n = generated.index(static_cast<std::size_t>(nx), static_cast<std::size_t>(ny),
                                              static_cast<std::size_t>(nz));
        if (label[n] < 0 && values[n] >= threshold) {
          label[n] = next_label;
          queue.push_back(n);
        }
      }
    }
    if (mass > best_mass) {
      best_mass = mass;
      // Centroid in voxel-centre coordinates.
      best_cx = sx / count + 0.5;
      best_cy = sy / count + 0.5;
    }
    ++next_label;
  }
  const Quadrant detected = quadrant_of(best_cx, best_cy, g);
  return {detected == *expected, detected};
}

}  // namespace ctsynth
