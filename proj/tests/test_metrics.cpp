#include "doctest.h"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <random>

#include "ctsynth/errors.hpp"
#include "ctsynth/metrics.hpp"
#include "ctsynth/phantom.hpp"
#include "support.hpp"

using namespace ctsynth;

namespace {

GaussianStats gaussian(Eigen::VectorXd mean, Eigen::MatrixXd cov) { return {std::move(mean), std::move(cov), 100}; }

Eigen::MatrixXd random_spd(int d, std::mt19937& rng) {
  std::normal_distribution<double> n01;
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = n01(rng);
  return a * a.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

// Reference via a general (Schur-based) matrix square root of S1 * S2.
double frechet_oracle(const GaussianStats& a, const GaussianStats& b) {
  const Eigen::MatrixXd prod = a.covariance * b.covariance;
  const Eigen::MatrixXcd root = prod.cast<std::complex<double>>().sqrt();
  return (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() - 2.0 * root.trace().real();
}

std::vector<CtVolume> phantom_set(std::size_t n, std::uint64_t seed) {
  std::vector<CtVolume> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_phantom(corpus_phantom_spec(i, seed, {64, 64, 32})).volume);
  return out;
}

}  // namespace

TEST_CASE("fit_gaussian") {
  Eigen::MatrixXd f(2, 2);
  f << 0, 0, 2, 2;
  const GaussianStats g = fit_gaussian(f);
  CHECK(g.mean(0) == 1.0);
  CHECK(g.mean(1) == 1.0);
  CHECK(g.covariance(0, 0) == doctest::Approx(2.0));
  CHECK(g.covariance(0, 1) == doctest::Approx(2.0));
  CHECK(g.covariance(1, 1) == doctest::Approx(2.0));
  CHECK(g.sample_count == 2);

  Eigen::MatrixXd same = Eigen::MatrixXd::Constant(5, 3, 0.7);
  CHECK(fit_gaussian(same).covariance.cwiseAbs().maxCoeff() == 0.0);

  std::mt19937 rng(1);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd r(50, 6);
  for (int i = 0; i < r.size(); ++i) r.data()[i] = n01(rng);
  const GaussianStats gr = fit_gaussian(r);
  CHECK((gr.covariance - gr.covariance.transpose()).cwiseAbs().maxCoeff() <= 1e-12);

  CHECK_THROWS_AS(fit_gaussian(Eigen::MatrixXd(1, 3)), ValidationError);
  Eigen::MatrixXd bad = r;
  bad(3, 2) = std::nan("");
  CHECK_THROWS_AS(fit_gaussian(bad), NumericError);
}

TEST_CASE("frechet_distance closed forms") {
  const auto g1 = gaussian(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1));
  const auto g2 = gaussian(Eigen::VectorXd::Ones(1), Eigen::MatrixXd::Identity(1, 1));
  CHECK(std::abs(frechet_distance(g1, g2) - 1.0) <= 1e-8);
  CHECK(std::abs(frechet_distance(g1, g1)) <= 1e-6);

  const auto h1 = gaussian(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
  const auto h2 = gaussian(Eigen::VectorXd::Zero(2), 4.0 * Eigen::MatrixXd::Identity(2, 2));
  CHECK(std::abs(frechet_distance(h1, h2) - 2.0) <= 1e-8);

  // Univariate (mu1 - mu2)^2 + (sigma1 - sigma2)^2.
  const auto u1 = gaussian(Eigen::VectorXd::Constant(1, 0.3), Eigen::MatrixXd::Constant(1, 1, 2.25));
  const auto u2 = gaussian(Eigen::VectorXd::Constant(1, -1.2), Eigen::MatrixXd::Constant(1, 1, 0.16));
  CHECK(std::abs(frechet_distance(u1, u2) - (1.5 * 1.5 + 1.1 * 1.1)) <= 1e-8);

  CHECK_THROWS_AS(frechet_distance(g1, h1), ShapeError);
  auto nan = g1;
  nan.mean(0) = std::nan("");
  CHECK_THROWS_AS(frechet_distance(nan, g1), NumericError);
}

TEST_CASE("frechet_distance against a general matrix square root") {
  std::mt19937 rng(2);
  std::normal_distribution<double> n01;
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + trial % 7;
    Eigen::VectorXd m1(d), m2(d);
    for (int i = 0; i < d; ++i) {
      m1(i) = n01(rng);
      m2(i) = n01(rng);
    }
    const auto a = gaussian(m1, random_spd(d, rng));
    const auto b = gaussian(m2, random_spd(d, rng));
    const double ab = frechet_distance(a, b);
    CHECK(ab == doctest::Approx(frechet_oracle(a, b)).epsilon(1e-8));
    CHECK(std::abs(ab - frechet_distance(b, a)) <= 1e-8);
    CHECK(ab >= 0.0);
    CHECK(std::abs(frechet_distance(a, a)) <= 1e-6);
  }
  // Rank-deficient covariances still give a finite, non-negative value.
  Eigen::MatrixXd low = Eigen::MatrixXd::Zero(3, 3);
  low(0, 0) = 1.0;
  CHECK(frechet_distance(gaussian(Eigen::VectorXd::Zero(3), low), gaussian(Eigen::VectorXd::Zero(3), low)) >= 0.0);
}

TEST_CASE("2.5D features") {
  SeededConvExtractor ex;
  CHECK(ex.spec().feature_dim == 64);
  const CtVolume v = generate_phantom(corpus_phantom_spec(0, 0, {64, 64, 32})).volume;
  const Eigen::MatrixXd xy = extract_features_2p5d(v, Plane::XY, ex);
  CHECK(xy.rows() == 32);
  CHECK(xy.cols() == 64);
  CHECK(extract_features_2p5d(v, Plane::YZ, ex).rows() == 64);
  CHECK(xy == extract_features_2p5d(CtVolume(v), Plane::XY, ex));
  SeededConvExtractor same_seed;
  CHECK(xy == extract_features_2p5d(v, Plane::XY, same_seed));
  FeatureExtractorSpec other;
  other.seed = 1;
  SeededConvExtractor other_ex(other);
  CHECK_FALSE(xy == extract_features_2p5d(v, Plane::XY, other_ex));

  const CtVolume flat({16, 16, 8}, {1, 1, 1}, IntensityDomain::UNIT, 0.4F);
  const Eigen::MatrixXd f = extract_features_2p5d(flat, Plane::ZX, ex);
  for (Eigen::Index r = 1; r < f.rows(); ++r) CHECK(f.row(r) == f.row(0));

  ExternalExtractorAdapter wrong("wrong", ex.spec(), [](const torch::Tensor& s) {
    return torch::zeros({s.size(0), 10});
  });
  CHECK_THROWS_AS(extract_features_2p5d(v, Plane::XY, wrong), ContractError);
  ExternalExtractorAdapter ok("ok", ex.spec(), [](const torch::Tensor& s) { return torch::ones({s.size(0), 64}); });
  CHECK(extract_features_2p5d(v, Plane::XY, ok).rows() == 32);
}

TEST_CASE("fid_score properties") {
  SeededConvExtractor ex;
  const auto set = phantom_set(8, 0);
  const FidResult self = fid_score(set, set, ex);
  CHECK(self.fid_xy <= 1e-4);
  CHECK(self.fid_yz <= 1e-4);
  CHECK(self.fid_zx <= 1e-4);
  CHECK(self.fid_mean <= 1e-4);

  const auto other = phantom_set(8, 5);
  const FidResult base = fid_score(set, other, ex);
  CHECK(base.fid_mean > self.fid_mean);
  CHECK(base.fid_mean == doctest::Approx((base.fid_xy + base.fid_yz + base.fid_zx) / 3.0));

  auto shuffled = set;
  std::reverse(shuffled.begin(), shuffled.end());
  std::swap(shuffled[1], shuffled[4]);
  auto other_shuffled = other;
  std::rotate(other_shuffled.begin(), other_shuffled.begin() + 3, other_shuffled.end());
  const FidResult perm = fid_score(shuffled, other_shuffled, ex);
  CHECK(perm.fid_mean == base.fid_mean);
  CHECK(perm.fid_xy == base.fid_xy);

  auto doubled = set;
  doubled.insert(doubled.end(), set.begin(), set.end());
  auto other_doubled = other;
  other_doubled.insert(other_doubled.end(), other.begin(), other.end());
  CHECK(std::abs(fid_score(doubled, other_doubled, ex).fid_mean - base.fid_mean) < 1e-3 * base.fid_mean + 1e-3);

  SUBCASE("too few slices names the plane") {
    const std::vector<CtVolume> one{CtVolume({64, 64, 32}, {1, 1, 1}, IntensityDomain::UNIT, 0.1F)};
    try {
      fid_score(one, one, ex);
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("plane xy") != std::string::npos);
    }
    CHECK_THROWS_AS(fid_score(std::vector<CtVolume>{}, set, ex), ValidationError);
  }
  SUBCASE("mixed shapes resample to the modal shape") {
    std::vector<CtVolume> mixed = set;
    mixed.push_back(resample_to_grid(set[0], {32, 32, 16}));
    const auto prepared = prepare_for_fid(mixed);
    for (const auto& v : prepared) CHECK(v.dims() == Dims{64, 64, 32});
  }
}

TEST_CASE("fid_from_features on synthetic Gaussians") {
  const int d = 8, n = 10000;
  std::mt19937 rng(3);
  std::normal_distribution<double> n01;
  Eigen::VectorXd mu1(d), mu2(d), s1(d), s2(d);
  for (int i = 0; i < d; ++i) {
    mu1(i) = 0.0;
    mu2(i) = 0.5 * (i % 3);
    s1(i) = 1.0 + 0.1 * i;
    s2(i) = 0.6 + 0.2 * (i % 4);
  }
  auto draw = [&](const Eigen::VectorXd& mu, const Eigen::VectorXd& s) {
    Eigen::MatrixXd m(n, d);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < d; ++c) m(r, c) = mu(c) + s(c) * n01(rng);
    return m;
  };
  PlaneFeatures real{draw(mu1, s1), draw(mu1, s1), draw(mu1, s1)};
  PlaneFeatures synth{draw(mu2, s2), draw(mu2, s2), draw(mu2, s2)};
  // Diagonal covariances: sum of squared mean gaps plus squared std gaps.
  const double analytic = (mu1 - mu2).squaredNorm() + (s1 - s2).squaredNorm();
  const FidResult r = fid_from_features(real, synth, d);
  CHECK(std::abs(r.fid_mean - analytic) <= 0.05 * analytic);
  CHECK_THROWS_AS(fid_from_features(real, synth, n + 1), ValidationError);
}

TEST_CASE("cosine_similarity") {
  const std::vector<double> a{1, 2, 3}, b{-3, 0, 1}, z{0, 0, 0};
  CHECK(cosine_similarity(a, a) == doctest::Approx(1.0));
  CHECK(cosine_similarity(a, b) == doctest::Approx(0.0));
  const std::vector<double> neg{-1, -2, -3};
  CHECK(cosine_similarity(a, neg) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(cosine_similarity(a, z), ContractError);
  CHECK_THROWS_AS(cosine_similarity(a, std::vector<double>{1, 2}), ShapeError);
  const std::vector<double> c{0.3, -1.2, 2.0};
  const std::vector<double> c_scaled{0.3 * 7.5, -1.2 * 7.5, 2.0 * 7.5};
  CHECK(std::abs(cosine_similarity(a, c) - cosine_similarity(a, c_scaled)) <= 1e-9);
}

TEST_CASE("clip scores with the layout embedder") {
  LayoutEmbedder emb;
  CHECK(emb.spec().embed_dim == 5);
  const Phantom p = generate_phantom(corpus_phantom_spec(2, 0, {64, 64, 32}));
  CHECK(emb.embed_volume(p.volume).norm() == doctest::Approx(1.0));
  CHECK(emb.embed_text(p.report).norm() == doctest::Approx(1.0));
  const ClipScores self = clip_scores(p.volume, p.report, p.volume, emb, "p2");
  CHECK(self.i2i == doctest::Approx(1.0));

  double matched = 0, mismatched = 0;
  const std::size_t n = 50;
  std::vector<Phantom> cases;
  for (std::size_t i = 0; i < n; ++i) cases.push_back(generate_phantom(corpus_phantom_spec(i, 17, {64, 64, 32})));
  for (std::size_t i = 0; i < n; ++i) {
    const ClipScores m = clip_scores(cases[i].volume, cases[i].report, cases[i].volume, emb);
    const ClipScores x = clip_scores(cases[i].volume, cases[(i + 1) % n].report, cases[i].volume, emb);
    for (double s : {m.t2i, m.i2i, x.t2i}) {
      CHECK(s >= -1.0);
      CHECK(s <= 1.0);
    }
    matched += m.t2i;
    mismatched += x.t2i;
  }
  CHECK(matched / n >= mismatched / n);

  ExternalEmbedderAdapter failing(
      "broken", emb.spec(), [](const CtVolume&) -> Eigen::VectorXd { throw std::runtime_error("no weights"); },
      [](const RadiologyReport&) { return Eigen::VectorXd::Ones(5); });
  try {
    clip_scores(p.volume, p.report, p.volume, failing, "case_17");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("case_17") != std::string::npos);
  }
}

TEST_CASE("phantom_alignment_score") {
  for (std::size_t i = 0; i < 8; ++i) {
    const Phantom p = generate_phantom(corpus_phantom_spec(i, 3, {64, 64, 32}));
    const AlignmentResult r = phantom_alignment_score(p.volume, p.report.findings);
    CHECK(r.hit);
    REQUIRE(r.detected_quadrant.has_value());
    CHECK(*r.detected_quadrant == corpus_phantom_spec(i, 3, {64, 64, 32}).center_quadrant);
  }
  const CtVolume zeros({64, 64, 32}, {1, 1, 1}, IntensityDomain::UNIT, 0.0F);
  const AlignmentResult none = phantom_alignment_score(zeros, "sphere in the upper-left region");
  CHECK_FALSE(none.hit);
  CHECK_FALSE(none.detected_quadrant.has_value());
  CHECK_THROWS_AS(phantom_alignment_score(zeros, "no location"), ValidationError);

  // Random volume/text pairs land at the 1-in-4 chance rate.
  std::mt19937 rng(11);
  std::vector<Phantom> corpus;
  for (std::size_t i = 0; i < 40; ++i) corpus.push_back(generate_phantom(corpus_phantom_spec(i, 5, {64, 64, 32})));
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  int hits = 0;
  const int trials = 2000;
  for (int t = 0; t < trials; ++t) {
    hits += phantom_alignment_score(corpus[pick(rng)].volume, corpus[pick(rng)].report.findings).hit ? 1 : 0;
  }
  CHECK(std::abs(hits / static_cast<double>(trials) - 0.25) <= 0.04);
}
