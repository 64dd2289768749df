#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "sinemark/error.hpp"
#include "sinemark/watermark.hpp"

using namespace sinemark;

namespace {

wm::WatermarkKey axis_key(std::size_t dim, double f, std::size_t target) {
  Vector v = Vector::Zero(static_cast<Eigen::Index>(dim));
  v[0] = 1.0;
  return wm::WatermarkKey(target, f, v);
}

// Straight transcription of the perturbation, kept separate from the library.
std::vector<double> reference_qhat(const std::vector<double>& q, double p, double f, double eps,
                                   std::size_t target) {
  const double a = std::cos(f * p);
  const double m = static_cast<double>(q.size());
  std::vector<double> out(q.size());
  for (std::size_t j = 0; j < q.size(); ++j) {
    out[j] = j == target ? (q[j] + eps * (1.0 + a)) / (1.0 + 2.0 * eps)
                         : (q[j] + eps * (1.0 - a) / (m - 1.0)) / (1.0 + 2.0 * eps);
  }
  return out;
}

}  // namespace

TEST_CASE("softmax is shift invariant and stable for large logits") {
  const std::vector<double> z{1000.0, 1001.0, 999.0};
  const std::vector<double> z0{1.0, 2.0, 0.0};
  const auto a = wm::softmax(z);
  const auto b = wm::softmax(z0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));
  const double e = std::exp(1.0);
  CHECK(b[1] == doctest::Approx(e * e / (1.0 + e + e * e)).epsilon(1e-14));
  CHECK(a.argmax() == 1);
}

TEST_CASE("modified softmax matches a hand transcription") {
  const auto key = axis_key(3, 7.0, 1);
  const wm::WatermarkConfig cfg(key, 0.1);
  const std::vector<double> q{0.5, 0.3, 0.2};
  const std::vector<double> x{0.4, 0.9, 0.1};
  const auto got = wm::modified_softmax(wm::ProbVector(q), x, cfg);
  const auto want = reference_qhat(q, 0.4, 7.0, 0.1, 1);
  for (std::size_t j = 0; j < 3; ++j) CHECK(got[j] == doctest::Approx(want[j]).epsilon(1e-15));
  CHECK(wm::signal(x, 1, cfg) == doctest::Approx(std::cos(2.8)));
  CHECK(wm::signal(x, 0, cfg) == doctest::Approx(-std::cos(2.8)));
}

TEST_CASE("modified softmax stays on the simplex at the extremes") {
  const wm::WatermarkConfig cfg(axis_key(2, std::numbers::pi, 0), 0.5);
  for (double p : {0.0, 1.0}) {
    for (const auto& q : {std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0}}) {
      const auto out = wm::modified_softmax(wm::ProbVector(q), std::vector<double>{p, 0.0}, cfg);
      CHECK(wm::ProbVector::satisfies_simplex(out.values(), 1e-12));
    }
  }
}

TEST_CASE("epsilon zero is the identity") {
  const wm::WatermarkConfig cfg(axis_key(2, 3.0, 0), 0.0);
  const std::vector<double> q{0.25, 0.75};
  const auto out = wm::modified_softmax(wm::ProbVector(q), std::vector<double>{0.3, 0.2}, cfg);
  CHECK(out[0] == 0.25);
  CHECK(out[1] == 0.75);
}

TEST_CASE("watermarked cross-entropy gradient matches central differences") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 5;
    const auto key = wm::WatermarkKey::random(4, 20.0, trial % m, 100 + trial);
    const wm::WatermarkConfig cfg(key, 0.2 * u(rng));
    std::vector<double> z(m), x(4), y(m, 0.0);
    for (auto& v : z) v = g(rng);
    for (auto& v : x) v = u(rng);
    y[static_cast<std::size_t>(trial) % m] = 1.0;
    const auto grad = wm::grad_watermarked_cross_entropy(z, x, y, cfg);
    for (std::size_t k = 0; k < m; ++k) {
      const double h = 1e-6;
      auto zp = z, zm = z;
      zp[k] += h;
      zm[k] -= h;
      const double fd = (wm::watermarked_cross_entropy(wm::softmax(zp), x, y, cfg) -
                         wm::watermarked_cross_entropy(wm::softmax(zm), x, y, cfg)) /
                        (2.0 * h);
      CHECK(grad[k] == doctest::Approx(fd).epsilon(1e-6).scale(1.0));
    }
  }
}

TEST_CASE("keys validate and round-trip exactly") {
  CHECK_THROWS_AS(wm::WatermarkKey(0, 1.0, Vector::Ones(3)), InvalidInput);
  CHECK_THROWS_AS(wm::WatermarkKey(0, NAN, axis_key(3, 1.0, 0).projection()), InvalidInput);
  CHECK_THROWS_AS(wm::WatermarkConfig(axis_key(3, 1.0, 0), 0.6), InvalidInput);
  CHECK_THROWS_AS(wm::WatermarkConfig(axis_key(3, 1.0, 0), -0.1), InvalidInput);

  const auto key = wm::WatermarkKey::random(32, 30.123456789, 4, 7);
  CHECK(key.projection().norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(wm::key_from_text(wm::key_to_text(key)) == key);
  CHECK(wm::WatermarkKey::random(32, 30.0, 4, 7) == wm::WatermarkKey::random(32, 30.0, 4, 7));
  CHECK_FALSE(wm::WatermarkKey::random(32, 30.0, 4, 7) == wm::WatermarkKey::random(32, 30.0, 4, 8));
  CHECK_THROWS(wm::key_from_text("{\"target_class\": 0}"));
}

TEST_CASE("target class outside the output range is rejected") {
  const wm::WatermarkConfig cfg(axis_key(2, 1.0, 5), 0.1);
  CHECK_THROWS_AS(wm::modified_softmax(wm::ProbVector({0.5, 0.5}), std::vector<double>{0.1, 0.1}, cfg),
                  InvalidInput);
}

TEST_CASE("rescaled frequency fits the requested periods over the central spread") {
  // Projection values 0, 1, ..., 200 along the first axis.
  Matrix x = Matrix::Zero(201, 2);
  for (int i = 0; i <= 200; ++i) x(i, 0) = i;
  Vector v(2);
  v << 1.0, 0.0;
  // Quantiles at 2.5% and 97.5% of 0..200 are 5 and 195.
  CHECK(wm::rescaled_frequency(x, v, 8.0) == doctest::Approx(2.0 * std::numbers::pi * 8.0 / 190.0));
  CHECK_THROWS_AS(wm::rescaled_frequency(Matrix::Zero(5, 2), v, 8.0), InvalidInput);
}
