#include "sinemark/watermark.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "sinemark/error.hpp"
#include "sinemark/io.hpp"
#include "sinemark/stats.hpp"

namespace sinemark::wm {

namespace {

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw InvalidInput(std::string("non-finite value in ") + what);
  }
}

void check_class_count(std::size_t m, const WatermarkKey& key) {
  if (m < 2) throw InvalidInput("watermarking needs at least two classes");
  if (key.target_class() >= m) {
    throw InvalidInput("target class " + std::to_string(key.target_class()) +
                       " out of range for " + std::to_string(m) + " classes");
  }
}

}  // namespace

WatermarkKey::WatermarkKey(std::size_t target_class, double frequency, Vector projection)
    : target_class_(target_class), frequency_(frequency), projection_(std::move(projection)) {
  if (projection_.size() == 0) throw InvalidInput("empty projection vector");
  if (!std::isfinite(frequency_)) throw InvalidInput("non-finite watermark frequency");
  require_finite({projection_.data(), static_cast<std::size_t>(projection_.size())}, "projection");
  const double norm = projection_.norm();
  if (std::abs(norm - 1.0) > kUnitNormTolerance) {
    throw InvalidInput("projection vector must have unit norm, got " + io::format17(norm));
  }
}

WatermarkKey WatermarkKey::random(std::size_t dim, double frequency, std::size_t target_class,
                                  std::uint64_t seed) {
  if (dim == 0) throw InvalidInput("projection dimension must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vector v(static_cast<Eigen::Index>(dim));
  do {
    for (auto& c : v) c = gauss(rng);
  } while (v.norm() == 0.0);
  v /= v.norm();
  return WatermarkKey(target_class, frequency, std::move(v));
}

WatermarkKey WatermarkKey::with_frequency(double frequency) const {
  return WatermarkKey(target_class_, frequency, projection_);
}

bool WatermarkKey::operator==(const WatermarkKey& other) const {
  return target_class_ == other.target_class_ && frequency_ == other.frequency_ &&
         projection_.size() == other.projection_.size() && projection_ == other.projection_;
}

WatermarkConfig::WatermarkConfig(WatermarkKey key, double epsilon, double epsilon_cap)
    : key_(std::move(key)), epsilon_(epsilon) {
  if (!std::isfinite(epsilon_) || epsilon_ < 0.0) {
    throw InvalidInput("watermark amplitude must be a finite value >= 0");
  }
  if (epsilon_ > epsilon_cap) {
    throw InvalidInput("watermark amplitude " + io::format17(epsilon_) + " exceeds cap " +
                       io::format17(epsilon_cap));
  }
}

ProbVector::ProbVector(std::vector<double> values) : values_(std::move(values)) {
  if (!satisfies_simplex(values_)) throw InvalidInput("vector is not a probability distribution");
}

bool ProbVector::satisfies_simplex(std::span<const double> values, double tol) {
  if (values.empty()) return false;
  double sum = 0.0;
  for (double v : values) {
    if (!std::isfinite(v) || v < -tol || v > 1.0 + tol) return false;
    sum += v;
  }
  return std::abs(sum - 1.0) <= tol;
}

std::size_t ProbVector::argmax() const {
  // Ties resolve to the lowest index.
  return static_cast<std::size_t>(std::max_element(values_.begin(), values_.end()) -
                                  values_.begin());
}

ProbVector softmax(std::span<const double> logits) {
  if (logits.size() < 2) throw InvalidInput("softmax needs at least two logits");
  require_finite(logits, "logits");
  const double zmax = *std::max_element(logits.begin(), logits.end());
  std::vector<double> q(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    q[i] = std::exp(logits[i] - zmax);
    sum += q[i];
  }
  for (auto& v : q) v /= sum;
  return ProbVector(std::move(q));
}

double project(std::span<const double> x, const WatermarkKey& key) {
  if (x.size() != key.dim()) {
    throw InvalidInput("input dimension " + std::to_string(x.size()) +
                       " does not match projection dimension " + std::to_string(key.dim()));
  }
  return key.projection().dot(as_vector(x));
}

double signal(std::span<const double> x, std::size_t cls, const WatermarkConfig& cfg) {
  const auto& key = cfg.key();
  const double a = std::cos(key.frequency() * project(x, key));
  // cos(t + pi) taken as the exact negation of cos(t).
  return cls == key.target_class() ? a : -a;
}

void apply_modified_softmax(std::span<double> probs, std::span<const double> x,
                            const WatermarkConfig& cfg) {
  const auto m = probs.size();
  check_class_count(m, cfg.key());
  const double eps = cfg.epsilon();
  if (eps == 0.0) return;
  const double a = signal(x, cfg.key().target_class(), cfg);
  const double denom = 1.0 + 2.0 * eps;
  const double target_add = eps * (1.0 + a);
  const double other_add = eps * (1.0 - a) / static_cast<double>(m - 1);
  const auto istar = cfg.key().target_class();
  for (std::size_t j = 0; j < m; ++j) {
    probs[j] = (probs[j] + (j == istar ? target_add : other_add)) / denom;
  }
}

ProbVector modified_softmax(const ProbVector& q, std::span<const double> x,
                            const WatermarkConfig& cfg) {
  check_class_count(q.size(), cfg.key());
  if (cfg.epsilon() == 0.0) return q;
  std::vector<double> out(q.values().begin(), q.values().end());
  apply_modified_softmax(out, x, cfg);
  return ProbVector(std::move(out));
}

namespace {

void check_target(std::span<const double> target, std::size_t m) {
  if (target.size() != m) throw InvalidInput("label vector length does not match class count");
  double sum = 0.0;
  for (double y : target) {
    if (!std::isfinite(y) || y < 0.0) throw InvalidInput("label entries must be finite and >= 0");
    sum += y;
  }
  if (sum == 0.0) throw InvalidInput("label vector is all zero");
}

}  // namespace

double watermarked_cross_entropy(const ProbVector& q, std::span<const double> x,
                                 std::span<const double> target, const WatermarkConfig& cfg) {
  check_target(target, q.size());
  const auto qhat = modified_softmax(q, x, cfg);
  double loss = 0.0;
  for (std::size_t j = 0; j < qhat.size(); ++j) {
    if (target[j] != 0.0) loss -= target[j] * std::log(std::max(qhat[j], kLogClamp));
  }
  return loss;
}

std::vector<double> grad_watermarked_cross_entropy(std::span<const double> logits,
                                                   std::span<const double> x,
                                                   std::span<const double> target,
                                                   const WatermarkConfig& cfg) {
  const auto q = softmax(logits);
  const auto m = q.size();
  check_target(target, m);
  std::vector<double> grad(m);
  if (cfg.epsilon() == 0.0) {
    // Plain softmax cross-entropy gradient, scaled by the label mass.
    double mass = 0.0;
    for (double y : target) mass += y;
    for (std::size_t k = 0; k < m; ++k) grad[k] = mass * q[k] - target[k];
    return grad;
  }
  const auto qhat = modified_softmax(q, x, cfg);
  const double denom = 1.0 + 2.0 * cfg.epsilon();
  std::vector<double> w(m, 0.0);
  double wsum = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    // The clamp is flat below 1e-12, so the clamped term has zero slope.
    if (target[j] != 0.0 && qhat[j] > kLogClamp) {
      w[j] = target[j] * q[j] / (denom * qhat[j]);
      wsum += w[j];
    }
  }
  for (std::size_t k = 0; k < m; ++k) grad[k] = -w[k] + q[k] * wsum;
  return grad;
}

double rescaled_frequency(const Matrix& features, const Vector& projection, double periods) {
  if (features.rows() < 2) throw InvalidInput("need at least two samples to rescale frequency");
  if (features.cols() != projection.size()) throw InvalidInput("projection dimension mismatch");
  if (!(periods > 0.0)) throw InvalidInput("period count must be positive");
  const Vector p = features * projection;
  std::span<const double> ps(p.data(), static_cast<std::size_t>(p.size()));
  const double spread = stats::quantile(ps, 0.975) - stats::quantile(ps, 0.025);
  if (!(spread > 0.0)) throw InvalidInput("projection values have zero spread");
  return 2.0 * std::numbers::pi * periods / spread;
}

std::string key_to_text(const WatermarkKey& key) {
  std::string out = "{\n  \"target_class\": " + std::to_string(key.target_class()) +
                    ",\n  \"frequency\": " + io::format17(key.frequency()) +
                    ",\n  \"projection\": [";
  for (Eigen::Index i = 0; i < key.projection().size(); ++i) {
    if (i) out += ", ";
    out += io::format17(key.projection()[i]);
  }
  out += "]\n}\n";
  return out;
}

WatermarkKey key_from_text(const std::string& text) {
  const auto j = io::parse_json(text, "watermark key");
  try {
    const auto& proj = j.at("projection");
    Vector v(static_cast<Eigen::Index>(proj.size()));
    for (std::size_t i = 0; i < proj.size(); ++i) v[static_cast<Eigen::Index>(i)] = proj[i].get<double>();
    return WatermarkKey(j.at("target_class").get<std::size_t>(), j.at("frequency").get<double>(),
                        std::move(v));
  } catch (const io::Json::exception& e) {
    throw ConfigError("watermark key", e.what());
  }
}

void save_key(const WatermarkKey& key, const std::filesystem::path& path) {
  io::write_text(path, key_to_text(key));
}

WatermarkKey load_key(const std::filesystem::path& path) {
  return key_from_text(io::read_text(path));
}

}  // namespace sinemark::wm
