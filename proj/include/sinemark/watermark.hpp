#pragma once

// Cosine watermark embedded in classifier probability outputs.
//
// A key (target class, angular frequency, unit projection v) defines a
// periodic signal a_i(x) = cos(f * v.x) for the target class and its
// negation for every other class. The modified softmax mixes that signal
// into q with amplitude epsilon while staying on the probability simplex.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sinemark/types.hpp"

namespace sinemark::wm {

inline constexpr double kUnitNormTolerance = 1e-9;
inline constexpr double kSimplexTolerance = 1e-6;
inline constexpr double kDefaultEpsilonCap = 0.5;
inline constexpr double kLogClamp = 1e-12;

class WatermarkKey {
 public:
  /// Throws InvalidInput unless |projection| = 1 within 1e-9, the frequency
  /// is finite and the projection is nonempty.
  WatermarkKey(std::size_t target_class, double frequency, Vector projection);

  /// Isotropic Gaussian draw normalized onto the unit sphere.
  static WatermarkKey random(std::size_t dim, double frequency, std::size_t target_class,
                             std::uint64_t seed);

  std::size_t target_class() const noexcept { return target_class_; }
  double frequency() const noexcept { return frequency_; }
  const Vector& projection() const noexcept { return projection_; }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(projection_.size()); }

  WatermarkKey with_frequency(double frequency) const;

  /// Exact (bitwise) equality of all three components.
  bool operator==(const WatermarkKey& other) const;

 private:
  std::size_t target_class_;
  double frequency_;
  Vector projection_;
};

class WatermarkConfig {
 public:
  WatermarkConfig(WatermarkKey key, double epsilon, double epsilon_cap = kDefaultEpsilonCap);

  const WatermarkKey& key() const noexcept { return key_; }
  double epsilon() const noexcept { return epsilon_; }

 private:
  WatermarkKey key_;
  double epsilon_;
};

/// A point on the probability simplex.
class ProbVector {
 public:
  /// Validates each entry in [0, 1] (within tolerance) and the sum.
  explicit ProbVector(std::vector<double> values);

  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<const double> values() const noexcept { return values_; }
  std::size_t argmax() const;

  static bool satisfies_simplex(std::span<const double> values, double tol = kSimplexTolerance);

 private:
  std::vector<double> values_;
};

ProbVector softmax(std::span<const double> logits);

/// p(x) = v.x
double project(std::span<const double> x, const WatermarkKey& key);

double signal(std::span<const double> x, std::size_t cls, const WatermarkConfig& cfg);

ProbVector modified_softmax(const ProbVector& q, std::span<const double> x,
                            const WatermarkConfig& cfg);

/// In-place modified softmax on a raw probability row; used by batched
/// inference. `probs.size()` is the class count.
void apply_modified_softmax(std::span<double> probs, std::span<const double> x,
                            const WatermarkConfig& cfg);

/// -sum_j y_j log(max(qhat_j, 1e-12)). `target` must be a nonzero
/// nonnegative label vector (normally one-hot).
double watermarked_cross_entropy(const ProbVector& q, std::span<const double> x,
                                 std::span<const double> target, const WatermarkConfig& cfg);

/// dL/dz for the loss above with q = softmax(z). qhat is affine in q with
/// z-independent offsets, so the chain rule factors through the softmax
/// Jacobian:  dL/dz_k = -w_k + q_k sum_j w_j,  w_j = y_j q_j / ((1+2e) qhat_j).
std::vector<double> grad_watermarked_cross_entropy(std::span<const double> logits,
                                                   std::span<const double> x,
                                                   std::span<const double> target,
                                                   const WatermarkConfig& cfg);

/// Angular frequency that fits `periods` full cycles across the central 95%
/// of the projection values of `features` onto `projection`.
double rescaled_frequency(const Matrix& features, const Vector& projection, double periods);

// Key files: a small JSON record {target_class, frequency, projection[]}
// with every float written at 17 significant digits.
std::string key_to_text(const WatermarkKey& key);
WatermarkKey key_from_text(const std::string& text);
void save_key(const WatermarkKey& key, const std::filesystem::path& path);
WatermarkKey load_key(const std::filesystem::path& path);

}  // namespace sinemark::wm
