#pragma once

// Least-squares sinusoid fitting, the unnormalized (floating-mean)
// Lomb-Scargle periodogram P(f) = (chi2_0 - chi2_f) / 2, and watermark
// signal extraction scored by the windowed signal-to-noise ratio.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sinemark/io.hpp"
#include "sinemark/types.hpp"
#include "sinemark/watermark.hpp"

namespace sinemark::spectrum {

inline constexpr std::size_t kMinFitPoints = 3;
inline constexpr std::size_t kMinGridSize = 16;

/// (projection value, target-class output) pairs. Order carries no meaning.
class PairedSeries {
 public:
  PairedSeries() = default;
  PairedSeries(std::vector<double> p, std::vector<double> q);

  void add(double p, double q);
  std::size_t size() const noexcept { return p_.size(); }
  bool empty() const noexcept { return p_.empty(); }
  std::span<const double> p() const noexcept { return p_; }
  std::span<const double> q() const noexcept { return q_; }

 private:
  std::vector<double> p_;
  std::vector<double> q_;
};

/// alpha + beta cos(f p + gamma), beta >= 0, gamma in [0, 2 pi).
struct SinusoidFit {
  double alpha = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
  double chi_sq = 0.0;
  double frequency = 0.0;

  double operator()(double p) const;
};

/// Rank-tolerant least squares in the basis {1, cos(f p), sin(f p)};
/// degenerate designs yield the minimum-norm solution.
SinusoidFit fit_sinusoid(const PairedSeries& series, double frequency);

/// Residual of the best constant fit, sum (q - mean)^2.
double constant_fit_chi_sq(const PairedSeries& series);

struct Periodogram {
  std::vector<double> frequencies;
  std::vector<double> powers;
  double chi0 = 0.0;

  std::size_t argmax() const;
};

/// k F / G for k = 1..G: an even grid over (0, F].
std::vector<double> even_grid(double max_frequency, std::size_t size);

/// Powers below zero from round-off are clipped to 0.
Periodogram periodogram(const PairedSeries& series, std::span<const double> grid);

enum class FilterKind { median, first_quartile, absolute };
/// `below` keeps outputs under the threshold (the q_max variant).
enum class FilterSide { above, below };
/// Which outputs the quantile is taken over: all queried outputs, or only
/// those of queries whose ground-truth class is the key's target class.
enum class FilterReference { all_outputs, target_class_inputs };

struct FilterPolicy {
  FilterKind kind = FilterKind::first_quartile;
  double absolute = 0.0;
  double scale = 1.0;
  FilterSide side = FilterSide::above;
  FilterReference reference = FilterReference::target_class_inputs;

  static FilterPolicy single_teacher() { return {}; }
  static FilterPolicy ensemble() {
    FilterPolicy p;
    p.kind = FilterKind::median;
    return p;
  }
};

double filter_threshold(std::span<const double> values, const FilterPolicy& policy);

struct ExtractionParams {
  FilterPolicy filter;
  std::size_t grid_size = 512;
  /// F = max_frequency_multiple * f_w unless `max_frequency` is set.
  double max_frequency_multiple = 2.0;
  std::optional<double> max_frequency;
  /// delta = window_bins grid spacings unless `window_width` is set.
  std::size_t window_bins = 5;
  std::optional<double> window_width;
};

struct SnrReport {
  double p_signal = 0.0;
  double p_noise = 0.0;
  double p_snr = 0.0;
  bool p_snr_infinite = false;
  double window_center = 0.0;
  double window_width = 0.0;
  double max_frequency = 0.0;
  std::size_t survivors = 0;
  double threshold = 0.0;
};

/// Averages powers inside [f_w - delta/2, f_w + delta/2] and outside it.
SnrReport snr_from_periodogram(const Periodogram& pg, double center, double width);

struct Extraction {
  SnrReport report;
  Periodogram spectrum;
  PairedSeries series;
};

/// Scores one model's outputs (rows aligned with `inputs`) against a key.
/// `labels`, when nonempty, are the ground-truth classes of the inputs and
/// feed the target-class filter reference.
Extraction extract_signal(const Matrix& outputs, const Matrix& inputs, const wm::WatermarkKey& key,
                          const ExtractionParams& params, std::span<const int> labels = {});

std::string periodogram_csv(const Periodogram& pg);
io::Json to_json(const SnrReport& report);
io::Json to_json(const FilterPolicy& policy);
FilterPolicy filter_policy_from_json(const io::Json& j);
io::Json to_json(const ExtractionParams& params);
ExtractionParams extraction_params_from_json(const io::Json& j);

}  // namespace sinemark::spectrum
