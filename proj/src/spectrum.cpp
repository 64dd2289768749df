#include "sinemark/spectrum.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "sinemark/error.hpp"
#include "sinemark/stats.hpp"

namespace sinemark::spectrum {

PairedSeries::PairedSeries(std::vector<double> p, std::vector<double> q)
    : p_(std::move(p)), q_(std::move(q)) {
  if (p_.size() != q_.size()) throw InvalidInput("paired series halves differ in length");
}

void PairedSeries::add(double p, double q) {
  p_.push_back(p);
  q_.push_back(q);
}

double SinusoidFit::operator()(double p) const {
  return alpha + beta * std::cos(frequency * p + gamma);
}

namespace {

void require_fit_size(const PairedSeries& series) {
  if (series.size() < kMinFitPoints) {
    throw InsufficientData(series.size(), kMinFitPoints, "sinusoid fit");
  }
}

}  // namespace

SinusoidFit fit_sinusoid(const PairedSeries& series, double frequency) {
  require_fit_size(series);
  if (!(frequency > 0.0) || !std::isfinite(frequency)) {
    throw InvalidInput("fit frequency must be positive and finite");
  }
  const auto n = static_cast<Eigen::Index>(series.size());
  Eigen::MatrixXd design(n, 3);
  Eigen::VectorXd rhs(n);
  for (Eigen::Index l = 0; l < n; ++l) {
    const double phase = frequency * series.p()[static_cast<std::size_t>(l)];
    design(l, 0) = 1.0;
    design(l, 1) = std::cos(phase);
    design(l, 2) = std::sin(phase);
    rhs[l] = series.q()[static_cast<std::size_t>(l)];
  }
  const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(design);
  const Eigen::Vector3d c = cod.solve(rhs);
  const Eigen::VectorXd resid = rhs - design * c;

  SinusoidFit fit;
  fit.frequency = frequency;
  fit.alpha = c[0];
  // alpha + b cos(gamma) cos(fp) - b sin(gamma) sin(fp)
  fit.beta = std::hypot(c[1], c[2]);
  double gamma = fit.beta > 0.0 ? std::atan2(-c[2], c[1]) : 0.0;
  if (gamma < 0.0) gamma += 2.0 * std::numbers::pi;
  if (gamma >= 2.0 * std::numbers::pi) gamma = 0.0;
  fit.gamma = gamma;
  fit.chi_sq = resid.squaredNorm();
  return fit;
}

double constant_fit_chi_sq(const PairedSeries& series) {
  if (series.empty()) throw InsufficientData(0, 1, "constant fit");
  const double mean = stats::mean(series.q());
  double s = 0.0;
  for (double q : series.q()) s += (q - mean) * (q - mean);
  return s;
}

std::size_t Periodogram::argmax() const {
  if (powers.empty()) throw InvalidInput("empty periodogram");
  return static_cast<std::size_t>(std::max_element(powers.begin(), powers.end()) - powers.begin());
}

std::vector<double> even_grid(double max_frequency, std::size_t size) {
  if (!(max_frequency > 0.0) || !std::isfinite(max_frequency)) {
    throw InvalidInput("maximum frequency must be positive and finite");
  }
  if (size == 0) throw InvalidInput("frequency grid must be nonempty");
  std::vector<double> grid(size);
  for (std::size_t k = 0; k < size; ++k) {
    grid[k] = static_cast<double>(k + 1) * max_frequency / static_cast<double>(size);
  }
  return grid;
}

Periodogram periodogram(const PairedSeries& series, std::span<const double> grid) {
  require_fit_size(series);
  if (grid.empty()) throw InvalidInput("frequency grid must be nonempty");
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (!(grid[k] > 0.0) || !std::isfinite(grid[k])) {
      throw InvalidInput("grid frequencies must be positive and finite");
    }
    if (k > 0 && !(grid[k] > grid[k - 1])) {
      throw InvalidInput("grid frequencies must be strictly increasing");
    }
  }
  Periodogram pg;
  pg.chi0 = constant_fit_chi_sq(series);
  pg.frequencies.assign(grid.begin(), grid.end());
  pg.powers.resize(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const double chif = fit_sinusoid(series, grid[k]).chi_sq;
    pg.powers[k] = std::max(0.0, 0.5 * (pg.chi0 - chif));
  }
  return pg;
}

double filter_threshold(std::span<const double> values, const FilterPolicy& policy) {
  if (values.empty()) throw InvalidInput("filter threshold of an empty sample");
  switch (policy.kind) {
    case FilterKind::median:
      return policy.scale * stats::quantile(values, 0.5);
    case FilterKind::first_quartile:
      return policy.scale * stats::quantile(values, 0.25);
    case FilterKind::absolute:
      return policy.absolute;
  }
  return policy.absolute;
}

SnrReport snr_from_periodogram(const Periodogram& pg, double center, double width) {
  if (pg.powers.size() != pg.frequencies.size() || pg.powers.empty()) {
    throw InvalidInput("malformed periodogram");
  }
  if (!(width > 0.0)) throw InvalidInput("window width must be positive");
  double in_sum = 0.0;
  double out_sum = 0.0;
  std::size_t in_n = 0;
  std::size_t out_n = 0;
  for (std::size_t k = 0; k < pg.powers.size(); ++k) {
    if (std::abs(pg.frequencies[k] - center) <= 0.5 * width) {
      in_sum += pg.powers[k];
      ++in_n;
    } else {
      out_sum += pg.powers[k];
      ++out_n;
    }
  }
  if (in_n == 0) throw InvalidInput("signal window contains no grid frequencies");
  SnrReport r;
  r.window_center = center;
  r.window_width = width;
  r.max_frequency = pg.frequencies.back();
  r.p_signal = in_sum / static_cast<double>(in_n);
  r.p_noise = out_n ? out_sum / static_cast<double>(out_n) : 0.0;
  if (r.p_noise > 0.0) {
    r.p_snr = r.p_signal / r.p_noise;
  } else if (r.p_signal > 0.0) {
    r.p_snr = std::numeric_limits<double>::infinity();
    r.p_snr_infinite = true;
  } else {
    r.p_snr = 0.0;  // flat spectrum: no signal anywhere
  }
  return r;
}

Extraction extract_signal(const Matrix& outputs, const Matrix& inputs, const wm::WatermarkKey& key,
                          const ExtractionParams& params, std::span<const int> labels) {
  if (outputs.rows() != inputs.rows()) {
    throw InvalidInput("outputs and inputs are not aligned (" + std::to_string(outputs.rows()) +
                       " vs " + std::to_string(inputs.rows()) + " rows)");
  }
  if (static_cast<std::size_t>(inputs.cols()) != key.dim()) {
    throw InvalidInput("input dimension " + std::to_string(inputs.cols()) +
                       " does not match key dimension " + std::to_string(key.dim()));
  }
  if (key.target_class() >= static_cast<std::size_t>(outputs.cols())) {
    throw InvalidInput("key target class exceeds the model's class count");
  }
  if (!labels.empty() && labels.size() != static_cast<std::size_t>(inputs.rows())) {
    throw InvalidInput("label count does not match input count");
  }
  if (params.grid_size < kMinGridSize) {
    throw InvalidInput("grid size must be at least " + std::to_string(kMinGridSize));
  }
  if (!(key.frequency() > 0.0)) throw InvalidInput("key frequency must be positive");

  const auto istar = static_cast<Eigen::Index>(key.target_class());
  const Vector proj = inputs * key.projection();

  std::vector<double> reference;
  const bool by_class = params.filter.reference == FilterReference::target_class_inputs &&
                        !labels.empty();
  for (Eigen::Index l = 0; l < outputs.rows(); ++l) {
    if (!by_class || labels[static_cast<std::size_t>(l)] == static_cast<int>(istar)) {
      reference.push_back(outputs(l, istar));
    }
  }
  if (reference.empty()) throw InsufficientData(0, 1, "filter reference (no target-class inputs)");
  const double threshold = filter_threshold(reference, params.filter);

  Extraction ex;
  for (Eigen::Index l = 0; l < outputs.rows(); ++l) {
    const double q = outputs(l, istar);
    const bool keep = params.filter.side == FilterSide::above ? q > threshold : q < threshold;
    if (keep) ex.series.add(proj[l], q);
  }
  if (ex.series.size() < kMinFitPoints) {
    throw InsufficientData(ex.series.size(), kMinFitPoints, "signal extraction after filtering");
  }

  const double fmax = params.max_frequency.value_or(params.max_frequency_multiple * key.frequency());
  const auto grid = even_grid(fmax, params.grid_size);
  const double width = params.window_width.value_or(
      static_cast<double>(params.window_bins) * fmax / static_cast<double>(params.grid_size));
  ex.spectrum = periodogram(ex.series, grid);
  ex.report = snr_from_periodogram(ex.spectrum, key.frequency(), width);
  ex.report.survivors = ex.series.size();
  ex.report.threshold = threshold;
  return ex;
}

std::string periodogram_csv(const Periodogram& pg) {
  std::string out = "frequency,power\n";
  for (std::size_t k = 0; k < pg.frequencies.size(); ++k) {
    out += io::format17(pg.frequencies[k]) + "," + io::format17(pg.powers[k]) + "\n";
  }
  return out;
}

io::Json to_json(const SnrReport& r) {
  io::Json j;
  j["p_signal"] = r.p_signal;
  j["p_noise"] = r.p_noise;
  j["p_snr"] = r.p_snr_infinite ? io::Json(nullptr) : io::Json(r.p_snr);
  j["p_snr_infinite"] = r.p_snr_infinite;
  j["f_w"] = r.window_center;
  j["delta"] = r.window_width;
  j["F"] = r.max_frequency;
  j["survivors"] = r.survivors;
  j["q_threshold"] = r.threshold;
  return j;
}

namespace {

const char* kind_name(FilterKind k) {
  switch (k) {
    case FilterKind::median: return "median";
    case FilterKind::first_quartile: return "first_quartile";
    case FilterKind::absolute: return "absolute";
  }
  return "?";
}

}  // namespace

io::Json to_json(const FilterPolicy& p) {
  return {{"policy", kind_name(p.kind)},
          {"absolute", p.absolute},
          {"scale", p.scale},
          {"side", p.side == FilterSide::above ? "above" : "below"},
          {"reference", p.reference == FilterReference::all_outputs ? "all" : "target_class"}};
}

FilterPolicy filter_policy_from_json(const io::Json& j) {
  FilterPolicy p;
  const auto kind = j.value("policy", std::string("first_quartile"));
  if (kind == "median") p.kind = FilterKind::median;
  else if (kind == "first_quartile") p.kind = FilterKind::first_quartile;
  else if (kind == "absolute") p.kind = FilterKind::absolute;
  else throw ConfigError("filter.policy", "unknown policy '" + kind + "'");
  p.absolute = j.value("absolute", 0.0);
  p.scale = j.value("scale", 1.0);
  const auto side = j.value("side", std::string("above"));
  if (side == "above") p.side = FilterSide::above;
  else if (side == "below") p.side = FilterSide::below;
  else throw ConfigError("filter.side", "expected 'above' or 'below'");
  const auto ref = j.value("reference", std::string("target_class"));
  if (ref == "target_class") p.reference = FilterReference::target_class_inputs;
  else if (ref == "all") p.reference = FilterReference::all_outputs;
  else throw ConfigError("filter.reference", "expected 'target_class' or 'all'");
  return p;
}

io::Json to_json(const ExtractionParams& p) {
  io::Json j{{"filter", to_json(p.filter)},
             {"grid_size", p.grid_size},
             {"max_frequency_multiple", p.max_frequency_multiple},
             {"window_bins", p.window_bins}};
  if (p.max_frequency) j["max_frequency"] = *p.max_frequency;
  if (p.window_width) j["window_width"] = *p.window_width;
  return j;
}

ExtractionParams extraction_params_from_json(const io::Json& j) {
  ExtractionParams p;
  try {
    if (j.contains("filter")) p.filter = filter_policy_from_json(j.at("filter"));
    p.grid_size = j.value("grid_size", p.grid_size);
    p.max_frequency_multiple = j.value("max_frequency_multiple", p.max_frequency_multiple);
    p.window_bins = j.value("window_bins", p.window_bins);
    if (j.contains("max_frequency")) p.max_frequency = j.at("max_frequency").get<double>();
    if (j.contains("window_width")) p.window_width = j.at("window_width").get<double>();
  } catch (const io::Json::exception& e) {
    throw ConfigError("extraction", e.what());
  }
  return p;
}

}  // namespace sinemark::spectrum
