#include <algorithm>
#include <cmath>

#include "sinemark/harness.hpp"

namespace sinemark::harness {

namespace {

std::string violation_message(const BoundReport& r) {
  return "periodogram bound violated at f = " + io::format17(r.frequency) + " (N = " +
         std::to_string(r.ensemble_size) + "): lower " + io::format17(r.lower) + ", P_D " +
         io::format17(r.p_d) + ", upper " + io::format17(r.upper);
}

spectrum::PairedSeries series(std::span<const double> p, std::span<const double> q) {
  return spectrum::PairedSeries({p.begin(), p.end()}, {q.begin(), q.end()});
}

}  // namespace

BoundViolation::BoundViolation(const BoundReport& r) : Error(violation_message(r)), report_(r) {}

BoundReport bound_terms(std::span<const double> p, std::span<const double> hat,
                        std::span<const double> tilde, std::span<const double> student,
                        std::size_t ensemble_size, double frequency) {
  const std::size_t len = p.size();
  if (ensemble_size == 0) throw InvalidInput("ensemble size must be positive");
  if (hat.size() != len || student.size() != len) throw InvalidInput("bound inputs are not aligned");
  if (ensemble_size > 1 && tilde.size() != len) {
    throw InvalidInput("ensembles with N > 1 need the other members' outputs");
  }
  if (len < spectrum::kMinFitPoints) throw InsufficientData(len, spectrum::kMinFitPoints, "bound check");

  const double n = static_cast<double>(ensemble_size);
  std::vector<double> bar(len);
  for (std::size_t l = 0; l < len; ++l) {
    bar[l] = ensemble_size == 1 ? hat[l] : (hat[l] + (n - 1.0) * tilde[l]) / n;
  }

  BoundReport r;
  r.frequency = frequency;
  r.ensemble_size = ensemble_size;
  r.samples = len;
  const auto d = series(p, student);
  r.chi0_D = spectrum::constant_fit_chi_sq(d);
  r.chif_D = spectrum::fit_sinusoid(d, frequency).chi_sq;
  r.p_d = std::max(0.0, 0.5 * (r.chi0_D - r.chif_D));
  r.chif_hat = spectrum::fit_sinusoid(series(p, hat), frequency).chi_sq;
  r.chif_tilde = ensemble_size == 1 ? 0.0 : spectrum::fit_sinusoid(series(p, tilde), frequency).chi_sq;
  r.tau1 = spectrum::fit_sinusoid(series(p, bar), frequency).chi_sq;
  const double w = (n - 1.0) / n;
  r.tau2 = r.chif_hat / (n * n) + w * w * r.chif_tilde;
  for (std::size_t l = 0; l < len; ++l) r.l_se += (bar[l] - student[l]) * (bar[l] - student[l]);

  r.lower = 0.5 * (r.chi0_D - r.tau2 - r.l_se);
  r.upper = 0.5 * (r.chi0_D - r.tau1 + r.l_se);

  const double root_l = std::sqrt(r.l_se);
  const double chi_hi = std::pow(root_l + std::sqrt(r.chif_hat) / n + w * std::sqrt(r.chif_tilde), 2);
  const double chi_lo = std::pow(std::max(0.0, std::sqrt(r.tau1) - root_l), 2);
  r.norm_lower = 0.5 * (r.chi0_D - chi_hi);
  r.norm_upper = 0.5 * (r.chi0_D - chi_lo);
  return r;
}

BoundReport verify_bound(const nnet::Model& watermarked,
                         std::span<const nnet::Model* const> others, const nnet::Model& student,
                         const Matrix& sample, double frequency) {
  if (!watermarked.watermark()) throw InvalidInput("the first ensemble member must be watermarked");
  const auto& key = watermarked.watermark()->key();
  if (student.input_dim() != watermarked.input_dim() ||
      student.class_count() != watermarked.class_count()) {
    throw InvalidInput("student and teacher disagree on input dimension or class count");
  }
  for (const auto* m : others) {
    if (m == nullptr || m->input_dim() != watermarked.input_dim() ||
        m->class_count() != watermarked.class_count()) {
      throw InvalidInput("ensemble members disagree on input dimension or class count");
    }
  }
  const auto istar = static_cast<Eigen::Index>(key.target_class());
  const Vector p = sample * key.projection();
  const Vector hat = watermarked.predict(sample).col(istar);
  Vector tilde = Vector::Zero(sample.rows());
  for (const auto* m : others) tilde += m->predict(sample).col(istar);
  if (!others.empty()) tilde /= static_cast<double>(others.size());
  const Vector q = student.predict(sample).col(istar);

  auto span_of = [](const Vector& v) { return std::span<const double>(v.data(), static_cast<std::size_t>(v.size())); };
  return bound_terms(span_of(p), span_of(hat), others.empty() ? std::span<const double>() : span_of(tilde),
                     span_of(q), others.size() + 1, frequency);
}

void enforce_bound(const BoundReport& report, double slack) {
  if (!report.holds(slack)) throw BoundViolation(report);
}

io::Json to_json(const BoundReport& r) {
  return {{"frequency", r.frequency}, {"N", r.ensemble_size},   {"samples", r.samples},
          {"chi0_D", r.chi0_D},       {"chif_D", r.chif_D},     {"chif_hat", r.chif_hat},
          {"chif_tilde", r.chif_tilde}, {"tau1", r.tau1},       {"tau2", r.tau2},
          {"l_se", r.l_se},           {"p_d", r.p_d},           {"lower", r.lower},
          {"upper", r.upper},         {"holds", r.holds()},     {"norm_lower", r.norm_lower},
          {"norm_upper", r.norm_upper}, {"norm_holds", r.norm_holds()}};
}

}  // namespace sinemark::harness
