#include "sinemark/harness.hpp"
#include "sinemark/stats.hpp"

namespace sinemark::harness {

std::string SweepTable::csv() const {
  std::string out;
  for (std::size_t c = 0; c < columns.size(); ++c) out += (c ? "," : "") + columns[c];
  out += "\n";
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) out += (c ? "," : "") + io::format17(row[c]);
    out += "\n";
  }
  return out;
}

SweepTable sweep_amplitude(const ExperimentParams& base, std::span<const double> epsilons,
                           std::span<const std::size_t> ensemble_sizes) {
  ExperimentParams p = base;
  p.epsilons.assign(epsilons.begin(), epsilons.end());
  p.ensemble_sizes.assign(ensemble_sizes.begin(), ensemble_sizes.end());
  const auto report = run_single_watermark_experiment(p);

  SweepTable t;
  t.columns = {"epsilon", "N", "teacher_accuracy", "mAP", "mAP_std", "mean_positive_snr"};
  for (double e : p.epsilons) {
    std::vector<double> acc;
    for (const auto& r : report.teachers) {
      if (r.watermarked && r.epsilon == e) acc.push_back(r.accuracy);
    }
    for (auto n : p.ensemble_sizes) {
      const auto& c = report.cell(e, n);
      t.rows.push_back({e, static_cast<double>(n), stats::mean(acc), c.map, c.map_std, c.mean_positive_snr});
    }
  }
  return t;
}

SweepTable sweep_frequency(const ExperimentParams& base, std::span<const double> frequencies,
                           std::span<const std::size_t> ensemble_sizes) {
  SweepTable t;
  t.columns = {"frequency", "N", "multiplier", "mean_positive_snr", "std_positive_snr", "mAP"};
  for (std::size_t i = 0; i < frequencies.size(); ++i) {
    ExperimentParams p = base;
    p.ensemble_sizes.assign(ensemble_sizes.begin(), ensemble_sizes.end());
    p.epsilons = {base.epsilons.front()};
    p.frequency_multiplier = base.frequency_multiplier * frequencies[i] / kReferenceFrequency;
    if (!base.out_dir.empty()) p.out_dir = base.out_dir / ("f" + std::to_string(i));
    const auto report = run_single_watermark_experiment(p);
    for (auto n : p.ensemble_sizes) {
      const auto& c = report.cell(p.epsilons.front(), n);
      t.rows.push_back({frequencies[i], static_cast<double>(n), p.frequency_multiplier, c.mean_positive_snr,
                        c.std_positive_snr, c.map});
    }
  }
  return t;
}

}  // namespace sinemark::harness
