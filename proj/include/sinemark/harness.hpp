#pragma once

// Experiment orchestration: ranking metrics, the periodogram bound checker,
// single/multi-watermark ranking experiments, the case study, and sweeps.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sinemark/datagen.hpp"
#include "sinemark/error.hpp"
#include "sinemark/io.hpp"
#include "sinemark/nnet.hpp"
#include "sinemark/spectrum.hpp"

namespace sinemark::harness {

// ---------------------------------------------------------------- pool

/// Runs fn(0..count-1) on up to `jobs` threads. The exception of the lowest
/// failing index is rethrown after all workers finish.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn);

// ------------------------------------------------------------- ranking

/// Average precision of the descending-score ranking. Equal scores keep
/// their input order (stable sort). Throws UndefinedMetric without positives.
double average_precision(std::span<const double> scores, const std::vector<bool>& positive);

/// Expected AP of a uniformly random ranking of `positives` among
/// positives + negatives items.
double expected_random_ap(std::size_t positives, std::size_t negatives);

struct RandomBaseline {
  double expected = 0.0;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t resamples = 0;
};

/// Monte Carlo AP of random rankings next to the closed form.
RandomBaseline random_baseline(std::size_t positives, std::size_t negatives, std::size_t resamples,
                               std::uint64_t seed);

struct ScoredStudent {
  std::string id;
  bool positive = false;
  double p_snr = 0.0;   // +inf when the out-of-window power vanished
  std::size_t survivors = 0;
};

double average_precision(const std::vector<ScoredStudent>& students);
/// student_id,is_positive,p_snr
std::string ranking_csv(const std::vector<ScoredStudent>& students);

// --------------------------------------------------------------- bound

/// Periodogram bound terms for one (ensemble, student, f) triple. `lower`
/// and `upper` are the bounds as stated; `norm_lower` / `norm_upper` follow
/// from the triangle inequality on residual norms.
struct BoundReport {
  double frequency = 0.0;
  std::size_t ensemble_size = 0;
  std::size_t samples = 0;
  double chi0_D = 0.0;
  double chif_D = 0.0;
  double chif_hat = 0.0;
  double chif_tilde = 0.0;
  double tau1 = 0.0;
  double tau2 = 0.0;
  double l_se = 0.0;
  double p_d = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double norm_lower = 0.0;
  double norm_upper = 0.0;

  bool holds(double slack = 1e-6) const { return lower <= p_d + slack && p_d <= upper + slack; }
  bool norm_holds(double slack = 1e-6) const {
    return norm_lower <= p_d + slack && p_d <= norm_upper + slack;
  }
};

class BoundViolation : public Error {
 public:
  explicit BoundViolation(const BoundReport& r);
  const BoundReport& report() const noexcept { return report_; }

 private:
  BoundReport report_;
};

/// Core computation on target-class columns. `tilde` is empty when N = 1.
BoundReport bound_terms(std::span<const double> p, std::span<const double> hat,
                        std::span<const double> tilde, std::span<const double> student,
                        std::size_t ensemble_size, double frequency);

/// `watermarked` must carry its watermark; the other members contribute
/// their deployed outputs. `sample` rows are the paired inputs.
BoundReport verify_bound(const nnet::Model& watermarked,
                         std::span<const nnet::Model* const> others, const nnet::Model& student,
                         const Matrix& sample, double frequency);

/// Throws BoundViolation when the stated bound fails beyond `slack`.
void enforce_bound(const BoundReport& report, double slack = 1e-6);

io::Json to_json(const BoundReport& report);

// --------------------------------------------------------- experiments

struct ExperimentParams {
  data::BlobSpec data;  // data.seed is replaced by a stream of `seed`
  std::array<double, 3> fractions{0.45, 0.45, 0.10};
  nnet::ModelSpec teacher_model{};
  nnet::ModelSpec student_model{nnet::Architecture::mlp, 128};
  nnet::TrainConfig teacher_train{};
  nnet::TrainConfig student_train{100, 32, 0.1, 0.9, 1, nnet::LossKind::kl, 0.1};

  std::size_t watermarked_teachers = 4;
  std::size_t unwatermarked_teachers = 8;
  std::size_t students_per_ensemble = 4;
  std::size_t ground_truth_students = 4;
  std::vector<std::size_t> ensemble_sizes{1};
  std::vector<double> epsilons{0.1};

  std::size_t target_class = 0;
  /// f_w = 2 pi * periods / (central 95% spread of v.x over the teacher half).
  double periods = 8.0;
  /// Absolute f_w; skips the rescaling rule when set.
  std::optional<double> frequency;
  /// Multiplies the (rescaled or absolute) f_w.
  double frequency_multiplier = 1.0;

  spectrum::ExtractionParams extraction{};
  /// First quartile for N = 1, median otherwise; off keeps extraction.filter.
  bool auto_filter = true;
  /// Queries drawn from the student half; unset uses all of it.
  std::optional<std::size_t> query_count;

  double accuracy_tolerance = 0.01;
  std::size_t random_resamples = 1000;
  std::uint64_t seed = 1;
  std::size_t jobs = 1;
  std::filesystem::path out_dir;  // empty: no artifacts
  bool write_periodograms = true;

  void validate() const;
};

io::Json to_json(const ExperimentParams& params);
ExperimentParams experiment_params_from_json(const io::Json& j, ExperimentParams defaults = {});

struct TeacherRecord {
  std::string id;
  bool watermarked = false;
  double epsilon = 0.0;
  double frequency = 0.0;
  double accuracy = 0.0;
  double gap = 0.0;           // unwatermarked mean minus this accuracy
  double relative_gap = 0.0;  // gap / unwatermarked mean
  bool gate_pass = true;
};

struct KeyRanking {
  std::size_t key_index = 0;
  std::vector<ScoredStudent> students;
  double ap = 0.0;
  double mean_positive_snr = 0.0;
  double mean_negative_snr = 0.0;
  /// Students distilled from ensembles without this key (ground-truth
  /// students excluded).
  double mean_cross_snr = 0.0;
};

struct CellReport {
  double epsilon = 0.0;
  std::size_t ensemble_size = 0;
  std::vector<KeyRanking> rankings;
  double map = 0.0;
  double map_std = 0.0;  // over keys
  double mean_positive_snr = 0.0;
  double std_positive_snr = 0.0;
  double mean_student_accuracy = 0.0;
  RandomBaseline random;
};

struct ExperimentReport {
  std::string kind;
  std::uint64_t seed = 0;
  std::vector<TeacherRecord> teachers;
  double unwatermarked_mean_accuracy = 0.0;
  std::vector<std::string> gate_violations;
  double ground_truth_student_accuracy = 0.0;
  std::vector<CellReport> cells;
  io::Json frequency_rule;

  const CellReport& cell(double epsilon, std::size_t ensemble_size) const;
};

io::Json to_json(const ExperimentReport& report);

/// One watermarked teacher per ensemble plus N - 1 unwatermarked ones,
/// for every (epsilon, N) cell. With students_per_ensemble = 0 only the
/// teachers are trained (accuracy gate study).
ExperimentReport run_single_watermark_experiment(const ExperimentParams& params);

/// Same with students distilled by the equal KL + CE mix.
ExperimentReport run_mixed_loss_experiment(ExperimentParams params);

/// Every ensemble member watermarked with its own key; ensembles are
/// round-robin windows of size N over the watermarked teachers.
ExperimentReport run_multi_watermark_experiment(const ExperimentParams& params);

/// Throws DuplicateKey when two keys coincide.
void require_distinct_keys(std::span<const wm::WatermarkKey> keys);

struct CaseStudyReport {
  std::uint64_t seed = 0;
  double epsilon = 0.0;
  double frequency = 0.0;
  double teacher_accuracy = 0.0;
  double unwatermarked_teacher_accuracy = 0.0;
  double student_accuracy = 0.0;
  spectrum::SnrReport teacher;             // watermarked teacher, matching key
  spectrum::SnrReport student;             // its student, matching key
  spectrum::SnrReport student_random_key;  // its student, unrelated key
  spectrum::SnrReport control_student;     // unwatermarked teacher's student
};

io::Json to_json(const CaseStudyReport& report);

/// One watermarked and one unwatermarked teacher (epsilons.front()), one
/// student of each.
CaseStudyReport run_case_study(const ExperimentParams& params);

struct DilutionRow {
  std::size_t ensemble_size = 0;
  double amplitude = 0.0;
  double ratio = 0.0;  // amplitude / single-teacher amplitude
};

/// Fitted amplitude at f_w of the ensemble target-class output on pairs
/// kept by the single teacher's filter.
std::vector<DilutionRow> amplitude_dilution(const ExperimentParams& params,
                                            std::span<const std::size_t> ensemble_sizes);

// ------------------------------------------------------------- sweeps

struct SweepTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::string csv() const;
};

/// Rows: epsilon, N, mean watermarked-teacher accuracy, mAP, mAP std,
/// mean positive P_snr.
SweepTable sweep_amplitude(const ExperimentParams& base, std::span<const double> epsilons,
                           std::span<const std::size_t> ensemble_sizes);

/// `frequencies` are on the reference scale where 30 is the default; each
/// maps to f * (rescaled f_w / 30). Rows: f, N, effective multiplier,
/// mean positive P_snr, std, mAP.
SweepTable sweep_frequency(const ExperimentParams& base, std::span<const double> frequencies,
                           std::span<const std::size_t> ensemble_sizes);

inline constexpr double kReferenceFrequency = 30.0;

}  // namespace sinemark::harness
