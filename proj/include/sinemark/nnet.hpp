#pragma once

// Tiny from-scratch classifiers: softmax regression and a one-hidden-layer
// tanh MLP, trained with mini-batch SGD + momentum. Teachers minimize
// (watermarked) cross-entropy; students minimize KL(ensemble || student),
// optionally mixed 50/50 with ground-truth cross-entropy.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sinemark/datagen.hpp"
#include "sinemark/io.hpp"
#include "sinemark/types.hpp"
#include "sinemark/watermark.hpp"

namespace sinemark::nnet {

inline constexpr int kCheckpointVersion = 1;

enum class Architecture { softmax_regression, mlp };

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);

struct ModelSpec {
  Architecture architecture = Architecture::softmax_regression;
  std::size_t hidden_size = 128;
};

io::Json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const io::Json& j, ModelSpec defaults = {});

/// Parameters live in one flat vector; layers are views into it. Inputs are
/// standardized by a fixed per-feature affine map recorded at training time.
class Model {
 public:
  static Model create(const ModelSpec& spec, std::size_t input_dim, std::size_t class_count,
                      std::uint64_t seed);

  Architecture architecture() const noexcept { return arch_; }
  std::size_t input_dim() const noexcept { return n_; }
  std::size_t class_count() const noexcept { return m_; }
  std::size_t hidden_size() const noexcept { return hidden_; }

  void set_input_standardization(Vector shift, Vector scale);
  /// Per-feature mean and inverse standard deviation of `features`.
  void fit_input_standardization(const Matrix& features);
  const Vector& input_shift() const noexcept { return shift_; }
  const Vector& input_scale() const noexcept { return scale_; }

  void attach_watermark(std::optional<wm::WatermarkConfig> cfg);
  const std::optional<wm::WatermarkConfig>& watermark() const noexcept { return watermark_; }

  Matrix logits(const Matrix& x) const;
  /// Plain softmax outputs q.
  Matrix probabilities(const Matrix& x) const;
  /// Deployed outputs: q, or qhat when a watermark is attached.
  Matrix predict(const Matrix& x) const;
  wm::ProbVector predict(std::span<const double> x) const;

  std::size_t parameter_count() const noexcept { return params_.size(); }
  std::span<const double> parameters() const noexcept { return params_; }
  void set_parameters(std::span<const double> values);
  bool finite() const;

  /// Gradient of sum_rows <dlogits_row, z_row> with respect to the flat
  /// parameters, i.e. back-propagation of a given logit gradient.
  std::vector<double> backward(const Matrix& x, const Matrix& dlogits) const;

  io::Json to_json() const;
  static Model from_json(const io::Json& j);

 private:
  Model() = default;
  Matrix standardize(const Matrix& x) const;
  void check_input(const Matrix& x) const;

  Architecture arch_ = Architecture::softmax_regression;
  std::size_t n_ = 0;
  std::size_t m_ = 0;
  std::size_t hidden_ = 0;
  Vector shift_;
  Vector scale_;
  std::vector<double> params_;
  std::optional<wm::WatermarkConfig> watermark_;

  friend class Trainer;
};

wm::ProbVector predict(const Model& model, std::span<const double> x,
                       const std::optional<wm::WatermarkConfig>& watermark);

class Ensemble {
 public:
  explicit Ensemble(std::vector<std::shared_ptr<const Model>> members);

  std::size_t size() const noexcept { return members_.size(); }
  const std::vector<std::shared_ptr<const Model>>& members() const noexcept { return members_; }
  std::size_t input_dim() const { return members_.front()->input_dim(); }
  std::size_t class_count() const { return members_.front()->class_count(); }

 private:
  std::vector<std::shared_ptr<const Model>> members_;
};

/// Arithmetic mean of member outputs (watermarked members contribute qhat).
Matrix ensemble_predict(const Ensemble& ensemble, const Matrix& x);
wm::ProbVector ensemble_predict(const Ensemble& ensemble, std::span<const double> x);

enum class LossKind { cross_entropy, watermarked_ce, kl, kl_ce };

std::string to_string(LossKind k);
LossKind loss_from_string(const std::string& s);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  LossKind loss = LossKind::cross_entropy;
  /// Share of the training data held out for best-epoch selection.
  double holdout_fraction = 0.1;

  void validate() const;
};

io::Json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const io::Json& j, TrainConfig defaults = {});

/// Soft targets and/or hard labels for one loss evaluation.
struct Targets {
  const Matrix* soft = nullptr;
  std::span<const int> labels;
};

/// Mean loss over the rows and its gradient with respect to the logits
/// (already divided by the row count). `x` feeds the watermark signal.
double loss_and_gradient(LossKind kind, const Matrix& logits, const Matrix& x,
                         const Targets& targets, const wm::WatermarkConfig* watermark,
                         Matrix* grad);

double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Cross-entropy (watermarked when `watermark` is set) training. Keeps the
/// epoch with the best held-out accuracy, the latest one on ties. Labels
/// are required.
Model train_teacher(const data::Dataset& data, const TrainConfig& cfg, const ModelSpec& spec,
                    const std::optional<wm::WatermarkConfig>& watermark);

/// KL distillation from the ensemble's averaged outputs; kl_ce adds
/// ground-truth cross-entropy at equal weight. Selection keeps the epoch
/// whose held-out argmax agrees best with the ensemble, latest on ties.
Model distill(const Ensemble& ensemble, const data::Dataset& student_data, const TrainConfig& cfg,
              const ModelSpec& spec);

/// Argmax-match rate; ties go to the lowest class index.
double accuracy(const Matrix& outputs, std::span<const int> labels);
double accuracy(const Model& model, const data::Dataset& data);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace sinemark::nnet
