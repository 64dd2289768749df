#include "sinemark/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "sinemark/error.hpp"
#include "sinemark/random.hpp"

namespace sinemark::nnet {

std::string to_string(Architecture a) {
  return a == Architecture::mlp ? "mlp" : "softmax_regression";
}

Architecture architecture_from_string(const std::string& s) {
  if (s == "softmax_regression" || s == "softmax") return Architecture::softmax_regression;
  if (s == "mlp") return Architecture::mlp;
  throw ConfigError("architecture", "unknown architecture '" + s + "'");
}

io::Json to_json(const ModelSpec& spec) {
  return {{"architecture", to_string(spec.architecture)}, {"hidden_size", spec.hidden_size}};
}

ModelSpec model_spec_from_json(const io::Json& j, ModelSpec spec) {
  io::require_known_fields(j, {"architecture", "hidden_size"}, "model");
  try {
    if (j.contains("architecture")) spec.architecture = architecture_from_string(j.at("architecture").get<std::string>());
    spec.hidden_size = j.value("hidden_size", spec.hidden_size);
  } catch (const io::Json::exception& e) {
    throw ConfigError("model", e.what());
  }
  if (spec.architecture == Architecture::mlp && spec.hidden_size == 0) {
    throw ConfigError("model.hidden_size", "must be >= 1");
  }
  return spec;
}

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::cross_entropy: return "cross_entropy";
    case LossKind::watermarked_ce: return "watermarked_ce";
    case LossKind::kl: return "kl";
    case LossKind::kl_ce: return "kl_ce";
  }
  return "?";
}

LossKind loss_from_string(const std::string& s) {
  if (s == "cross_entropy" || s == "ce") return LossKind::cross_entropy;
  if (s == "watermarked_ce") return LossKind::watermarked_ce;
  if (s == "kl") return LossKind::kl;
  if (s == "kl_ce" || s == "kl+ce") return LossKind::kl_ce;
  throw ConfigError("loss", "unknown loss '" + s + "'");
}

namespace {

using ConstMap = Eigen::Map<const Matrix>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;

struct Layout {
  // Offsets into the flat parameter vector.
  std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0, total = 0;
};

Layout layout(Architecture arch, std::size_t n, std::size_t m, std::size_t h) {
  Layout l;
  if (arch == Architecture::softmax_regression) {
    l.w1 = 0;
    l.b1 = m * n;
    l.total = l.b1 + m;
  } else {
    l.w1 = 0;
    l.b1 = h * n;
    l.w2 = l.b1 + h;
    l.b2 = l.w2 + m * h;
    l.total = l.b2 + m;
  }
  return l;
}

void softmax_rows(Matrix& z) {
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

}  // namespace

// Forward/backward plumbing shared by Model and the training loop.
class Trainer {
 public:
  struct Cache {
    Matrix xs;
    Matrix hidden;
    Matrix logits;
  };

  static void forward(const Model& m, const Matrix& x, Cache& c) {
    m.check_input(x);
    c.xs = m.standardize(x);
    const auto l = layout(m.arch_, m.n_, m.m_, m.hidden_);
    const double* p = m.params_.data();
    if (m.arch_ == Architecture::softmax_regression) {
      ConstMap w(p + l.w1, m.m_, m.n_);
      ConstVecMap b(p + l.b1, m.m_);
      c.logits.noalias() = c.xs * w.transpose();
      c.logits.rowwise() += b;
    } else {
      ConstMap w1(p + l.w1, m.hidden_, m.n_);
      ConstVecMap b1(p + l.b1, m.hidden_);
      ConstMap w2(p + l.w2, m.m_, m.hidden_);
      ConstVecMap b2(p + l.b2, m.m_);
      c.hidden.noalias() = c.xs * w1.transpose();
      c.hidden.rowwise() += b1;
      c.hidden = c.hidden.array().tanh().matrix();
      c.logits.noalias() = c.hidden * w2.transpose();
      c.logits.rowwise() += b2;
    }
  }

  static void backward(const Model& m, const Cache& c, const Matrix& dlogits, std::vector<double>& g) {
    const auto l = layout(m.arch_, m.n_, m.m_, m.hidden_);
    g.assign(l.total, 0.0);
    using Map = Eigen::Map<Matrix>;
    using VecMap = Eigen::Map<Eigen::RowVectorXd>;
    if (m.arch_ == Architecture::softmax_regression) {
      Map(g.data() + l.w1, m.m_, m.n_).noalias() = dlogits.transpose() * c.xs;
      VecMap(g.data() + l.b1, m.m_) = dlogits.colwise().sum();
    } else {
      ConstMap w2(m.params_.data() + l.w2, m.m_, m.hidden_);
      Map(g.data() + l.w2, m.m_, m.hidden_).noalias() = dlogits.transpose() * c.hidden;
      VecMap(g.data() + l.b2, m.m_) = dlogits.colwise().sum();
      Matrix dpre = dlogits * w2;
      dpre.array() *= 1.0 - c.hidden.array().square();
      Map(g.data() + l.w1, m.hidden_, m.n_).noalias() = dpre.transpose() * c.xs;
      VecMap(g.data() + l.b1, m.hidden_) = dpre.colwise().sum();
    }
  }

  enum class Selection { holdout_accuracy, holdout_agreement };

  struct Problem {
    const Matrix* x = nullptr;
    const Matrix* soft = nullptr;      // optional soft targets, aligned with x
    std::span<const int> labels;       // optional labels, aligned with x
  };

  static void fit(Model& model, const Problem& prob, const TrainConfig& cfg, LossKind loss,
                  const wm::WatermarkConfig* watermark, Selection selection);
};

void Model::check_input(const Matrix& x) const {
  if (static_cast<std::size_t>(x.cols()) != n_) {
    throw InvalidInput("input dimension " + std::to_string(x.cols()) +
                       " does not match model input dimension " + std::to_string(n_));
  }
}

Matrix Model::standardize(const Matrix& x) const {
  Matrix xs = x;
  xs.rowwise() -= shift_.transpose();
  xs.array().rowwise() *= scale_.transpose().array();
  return xs;
}

Model Model::create(const ModelSpec& spec, std::size_t input_dim, std::size_t class_count,
                    std::uint64_t seed) {
  if (input_dim == 0) throw InvalidInput("model input dimension must be positive");
  if (class_count < 2) throw InvalidInput("model needs at least two classes");
  if (spec.architecture == Architecture::mlp && spec.hidden_size == 0) {
    throw InvalidInput("MLP hidden size must be positive");
  }
  Model m;
  m.arch_ = spec.architecture;
  m.n_ = input_dim;
  m.m_ = class_count;
  m.hidden_ = spec.architecture == Architecture::mlp ? spec.hidden_size : 0;
  m.shift_ = Vector::Zero(static_cast<Eigen::Index>(input_dim));
  m.scale_ = Vector::Ones(static_cast<Eigen::Index>(input_dim));
  const auto l = layout(m.arch_, m.n_, m.m_, m.hidden_);
  m.params_.resize(l.total);

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  std::mt19937_64 rng(seed);
  auto fill = [&](std::size_t from, std::size_t to, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = from; i < to; ++i) m.params_[i] = dist(rng);
  };
  if (m.arch_ == Architecture::softmax_regression) {
    fill(0, l.total, m.n_);
  } else {
    fill(l.w1, l.w2, m.n_);
    fill(l.w2, l.total, m.hidden_);
  }
  return m;
}

void Model::set_input_standardization(Vector shift, Vector scale) {
  if (static_cast<std::size_t>(shift.size()) != n_ || static_cast<std::size_t>(scale.size()) != n_) {
    throw InvalidInput("standardization vectors must match the input dimension");
  }
  if (!shift.allFinite() || !scale.allFinite()) throw InvalidInput("non-finite standardization");
  shift_ = std::move(shift);
  scale_ = std::move(scale);
}

void Model::fit_input_standardization(const Matrix& features) {
  check_input(features);
  if (features.rows() == 0) throw InvalidInput("cannot standardize on an empty sample");
  Vector mean = features.colwise().mean().transpose();
  Vector scale(mean.size());
  for (Eigen::Index d = 0; d < mean.size(); ++d) {
    const double var = (features.col(d).array() - mean[d]).square().mean();
    const double sd = std::sqrt(var);
    scale[d] = sd > 1e-8 ? 1.0 / sd : 1.0;
  }
  set_input_standardization(std::move(mean), std::move(scale));
}

void Model::attach_watermark(std::optional<wm::WatermarkConfig> cfg) {
  if (cfg) {
    if (cfg->key().dim() != n_) throw InvalidInput("watermark key dimension does not match model");
    if (cfg->key().target_class() >= m_) throw InvalidInput("watermark target class out of range");
  }
  watermark_ = std::move(cfg);
}

Matrix Model::logits(const Matrix& x) const {
  Trainer::Cache c;
  Trainer::forward(*this, x, c);
  return std::move(c.logits);
}

Matrix Model::probabilities(const Matrix& x) const {
  Matrix z = logits(x);
  softmax_rows(z);
  return z;
}

Matrix Model::predict(const Matrix& x) const {
  Matrix q = probabilities(x);
  if (watermark_) {
    for (Eigen::Index r = 0; r < q.rows(); ++r) {
      wm::apply_modified_softmax(row_span(q, r), row_span(x, r), *watermark_);
    }
  }
  return q;
}

wm::ProbVector Model::predict(std::span<const double> x) const {
  return nnet::predict(*this, x, watermark_);
}

wm::ProbVector predict(const Model& model, std::span<const double> x,
                       const std::optional<wm::WatermarkConfig>& watermark) {
  const Matrix row = as_vector(x).transpose();
  const Matrix z = model.logits(row);
  const auto q = wm::softmax(row_span(z, 0));
  return watermark ? wm::modified_softmax(q, x, *watermark) : q;
}

void Model::set_parameters(std::span<const double> values) {
  if (values.size() != params_.size()) throw InvalidInput("parameter count mismatch");
  params_.assign(values.begin(), values.end());
}

bool Model::finite() const {
  return std::all_of(params_.begin(), params_.end(), [](double v) { return std::isfinite(v); });
}

std::vector<double> Model::backward(const Matrix& x, const Matrix& dlogits) const {
  if (dlogits.rows() != x.rows() || static_cast<std::size_t>(dlogits.cols()) != m_) {
    throw InvalidInput("logit gradient shape mismatch");
  }
  Trainer::Cache c;
  Trainer::forward(*this, x, c);
  std::vector<double> g;
  Trainer::backward(*this, c, dlogits, g);
  return g;
}

namespace {

io::Json key_json(const wm::WatermarkKey& key) {
  std::vector<double> v(key.projection().data(), key.projection().data() + key.projection().size());
  return {{"target_class", key.target_class()}, {"frequency", key.frequency()}, {"projection", v}};
}

wm::WatermarkKey key_from_json(const io::Json& j) {
  const auto v = j.at("projection").get<std::vector<double>>();
  return wm::WatermarkKey(j.at("target_class").get<std::size_t>(), j.at("frequency").get<double>(),
                          Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

io::Json Model::to_json() const {
  const auto l = layout(arch_, n_, m_, hidden_);
  auto slice = [&](std::size_t from, std::size_t count) {
    return std::vector<double>(params_.begin() + static_cast<long>(from),
                               params_.begin() + static_cast<long>(from + count));
  };
  io::Json layers = io::Json::array();
  if (arch_ == Architecture::softmax_regression) {
    layers.push_back({{"name", "output"}, {"rows", m_}, {"cols", n_},
                      {"weights", slice(l.w1, m_ * n_)}, {"bias", slice(l.b1, m_)}});
  } else {
    layers.push_back({{"name", "hidden"}, {"rows", hidden_}, {"cols", n_},
                      {"weights", slice(l.w1, hidden_ * n_)}, {"bias", slice(l.b1, hidden_)}});
    layers.push_back({{"name", "output"}, {"rows", m_}, {"cols", hidden_},
                      {"weights", slice(l.w2, m_ * hidden_)}, {"bias", slice(l.b2, m_)}});
  }
  io::Json j{{"format_version", kCheckpointVersion},
             {"architecture", to_string(arch_)},
             {"n", n_},
             {"m", m_},
             {"hidden_size", hidden_},
             {"input_shift", to_std(shift_)},
             {"input_scale", to_std(scale_)},
             {"layers", layers}};
  if (watermark_) {
    j["watermark"] = {{"epsilon", watermark_->epsilon()}, {"key", key_json(watermark_->key())}};
  } else {
    j["watermark"] = nullptr;
  }
  return j;
}

Model Model::from_json(const io::Json& j) {
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw ConfigError("format_version", "unsupported checkpoint version " + std::to_string(version));
    }
    ModelSpec spec;
    spec.architecture = architecture_from_string(j.at("architecture").get<std::string>());
    spec.hidden_size = j.at("hidden_size").get<std::size_t>();
    Model m = create(spec, j.at("n").get<std::size_t>(), j.at("m").get<std::size_t>(), 0);
    const auto shift = j.at("input_shift").get<std::vector<double>>();
    const auto scale = j.at("input_scale").get<std::vector<double>>();
    m.set_input_standardization(
        Eigen::Map<const Vector>(shift.data(), static_cast<Eigen::Index>(shift.size())),
        Eigen::Map<const Vector>(scale.data(), static_cast<Eigen::Index>(scale.size())));
    std::vector<double> flat;
    for (const auto& layer : j.at("layers")) {
      const auto w = layer.at("weights").get<std::vector<double>>();
      const auto b = layer.at("bias").get<std::vector<double>>();
      if (w.size() != layer.at("rows").get<std::size_t>() * layer.at("cols").get<std::size_t>()) {
        throw ConfigError("layers", "weight array does not match rows x cols");
      }
      flat.insert(flat.end(), w.begin(), w.end());
      flat.insert(flat.end(), b.begin(), b.end());
    }
    m.set_parameters(flat);
    if (!j.at("watermark").is_null()) {
      const auto& w = j.at("watermark");
      m.attach_watermark(wm::WatermarkConfig(key_from_json(w.at("key")), w.at("epsilon").get<double>()));
    }
    return m;
  } catch (const io::Json::exception& e) {
    throw ConfigError("checkpoint", e.what());
  } catch (const InvalidInput& e) {
    throw ConfigError("checkpoint", e.what());
  }
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  io::write_text(path, model.to_json().dump() + "\n");
}

Model load_checkpoint(const std::filesystem::path& path) {
  return Model::from_json(io::load_json(path));
}

Ensemble::Ensemble(std::vector<std::shared_ptr<const Model>> members) : members_(std::move(members)) {
  if (members_.empty()) throw InvalidInput("ensemble must have at least one member");
  for (const auto& mdl : members_) {
    if (!mdl) throw InvalidInput("null ensemble member");
    if (mdl->input_dim() != members_.front()->input_dim() ||
        mdl->class_count() != members_.front()->class_count()) {
      throw InvalidInput("ensemble members disagree on input dimension or class count");
    }
  }
}

Matrix ensemble_predict(const Ensemble& ensemble, const Matrix& x) {
  Matrix sum = ensemble.members().front()->predict(x);
  for (std::size_t i = 1; i < ensemble.size(); ++i) sum += ensemble.members()[i]->predict(x);
  sum /= static_cast<double>(ensemble.size());
  return sum;
}

wm::ProbVector ensemble_predict(const Ensemble& ensemble, std::span<const double> x) {
  const Matrix row = as_vector(x).transpose();
  const Matrix q = ensemble_predict(ensemble, row);
  return wm::ProbVector(std::vector<double>(q.data(), q.data() + q.cols()));
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs", "must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate", "must be > 0");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum", "must lie in [0, 1)");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
    throw ConfigError("holdout_fraction", "must lie in [0, 1)");
  }
}

io::Json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},     {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"momentum", c.momentum}, {"seed", c.seed},             {"loss", to_string(c.loss)},
          {"holdout_fraction", c.holdout_fraction}};
}

TrainConfig train_config_from_json(const io::Json& j, TrainConfig c) {
  io::require_known_fields(
      j, {"epochs", "batch_size", "learning_rate", "momentum", "seed", "loss", "holdout_fraction"}, "train");
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.seed = j.value("seed", c.seed);
    if (j.contains("loss")) c.loss = loss_from_string(j.at("loss").get<std::string>());
    c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
  } catch (const io::Json::exception& e) {
    throw ConfigError("train", e.what());
  }
  c.validate();
  return c;
}

namespace {

double log_softmax_at(const Matrix& z, Eigen::Index r, Eigen::Index k, double lse) {
  return z(r, k) - lse;
}

double row_lse(const Matrix& z, Eigen::Index r) {
  const double zmax = z.row(r).maxCoeff();
  return zmax + std::log((z.row(r).array() - zmax).exp().sum());
}

void require_labels(std::span<const int> labels, Eigen::Index rows, std::size_t m) {
  if (labels.size() != static_cast<std::size_t>(rows)) {
    throw ConfigError("loss", "this loss needs one ground-truth label per row");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= m) throw InvalidInput("label out of range");
  }
}

}  // namespace

double loss_and_gradient(LossKind kind, const Matrix& logits, const Matrix& x, const Targets& t,
                         const wm::WatermarkConfig* watermark, Matrix* grad) {
  const Eigen::Index rows = logits.rows();
  const auto m = static_cast<std::size_t>(logits.cols());
  if (rows == 0) throw InvalidInput("empty batch");
  const double inv = 1.0 / static_cast<double>(rows);

  if (kind == LossKind::watermarked_ce && (watermark == nullptr || watermark->epsilon() == 0.0)) {
    kind = LossKind::cross_entropy;  // Eq. reduces to plain cross-entropy
  }
  const bool needs_labels = kind != LossKind::kl;
  const bool needs_soft = kind == LossKind::kl || kind == LossKind::kl_ce;
  if (needs_labels) require_labels(t.labels, rows, m);
  if (needs_soft && (t.soft == nullptr || t.soft->rows() != rows || t.soft->cols() != logits.cols())) {
    throw InvalidInput("soft targets missing or misaligned");
  }

  Matrix q = logits;
  softmax_rows(q);
  if (grad) grad->resize(rows, logits.cols());
  double loss = 0.0;

  for (Eigen::Index r = 0; r < rows; ++r) {
    const double lse = row_lse(logits, r);
    double row_loss = 0.0;
    switch (kind) {
      case LossKind::cross_entropy: {
        const auto y = t.labels[static_cast<std::size_t>(r)];
        row_loss = -std::max(log_softmax_at(logits, r, y, lse), std::log(wm::kLogClamp));
        if (grad) {
          grad->row(r) = q.row(r);
          (*grad)(r, y) -= 1.0;
        }
        break;
      }
      case LossKind::watermarked_ce: {
        const auto y = t.labels[static_cast<std::size_t>(r)];
        std::vector<double> qhat(q.row(r).data(), q.row(r).data() + m);
        wm::apply_modified_softmax(qhat, row_span(x, r), *watermark);
        const double qh = qhat[static_cast<std::size_t>(y)];
        row_loss = -std::log(std::max(qh, wm::kLogClamp));
        if (grad) {
          const double w = qh > wm::kLogClamp ? q(r, y) / ((1.0 + 2.0 * watermark->epsilon()) * qh) : 0.0;
          grad->row(r) = w * q.row(r);
          (*grad)(r, y) -= w;
        }
        break;
      }
      case LossKind::kl:
      case LossKind::kl_ce: {
        double kl = 0.0;
        for (Eigen::Index k = 0; k < logits.cols(); ++k) {
          const double tk = (*t.soft)(r, k);
          if (tk > 0.0) kl += tk * (std::log(tk) - log_softmax_at(logits, r, k, lse));
        }
        if (kind == LossKind::kl) {
          row_loss = kl;
          if (grad) grad->row(r) = q.row(r) - t.soft->row(r);
        } else {
          const auto y = t.labels[static_cast<std::size_t>(r)];
          const double ce = -std::max(log_softmax_at(logits, r, y, lse), std::log(wm::kLogClamp));
          row_loss = 0.5 * kl + 0.5 * ce;
          if (grad) {
            grad->row(r) = q.row(r) - 0.5 * t.soft->row(r);
            (*grad)(r, y) -= 0.5;
          }
        }
        break;
      }
    }
    loss += row_loss;
  }
  if (grad) *grad *= inv;
  return loss * inv;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidInput("distribution lengths differ");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) {
      if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
      kl += p[i] * std::log(p[i] / q[i]);
    }
  }
  return kl;
}

double accuracy(const Matrix& outputs, std::span<const int> labels) {
  if (outputs.rows() == 0) throw InvalidInput("accuracy of an empty sample");
  if (labels.size() != static_cast<std::size_t>(outputs.rows())) {
    throw InvalidInput("accuracy needs one label per output row");
  }
  std::size_t hits = 0;
  for (Eigen::Index r = 0; r < outputs.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < outputs.cols(); ++k) {
      if (outputs(r, k) > outputs(r, best)) best = k;
    }
    if (best == labels[static_cast<std::size_t>(r)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(outputs.rows());
}

double accuracy(const Model& model, const data::Dataset& data) {
  if (!data.labeled()) throw InvalidInput("accuracy needs labeled data");
  return accuracy(model.predict(data.features), data.label_span());
}

namespace {

Matrix gather_rows(const Matrix& src, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), src.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = src.row(static_cast<Eigen::Index>(idx[i]));
  }
  return out;
}

std::vector<int> gather_labels(std::span<const int> src, std::span<const std::size_t> idx) {
  std::vector<int> out;
  if (src.empty()) return out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(src[i]);
  return out;
}

}  // namespace

void Trainer::fit(Model& model, const Problem& prob, const TrainConfig& cfg, LossKind loss,
                  const wm::WatermarkConfig* watermark, Selection selection) {
  cfg.validate();
  const auto total = static_cast<std::size_t>(prob.x->rows());
  if (total == 0) throw InvalidInput("cannot train on an empty dataset");

  std::mt19937_64 rng(derive_seed(cfg.seed, 17));
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  auto holdout_n = static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(total));
  if (holdout_n >= total) holdout_n = 0;
  std::vector<std::size_t> hold_idx(order.begin(), order.begin() + static_cast<long>(holdout_n));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<long>(holdout_n), order.end());
  std::sort(hold_idx.begin(), hold_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  const Matrix x_train = gather_rows(*prob.x, train_idx);
  const Matrix x_hold = gather_rows(*prob.x, hold_idx);
  const auto y_train = gather_labels(prob.labels, train_idx);
  const auto y_hold = gather_labels(prob.labels, hold_idx);
  Matrix soft_train, soft_hold;
  if (prob.soft) {
    soft_train = gather_rows(*prob.soft, train_idx);
    soft_hold = gather_rows(*prob.soft, hold_idx);
  }

  model.fit_input_standardization(x_train);

  std::vector<int> agree_hold;
  if (selection == Selection::holdout_agreement) {
    for (Eigen::Index r = 0; r < soft_hold.rows(); ++r) {
      Eigen::Index best = 0;
      soft_hold.row(r).maxCoeff(&best);
      agree_hold.push_back(static_cast<int>(best));
    }
  }
  auto holdout_score = [&]() {
    const auto& reference = selection == Selection::holdout_accuracy ? y_hold : agree_hold;
    return accuracy(model.predict(x_hold), reference);
  };

  std::vector<double> velocity(model.params_.size(), 0.0);
  std::vector<double> grad;
  std::vector<double> best = model.params_;
  double best_score = -std::numeric_limits<double>::infinity();

  std::vector<std::size_t> perm(train_idx.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Cache cache;
  Matrix dlogits;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t start = 0; start < perm.size(); start += cfg.batch_size) {
      const auto len = std::min(cfg.batch_size, perm.size() - start);
      std::span<const std::size_t> bidx(perm.data() + start, len);
      const Matrix xb = gather_rows(x_train, bidx);
      const auto yb = gather_labels(y_train, bidx);
      Matrix sb;
      if (prob.soft) sb = gather_rows(soft_train, bidx);
      forward(model, xb, cache);
      const double l = loss_and_gradient(loss, cache.logits, xb,
                                         Targets{prob.soft ? &sb : nullptr, yb}, watermark, &dlogits);
      if (!std::isfinite(l)) throw TrainingFailure(epoch, "non-finite loss");
      backward(model, cache, dlogits, grad);
      for (std::size_t i = 0; i < grad.size(); ++i) {
        velocity[i] = cfg.momentum * velocity[i] + grad[i];
        model.params_[i] -= cfg.learning_rate * velocity[i];
      }
    }
    if (!model.finite()) throw TrainingFailure(epoch, "non-finite parameters");
    if (holdout_n > 0) {
      const double score = holdout_score();
      if (!std::isfinite(score)) throw TrainingFailure(epoch, "non-finite held-out score");
      if (score >= best_score) {  // ties keep the later epoch
        best_score = score;
        best = model.params_;
      }
    }
  }
  if (holdout_n > 0) model.params_ = std::move(best);
}

namespace {

void require_unit_interval(const Matrix& x) {
  if (x.size() > 0 && (x.minCoeff() < 0.0 || x.maxCoeff() > 1.0)) {
    throw InvalidInput("features must be normalized to [0, 1]");
  }
}

}  // namespace

Model train_teacher(const data::Dataset& data, const TrainConfig& cfg, const ModelSpec& spec,
                    const std::optional<wm::WatermarkConfig>& watermark) {
  if (!data.labeled()) throw InvalidInput("teacher training needs labeled data");
  require_unit_interval(data.features);
  Model model = Model::create(spec, data.dim(), data.class_count, derive_seed(cfg.seed, 3));
  model.attach_watermark(watermark);
  const LossKind loss = watermark ? LossKind::watermarked_ce : LossKind::cross_entropy;
  Trainer::Problem prob{&data.features, nullptr, data.label_span()};
  Trainer::fit(model, prob, cfg, loss, watermark ? &*watermark : nullptr,
               Trainer::Selection::holdout_accuracy);
  return model;
}

Model distill(const Ensemble& ensemble, const data::Dataset& student_data, const TrainConfig& cfg,
              const ModelSpec& spec) {
  if (cfg.loss != LossKind::kl && cfg.loss != LossKind::kl_ce) {
    throw ConfigError("loss", "distillation uses 'kl' or 'kl_ce', got '" + to_string(cfg.loss) + "'");
  }
  if (cfg.loss == LossKind::kl_ce && !student_data.labeled()) {
    throw ConfigError("loss", "kl_ce needs ground-truth labels but the student data is unlabeled");
  }
  if (student_data.dim() != ensemble.input_dim()) {
    throw InvalidInput("student data dimension does not match the ensemble");
  }
  const Matrix targets = ensemble_predict(ensemble, student_data.features);
  Model model = Model::create(spec, student_data.dim(), ensemble.class_count(), derive_seed(cfg.seed, 5));
  std::span<const int> labels;
  if (cfg.loss == LossKind::kl_ce) labels = student_data.label_span();
  Trainer::Problem prob{&student_data.features, &targets, labels};
  Trainer::fit(model, prob, cfg, cfg.loss, nullptr, Trainer::Selection::holdout_agreement);
  return model;
}

}  // namespace sinemark::nnet
