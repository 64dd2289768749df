#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "sinemark/datagen.hpp"
#include "sinemark/error.hpp"
#include "sinemark/nnet.hpp"

using namespace sinemark;
using nnet::LossKind;

namespace {

Matrix random_inputs(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  return x;
}

Matrix random_distributions(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Matrix t = random_inputs(rows, cols, seed).array() + 0.05;
  for (Eigen::Index r = 0; r < rows; ++r) t.row(r) /= t.row(r).sum();
  return t;
}

double model_loss(const nnet::Model& model, LossKind kind, const Matrix& x, const nnet::Targets& t,
                  const wm::WatermarkConfig* w) {
  return nnet::loss_and_gradient(kind, model.logits(x), x, t, w, nullptr);
}

// Central differences over every parameter of `model`.
void check_parameter_gradient(nnet::Model model, LossKind kind, const Matrix& x,
                              const nnet::Targets& t, const wm::WatermarkConfig* w) {
  Matrix dlogits;
  nnet::loss_and_gradient(kind, model.logits(x), x, t, w, &dlogits);
  const auto analytic = model.backward(x, dlogits);
  std::vector<double> params(model.parameters().begin(), model.parameters().end());
  REQUIRE(analytic.size() == params.size());
  const double h = 1e-6;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params;
    p[i] += h;
    model.set_parameters(p);
    const double up = model_loss(model, kind, x, t, w);
    p[i] -= 2 * h;
    model.set_parameters(p);
    const double down = model_loss(model, kind, x, t, w);
    const double fd = (up - down) / (2 * h);
    CHECK(analytic[i] == doctest::Approx(fd).epsilon(1e-6).scale(1e-3));
  }
  model.set_parameters(params);
}

data::Dataset small_blobs(std::uint64_t seed, std::size_t per_class = 60) {
  data::BlobSpec spec;
  spec.classes = 4;
  spec.dim = 6;
  spec.per_class = per_class;
  spec.sigma = 0.1;
  spec.seed = seed;
  return data::make_blobs(spec);
}

nnet::TrainConfig quick(LossKind loss, std::size_t epochs = 20) {
  nnet::TrainConfig c;
  c.epochs = epochs;
  c.loss = loss;
  return c;
}

}  // namespace

TEST_CASE("loss gradients match central differences for every loss") {
  const Matrix x = random_inputs(5, 4, 1);
  const Matrix soft = random_distributions(5, 3, 2);
  const std::vector<int> labels{0, 2, 1, 1, 0};
  const nnet::Targets t{&soft, labels};
  const wm::WatermarkConfig w(wm::WatermarkKey::random(4, 15.0, 1, 9), 0.1);
  for (auto arch : {nnet::Architecture::softmax_regression, nnet::Architecture::mlp}) {
    auto model = nnet::Model::create({arch, 6}, 4, 3, 3);
    model.fit_input_standardization(random_inputs(20, 4, 4));
    for (auto kind : {LossKind::cross_entropy, LossKind::watermarked_ce, LossKind::kl, LossKind::kl_ce}) {
      CAPTURE(nnet::to_string(kind));
      check_parameter_gradient(model, kind, x, t, &w);
    }
  }
}

TEST_CASE("KL divergence of simple distributions") {
  const std::vector<double> p{0.5, 0.5}, q{0.25, 0.75}, r{1.0, 0.0};
  CHECK(nnet::kl_divergence(p, q) == doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0)));
  CHECK(nnet::kl_divergence(p, p) == 0.0);
  CHECK(std::isinf(nnet::kl_divergence(p, r)));
  CHECK(nnet::kl_divergence(r, p) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("accuracy breaks ties toward the lowest class") {
  Matrix out(3, 2);
  out << 0.5, 0.5, 0.2, 0.8, 0.9, 0.1;
  const std::vector<int> labels{0, 1, 1};
  CHECK(nnet::accuracy(out, labels) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("teacher training is deterministic and fits separable blobs") {
  const auto d = small_blobs(5);
  const auto a = nnet::train_teacher(d, quick(LossKind::cross_entropy), {}, std::nullopt);
  const auto b = nnet::train_teacher(d, quick(LossKind::cross_entropy), {}, std::nullopt);
  CHECK(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin()));
  CHECK(nnet::accuracy(a, d) > 0.95);
  CHECK_THROWS_AS(nnet::train_teacher(d.without_labels(), quick(LossKind::cross_entropy), {}, std::nullopt),
                  InvalidInput);
}

TEST_CASE("watermarked teachers deploy the perturbed outputs") {
  const auto d = small_blobs(6);
  const wm::WatermarkConfig w(wm::WatermarkKey::random(6, 20.0, 0, 1), 0.1);
  const auto model = nnet::train_teacher(d, quick(LossKind::watermarked_ce), {}, w);
  REQUIRE(model.watermark());
  const Matrix raw = model.probabilities(d.features);
  const Matrix out = model.predict(d.features);
  for (Eigen::Index r = 0; r < 10; ++r) {
    std::vector<double> q(raw.row(r).data(), raw.row(r).data() + raw.cols());
    const auto want = wm::modified_softmax(wm::ProbVector(q), row_span(d.features, r), w);
    for (Eigen::Index k = 0; k < out.cols(); ++k) {
      CHECK(out(r, k) == doctest::Approx(want[static_cast<std::size_t>(k)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("distilled students follow the ensemble") {
  const auto d = small_blobs(7);
  auto t1 = std::make_shared<const nnet::Model>(
      nnet::train_teacher(d, quick(LossKind::cross_entropy), {}, std::nullopt));
  auto c2 = quick(LossKind::cross_entropy);
  c2.seed = 2;
  auto t2 = std::make_shared<const nnet::Model>(nnet::train_teacher(d, c2, {}, std::nullopt));
  const nnet::Ensemble ens({t1, t2});
  const Matrix avg = nnet::ensemble_predict(ens, d.features);
  const Matrix want = 0.5 * (t1->predict(d.features) + t2->predict(d.features));
  CHECK((avg - want).cwiseAbs().maxCoeff() < 1e-15);

  const auto student = nnet::distill(ens, d.without_labels(), quick(LossKind::kl, 40),
                                     {nnet::Architecture::mlp, 16});
  CHECK(nnet::accuracy(student.predict(d.features), d.label_span()) > 0.9);
  CHECK_THROWS_AS(nnet::distill(ens, d.without_labels(), quick(LossKind::kl_ce), {}), ConfigError);
  CHECK_THROWS_AS(nnet::distill(ens, d, quick(LossKind::cross_entropy), {}), ConfigError);
}

TEST_CASE("checkpoints round-trip bit for bit") {
  const auto d = small_blobs(8, 20);
  const wm::WatermarkConfig w(wm::WatermarkKey::random(6, 20.0, 2, 3), 0.05);
  const auto model = nnet::train_teacher(d, quick(LossKind::watermarked_ce, 3), {nnet::Architecture::mlp, 5}, w);
  const auto path = std::filesystem::temp_directory_path() / "sinemark_test_ckpt.json";
  nnet::save_checkpoint(model, path);
  const auto back = nnet::load_checkpoint(path);
  CHECK(back.architecture() == nnet::Architecture::mlp);
  CHECK(back.hidden_size() == 5);
  CHECK(back.watermark()->key() == w.key());
  CHECK(back.watermark()->epsilon() == 0.05);
  CHECK((back.predict(d.features) - model.predict(d.features)).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove(path);

  auto j = model.to_json();
  j["layers"][0]["weights"] = io::Json::array({1.0});
  CHECK_THROWS_AS(nnet::Model::from_json(j), ConfigError);
}

TEST_CASE("training configuration is validated") {
  CHECK_THROWS_AS(nnet::train_config_from_json({{"epochs", 0}}), ConfigError);
  CHECK_THROWS_AS(nnet::train_config_from_json({{"momentum", 1.0}}), ConfigError);
  CHECK_THROWS_AS(nnet::train_config_from_json({{"epoch", 3}}), ConfigError);
  CHECK_THROWS_AS(nnet::train_config_from_json({{"loss", "hinge"}}), ConfigError);
  const auto c = nnet::train_config_from_json({{"loss", "kl_ce"}, {"batch_size", 8}});
  CHECK(c.loss == LossKind::kl_ce);
  CHECK(c.batch_size == 8);
  CHECK(nnet::model_spec_from_json({{"architecture", "mlp"}, {"hidden_size", 7}}).hidden_size == 7);
}

TEST_CASE("mismatched input dimensions are rejected") {
  const auto model = nnet::Model::create({}, 4, 3, 1);
  CHECK_THROWS_AS(model.predict(Matrix::Zero(2, 5)), InvalidInput);
}
