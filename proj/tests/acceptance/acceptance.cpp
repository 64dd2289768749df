// Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero when any
// criterion fails. Set SINEMARK_ACCEPTANCE_JOBS to change the thread count.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "sinemark/datagen.hpp"
#include "sinemark/harness.hpp"
#include "sinemark/nnet.hpp"
#include "sinemark/random.hpp"
#include "sinemark/spectrum.hpp"
#include "sinemark/stats.hpp"
#include "sinemark/watermark.hpp"

using namespace sinemark;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::size_t jobs() {
  if (const char* env = std::getenv("SINEMARK_ACCEPTANCE_JOBS")) return std::max(1, std::atoi(env));
  return std::max(1u, std::thread::hardware_concurrency());
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ------------------------------------------------------------------ 1

Outcome simplex_suite() {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g;
  std::size_t failures = 0;
  double worst = 0.0;
  const std::size_t draws = 10000;
  for (std::size_t t = 0; t < draws; ++t) {
    const std::size_t m = 2 + t % 19;
    const std::size_t n = 1 + t % 40;
    std::vector<double> z(m);
    // Spread logits up to +-60 so some draws sit on the simplex corners.
    const double scale = 60.0 * u(rng) * u(rng);
    for (auto& v : z) v = scale * g(rng);
    std::vector<double> x(n);
    for (auto& v : x) v = 4.0 * u(rng) - 2.0;
    const auto key = wm::WatermarkKey::random(n, 1e-3 + 1e3 * u(rng) * u(rng), t % m, 7 + t);
    const wm::WatermarkConfig cfg(key, 0.5 * u(rng));
    const auto q = wm::softmax(z);
    // Bypass the constructor's check by applying the map in place.
    std::vector<double> out(q.values().begin(), q.values().end());
    wm::apply_modified_softmax(out, x, cfg);
    double sum = 0.0;
    bool ok = true;
    for (double v : out) {
      ok = ok && v >= 0.0 && v <= 1.0;
      sum += v;
    }
    worst = std::max(worst, std::abs(sum - 1.0));
    if (!ok || std::abs(sum - 1.0) > 1e-6) ++failures;
  }
  return {failures == 0, fmt("%zu draws, %zu failures, max |sum - 1| = %.2e", draws, failures, worst)};
}

// ------------------------------------------------------------------ 2

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

Outcome gradient_suite() {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g;
  double worst_wce = 0.0, worst_kl = 0.0;
  const std::size_t instances = 100;
  const double h = 1e-5;
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t m = 10, n = 32;
    std::vector<double> z(m), x(n), y(m, 0.0);
    for (auto& v : z) v = 2.0 * g(rng);
    for (auto& v : x) v = u(rng);
    y[t % m] = 1.0;
    const auto key = wm::WatermarkKey::random(n, 5.0 + 50.0 * u(rng), (t / 3) % m, 300 + t);
    const wm::WatermarkConfig cfg(key, 0.2 * u(rng));

    const auto analytic = wm::grad_watermarked_cross_entropy(z, x, y, cfg);
    std::vector<double> fd(m);
    for (std::size_t k = 0; k < m; ++k) {
      auto zp = z, zm = z;
      zp[k] += h;
      zm[k] -= h;
      fd[k] = (wm::watermarked_cross_entropy(wm::softmax(zp), x, y, cfg) -
               wm::watermarked_cross_entropy(wm::softmax(zm), x, y, cfg)) /
              (2 * h);
    }
    worst_wce = std::max(worst_wce, relative_error(analytic, fd));

    // Distillation loss on one row, soft target from a random distribution.
    Matrix logits(1, static_cast<Eigen::Index>(m)), target(1, static_cast<Eigen::Index>(m));
    for (std::size_t k = 0; k < m; ++k) logits(0, static_cast<Eigen::Index>(k)) = z[k];
    double s = 0.0;
    for (std::size_t k = 0; k < m; ++k) s += (target(0, static_cast<Eigen::Index>(k)) = u(rng) + 1e-3);
    target /= s;
    Matrix xin(1, static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n; ++k) xin(0, static_cast<Eigen::Index>(k)) = x[k];
    const nnet::Targets tg{&target, {}};
    Matrix grad;
    nnet::loss_and_gradient(nnet::LossKind::kl, logits, xin, tg, nullptr, &grad);
    std::vector<double> kl_analytic(grad.data(), grad.data() + m), kl_fd(m);
    for (std::size_t k = 0; k < m; ++k) {
      Matrix lp = logits, lm = logits;
      lp(0, static_cast<Eigen::Index>(k)) += h;
      lm(0, static_cast<Eigen::Index>(k)) -= h;
      kl_fd[k] = (nnet::loss_and_gradient(nnet::LossKind::kl, lp, xin, tg, nullptr, nullptr) -
                  nnet::loss_and_gradient(nnet::LossKind::kl, lm, xin, tg, nullptr, nullptr)) /
                 (2 * h);
    }
    worst_kl = std::max(worst_kl, relative_error(kl_analytic, kl_fd));
  }
  const bool pass = worst_wce <= 1e-6 && worst_kl <= 1e-6;
  return {pass, fmt("%zu instances; max relative error: watermarked CE %.2e, KL %.2e", instances, worst_wce,
                    worst_kl)};
}

// ------------------------------------------------------------------ 3

double grid_chi_sq(const spectrum::PairedSeries& s, double f, double beta, double gamma) {
  double mean = 0.0;
  for (std::size_t l = 0; l < s.size(); ++l) mean += s.q()[l] - beta * std::cos(f * s.p()[l] + gamma);
  mean /= static_cast<double>(s.size());
  double chi = 0.0;
  for (std::size_t l = 0; l < s.size(); ++l) {
    const double r = s.q()[l] - mean - beta * std::cos(f * s.p()[l] + gamma);
    chi += r * r;
  }
  return chi;
}

// Coarse grid over (beta, gamma), then a fine grid around its optimum; the
// best alpha for given (beta, gamma) is the mean residual.
double brute_force_chi_sq(const spectrum::PairedSeries& s, double f, double beta_max) {
  const int nb = 200, ng = 360;
  const double db = beta_max / nb, dg = 2.0 * std::numbers::pi / ng;
  double best = INFINITY, b0 = 0.0, g0 = 0.0;
  for (int bi = 0; bi <= nb; ++bi) {
    for (int gi = 0; gi < ng; ++gi) {
      const double chi = grid_chi_sq(s, f, bi * db, gi * dg);
      if (chi < best) best = chi, b0 = bi * db, g0 = gi * dg;
    }
  }
  for (int bi = -100; bi <= 100; ++bi) {
    for (int gi = -100; gi <= 100; ++gi) {
      const double beta = b0 + db * bi / 100.0;
      if (beta >= 0.0) best = std::min(best, grid_chi_sq(s, f, beta, g0 + dg * gi / 100.0));
    }
  }
  return best;
}

Outcome periodogram_oracle() {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g;
  const double fw = 30.0;
  spectrum::PairedSeries pure;
  for (int l = 0; l < 200; ++l) {
    const double p = 2.0 * u(rng) - 0.5;
    pure.add(p, 0.4 + 0.05 * std::cos(fw * p + 0.3));
  }
  const auto pg = spectrum::periodogram(pure, spectrum::even_grid(2.0 * fw, 512));
  const double peak_f = pg.frequencies[pg.argmax()];
  const double pw = pg.powers[255];  // grid point 256 of 512 is exactly f_w
  const double rel = std::abs(pw - pg.chi0 / 2.0) / (pg.chi0 / 2.0);
  const bool peak_ok = std::abs(peak_f - fw) < 1e-9 && rel <= 0.05;

  double worst = 0.0;
  bool below = true;
  for (int t = 0; t < 8; ++t) {
    spectrum::PairedSeries s;
    const std::size_t len = 10 + 5 * static_cast<std::size_t>(t);
    const double f = 5.0 + 30.0 * u(rng);
    for (std::size_t l = 0; l < len; ++l) {
      const double p = u(rng);
      s.add(p, 0.3 + 0.2 * std::cos(f * p + 1.0) + 0.05 * g(rng));
    }
    const double ls = spectrum::fit_sinusoid(s, f).chi_sq;
    const double bf = brute_force_chi_sq(s, f, 0.6);
    worst = std::max(worst, std::abs(bf - ls));
    below = below && ls <= bf + 1e-12;
  }
  return {peak_ok && worst <= 1e-4 && below,
          fmt("argmax at f = %.6g (f_w = %.6g), P(f_w) / (chi0/2) - 1 = %.2e; brute force vs least squares "
              "max |diff| = %.2e over 8 fits (L <= 45)",
              peak_f, fw, pw / (pg.chi0 / 2.0) - 1.0, worst)};
}

// ------------------------------------------------------------------ 4

Outcome bound_verifier(std::size_t threads) {
  const std::vector<std::size_t> sizes{1, 2, 4, 8};
  const std::vector<double> multiples{1.0, 0.5, 2.0};
  const std::size_t seeds = 5;
  std::vector<std::vector<harness::BoundReport>> per_seed(seeds);

  harness::parallel_for(seeds, threads, [&](std::size_t s) {
    const std::uint64_t seed = 4000 + s;
    data::BlobSpec spec;
    spec.seed = derive_seed(seed, 1);
    const auto parts = data::split(data::make_blobs(spec), {0.45, 0.45, 0.10}, derive_seed(seed, 2));
    auto key = wm::WatermarkKey::random(spec.dim, 1.0, 0, derive_seed(seed, 3));
    key = key.with_frequency(wm::rescaled_frequency(parts.teacher.features, key.projection(), 8.0));
    const wm::WatermarkConfig wmc(key, 0.1);

    nnet::TrainConfig tc;
    tc.seed = derive_seed(seed, 4);
    std::vector<nnet::Model> teachers;
    teachers.push_back(nnet::train_teacher(parts.teacher, tc, {}, wmc));
    for (std::size_t k = 1; k < 8; ++k) {
      tc.seed = derive_seed(seed, 10 + k);
      teachers.push_back(nnet::train_teacher(parts.teacher, tc, {}, std::nullopt));
    }
    for (auto n : sizes) {
      std::vector<std::shared_ptr<const nnet::Model>> members;
      std::vector<const nnet::Model*> others;
      for (std::size_t k = 0; k < n; ++k) {
        members.push_back(std::make_shared<const nnet::Model>(teachers[k]));
        if (k > 0) others.push_back(&teachers[k]);
      }
      nnet::TrainConfig sc;
      sc.loss = nnet::LossKind::kl;
      sc.seed = derive_seed(seed, 100 + n);
      const auto student = nnet::distill(nnet::Ensemble(members), parts.student.without_labels(), sc, {});
      for (double k : multiples) {
        per_seed[s].push_back(
            harness::verify_bound(teachers[0], others, student, parts.student.features, k * key.frequency()));
      }
    }
  });

  std::size_t total = 0, stated = 0, norm = 0, lower_fail = 0, upper_fail = 0;
  for (const auto& rs : per_seed) {
    for (const auto& r : rs) {
      ++total;
      stated += r.holds();
      norm += r.norm_holds();
      lower_fail += r.lower > r.p_d + 1e-6;
      upper_fail += r.p_d > r.upper + 1e-6;
    }
  }
  return {total >= 50 && stated == total,
          fmt("%zu configurations (N in {1,2,4,8}, f in {f_w, f_w/2, 2 f_w}, 5 seeds): stated bound holds in "
              "%zu (lower violated %zu, upper violated %zu); norm-form bound holds in %zu",
              total, stated, lower_fail, upper_fail, norm)};
}

// ------------------------------------------------------------------ 5

Outcome case_study(std::size_t threads) {
  const std::size_t seeds = 5;
  std::vector<harness::CaseStudyReport> reports(seeds);
  harness::parallel_for(seeds, threads, [&](std::size_t s) {
    harness::ExperimentParams p;
    p.seed = s + 1;
    p.epsilons = {0.05};
    reports[s] = harness::run_case_study(p);
  });
  std::size_t passed = 0;
  std::string detail;
  for (const auto& r : reports) {
    const bool ok = r.student.p_snr > 5.0 && r.student_random_key.p_snr < 2.0 && r.control_student.p_snr < 2.0;
    passed += ok;
    detail += fmt(" seed %llu: teacher %.2f student %.2f random-key %.2f control %.2f [%s];",
                  static_cast<unsigned long long>(r.seed), r.teacher.p_snr, r.student.p_snr,
                  r.student_random_key.p_snr, r.control_student.p_snr, ok ? "ok" : "miss");
  }
  return {passed >= 4, fmt("%zu/5 seeds pass;", passed) + detail};
}

// ------------------------------------------------------------------ 6

Outcome ranking_map(std::size_t threads) {
  harness::ExperimentParams base;
  base.jobs = threads;
  auto a = base;
  a.epsilons = {0.1};
  a.ensemble_sizes = {1, 4};
  const auto ra = harness::run_single_watermark_experiment(a);
  auto b = base;
  b.epsilons = {0.05, 0.2};
  b.ensemble_sizes = {8};
  const auto rb = harness::run_single_watermark_experiment(b);

  const auto& n1 = ra.cell(0.1, 1);
  const auto& n4 = ra.cell(0.1, 4);
  const auto& lo = rb.cell(0.05, 8);
  const auto& hi = rb.cell(0.2, 8);
  const bool c1 = n1.map >= 0.95;
  const bool c2 = n4.map - n4.random.expected >= 0.3;
  const bool c3 = hi.map >= lo.map;
  return {c1 && c2 && c3,
          fmt("N=1 eps=0.1 mAP %.3f (>= 0.95 %s); N=4 eps=0.1 mAP %.3f vs random %.3f (gap %.3f, >= 0.3 %s); "
              "N=8 mAP %.3f at eps=0.05 -> %.3f at eps=0.2 (non-decreasing %s); %zu positives / %zu negatives "
              "per key",
              n1.map, c1 ? "yes" : "no", n4.map, n4.random.expected, n4.map - n4.random.expected,
              c2 ? "yes" : "no", lo.map, hi.map, c3 ? "yes" : "no", base.students_per_ensemble,
              base.students_per_ensemble * (base.watermarked_teachers - 1) + base.ground_truth_students)};
}

// ------------------------------------------------------------------ 7

Outcome multi_watermark(std::size_t threads) {
  harness::ExperimentParams p;
  p.jobs = threads;
  p.epsilons = {0.1};
  p.ensemble_sizes = {2};
  const auto r = harness::run_multi_watermark_experiment(p);
  bool pass = true;
  std::string detail;
  for (const auto& k : r.cell(0.1, 2).rankings) {
    const double ratio = k.mean_positive_snr / std::max(k.mean_cross_snr, 1e-300);
    pass = pass && ratio >= 2.5;
    detail += fmt(" key %zu: own %.2f cross %.2f ratio %.2f;", k.key_index, k.mean_positive_snr,
                  k.mean_cross_snr, ratio);
  }
  return {pass, "N=2, eps=0.1;" + detail};
}

// ------------------------------------------------------------------ 8

Outcome accuracy_gate(std::size_t threads) {
  const std::size_t seeds = 5;
  const std::vector<double> eps{0.025, 0.05, 0.1};
  std::vector<harness::ExperimentReport> reports(seeds);
  harness::parallel_for(seeds, threads, [&](std::size_t s) {
    harness::ExperimentParams p;
    p.seed = 800 + s;
    p.epsilons = eps;
    p.students_per_ensemble = 0;
    reports[s] = harness::run_single_watermark_experiment(p);
  });
  double plain = 0.0;
  for (const auto& r : reports) plain += r.unwatermarked_mean_accuracy;
  plain /= seeds;
  bool pass = true;
  std::string detail = fmt("unwatermarked mean %.4f;", plain);
  for (double e : eps) {
    // Teacher k at epsilon e, averaged over seeds.
    std::vector<double> sum, count;
    for (const auto& r : reports) {
      std::size_t k = 0;
      for (const auto& t : r.teachers) {
        if (!t.watermarked || t.epsilon != e) continue;
        if (sum.size() <= k) sum.resize(k + 1), count.resize(k + 1);
        sum[k] += t.accuracy;
        count[k] += 1;
        ++k;
      }
    }
    double worst = 1.0;
    for (std::size_t k = 0; k < sum.size(); ++k) worst = std::min(worst, sum[k] / count[k]);
    pass = pass && plain - worst <= 0.01;
    detail += fmt(" eps %.3g worst teacher %.4f (gap %.4f);", e, worst, plain - worst);
  }
  return {pass, detail};
}

// ------------------------------------------------------------------ 9

Outcome dilution() {
  harness::ExperimentParams p;
  p.epsilons = {0.1};
  const std::vector<std::size_t> sizes{1, 2, 4, 8};
  const auto rows = harness::amplitude_dilution(p, sizes);
  bool pass = true;
  std::string detail;
  for (const auto& r : rows) {
    if (r.ensemble_size == 1) {
      detail += fmt(" N=1 amplitude %.4f;", r.amplitude);
      continue;
    }
    const double dev = std::abs(r.ratio * static_cast<double>(r.ensemble_size) - 1.0);
    pass = pass && dev <= 0.15;
    detail += fmt(" N=%zu ratio %.4f vs 1/N %.4f (dev %.1f%%);", r.ensemble_size, r.ratio,
                  1.0 / static_cast<double>(r.ensemble_size), 100.0 * dev);
  }
  return {pass, detail};
}

}  // namespace

int main() {
  const std::size_t threads = jobs();
  struct Criterion {
    int id;
    const char* name;
    double limit_s;  // runtime budget; 0 for none
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "modified softmax stays on the simplex", 5, simplex_suite},
      {2, "analytic gradients match finite differences", 10, gradient_suite},
      {3, "periodogram oracle", 30, periodogram_oracle},
      {4, "periodogram bound verifier", 600, [&] { return bound_verifier(threads); }},
      {5, "case study", 300, [&] { return case_study(threads); }},
      {6, "ranking mAP", 1800, [&] { return ranking_map(threads); }},
      {7, "multi-watermark separation", 600, [&] { return multi_watermark(threads); }},
      {8, "accuracy gate", 0, [&] { return accuracy_gate(threads); }},
      {9, "amplitude dilution", 0, dilution},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0 && secs > c.limit_s) {
      o.pass = false;
      o.detail += fmt(" over the %.0f s budget", c.limit_s);
    }
    failed += !o.pass;
    std::printf("criterion %d %s: %s (%.1f s) %s\n", c.id, o.pass ? "PASS" : "FAIL", c.name, secs,
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
