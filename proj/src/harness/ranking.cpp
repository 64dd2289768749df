#include <algorithm>
#include <atomic>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "sinemark/harness.hpp"
#include "sinemark/stats.hpp"

namespace sinemark::harness {

void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  if (count == 0) return;
  jobs = std::clamp<std::size_t>(jobs, 1, count);
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_index = std::numeric_limits<std::size_t>::max();
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (i < failed_index) {
          failed_index = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(jobs);
  for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

double average_precision(std::span<const double> scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw InvalidInput("scores and labels differ in length");
  const auto total_pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  if (total_pos == 0) throw UndefinedMetric("average precision needs at least one positive");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (positive[order[k]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  }
  return sum / static_cast<double>(total_pos);
}

double expected_random_ap(std::size_t positives, std::size_t negatives) {
  if (positives == 0) throw UndefinedMetric("average precision needs at least one positive");
  const double p = static_cast<double>(positives);
  const double t = p + static_cast<double>(negatives);
  if (negatives == 0) return 1.0;
  double harmonic = 0.0;
  for (std::size_t k = 1; k <= positives + negatives; ++k) harmonic += 1.0 / static_cast<double>(k);
  return (p - 1.0) / (t - 1.0) + (harmonic / t) * (t - p) / (t - 1.0);
}

RandomBaseline random_baseline(std::size_t positives, std::size_t negatives, std::size_t resamples,
                               std::uint64_t seed) {
  RandomBaseline b;
  b.expected = expected_random_ap(positives, negatives);
  b.resamples = resamples;
  if (resamples == 0) {
    b.mean = b.expected;
    return b;
  }
  std::vector<bool> labels(positives + negatives, false);
  std::fill(labels.begin(), labels.begin() + static_cast<long>(positives), true);
  const std::vector<double> scores(labels.size(), 0.0);  // ties keep the shuffled order
  std::mt19937_64 rng(seed);
  std::vector<double> aps;
  aps.reserve(resamples);
  for (std::size_t r = 0; r < resamples; ++r) {
    std::shuffle(labels.begin(), labels.end(), rng);
    aps.push_back(average_precision(scores, labels));
  }
  b.mean = stats::mean(aps);
  b.stddev = stats::stddev(aps);
  return b;
}

double average_precision(const std::vector<ScoredStudent>& students) {
  std::vector<double> scores;
  std::vector<bool> labels;
  for (const auto& s : students) {
    scores.push_back(s.p_snr);
    labels.push_back(s.positive);
  }
  return average_precision(scores, labels);
}

std::string ranking_csv(const std::vector<ScoredStudent>& students) {
  std::string out = "student_id,is_positive,p_snr\n";
  for (const auto& s : students) {
    out += s.id + "," + (s.positive ? "1" : "0") + "," + io::format17(s.p_snr) + "\n";
  }
  return out;
}

}  // namespace sinemark::harness
