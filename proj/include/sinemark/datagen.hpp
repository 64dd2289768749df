#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sinemark/io.hpp"
#include "sinemark/types.hpp"

namespace sinemark::data {

enum class SplitTag { full, teacher, student, test, query };

std::string to_string(SplitTag tag);
SplitTag split_tag_from_string(const std::string& s);

struct Dataset {
  Matrix features;                        // L x n, entries in [0, 1]
  std::optional<std::vector<int>> labels;  // class indices < class_count
  std::size_t class_count = 0;
  SplitTag tag = SplitTag::full;
  std::uint64_t seed = 0;
  double sigma = 0.0;

  std::size_t size() const noexcept { return static_cast<std::size_t>(features.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(features.cols()); }
  bool labeled() const noexcept { return labels.has_value(); }
  std::span<const int> label_span() const {
    return labels ? std::span<const int>(*labels) : std::span<const int>();
  }

  /// Rows `indices` in the given order; labels follow.
  Dataset subset(std::span<const std::size_t> indices, SplitTag new_tag) const;
  Dataset without_labels() const;
};

struct BlobSpec {
  std::size_t classes = 10;
  std::size_t dim = 32;
  std::size_t per_class = 1000;
  double sigma = 0.12;
  std::uint64_t seed = 1;
};

/// Gaussian clusters around centers drawn uniformly from [0.2, 0.8]^n,
/// then min-max normalized per feature to [0, 1].
Dataset make_blobs(const BlobSpec& spec);

struct Splits {
  Dataset teacher;
  Dataset student;
  Dataset test;
};

/// Seeded shuffle, then cut into (teacher, student, test) by `fractions`.
/// Throws InvalidInput when fractions do not sum to 1 or a split is empty.
Splits split(const Dataset& dataset, std::array<double, 3> fractions, std::uint64_t seed);

/// Uniform sample without replacement, in sampled order.
Dataset sample_queries(const Dataset& dataset, std::size_t count, std::uint64_t seed);

/// CSV with header x0..x{n-1},label (label empty when unlabeled), features
/// at 17 significant digits, plus `<path>.meta.json` holding
/// {m, n, seed, sigma, split_tag}.
void save_csv(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_csv(const std::filesystem::path& path);
std::string to_csv(const Dataset& dataset);

io::Json metadata_json(const Dataset& dataset);

}  // namespace sinemark::data
