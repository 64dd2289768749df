#include "sinemark/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "sinemark/error.hpp"

namespace sinemark::data {

std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::full: return "full";
    case SplitTag::teacher: return "teacher";
    case SplitTag::student: return "student";
    case SplitTag::test: return "test";
    case SplitTag::query: return "query";
  }
  return "full";
}

SplitTag split_tag_from_string(const std::string& s) {
  if (s == "full") return SplitTag::full;
  if (s == "teacher") return SplitTag::teacher;
  if (s == "student") return SplitTag::student;
  if (s == "test") return SplitTag::test;
  if (s == "query") return SplitTag::query;
  throw ConfigError("split_tag", "unknown split tag '" + s + "'");
}

Dataset Dataset::subset(std::span<const std::size_t> indices, SplitTag new_tag) const {
  Dataset out;
  out.class_count = class_count;
  out.tag = new_tag;
  out.seed = seed;
  out.sigma = sigma;
  out.features.resize(static_cast<Eigen::Index>(indices.size()), features.cols());
  if (labels) out.labels.emplace(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= size()) throw InvalidInput("subset index out of range");
    out.features.row(static_cast<Eigen::Index>(r)) =
        features.row(static_cast<Eigen::Index>(indices[r]));
    if (labels) (*out.labels)[r] = (*labels)[indices[r]];
  }
  return out;
}

Dataset Dataset::without_labels() const {
  Dataset out = *this;
  out.labels.reset();
  return out;
}

Dataset make_blobs(const BlobSpec& spec) {
  if (spec.classes < 2) throw InvalidInput("need at least two classes");
  if (spec.dim < 2) throw InvalidInput("need at least two feature dimensions");
  if (spec.per_class == 0) throw InvalidInput("per-class count must be positive");
  if (!(spec.sigma >= 0.0) || !std::isfinite(spec.sigma)) {
    throw InvalidInput("cluster spread must be finite and >= 0");
  }
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> center_dist(0.2, 0.8);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const auto m = static_cast<Eigen::Index>(spec.classes);
  const auto n = static_cast<Eigen::Index>(spec.dim);
  Matrix centers(m, n);
  for (Eigen::Index c = 0; c < m; ++c) {
    for (Eigen::Index d = 0; d < n; ++d) centers(c, d) = center_dist(rng);
  }

  Dataset ds;
  ds.class_count = spec.classes;
  ds.seed = spec.seed;
  ds.sigma = spec.sigma;
  ds.features.resize(m * static_cast<Eigen::Index>(spec.per_class), n);
  ds.labels.emplace();
  ds.labels->reserve(static_cast<std::size_t>(ds.features.rows()));
  Eigen::Index row = 0;
  for (Eigen::Index c = 0; c < m; ++c) {
    for (std::size_t k = 0; k < spec.per_class; ++k, ++row) {
      for (Eigen::Index d = 0; d < n; ++d) {
        ds.features(row, d) = centers(c, d) + spec.sigma * gauss(rng);
      }
      ds.labels->push_back(static_cast<int>(c));
    }
  }

  for (Eigen::Index d = 0; d < n; ++d) {
    const double lo = ds.features.col(d).minCoeff();
    const double hi = ds.features.col(d).maxCoeff();
    if (hi > lo) {
      ds.features.col(d) = (ds.features.col(d).array() - lo) / (hi - lo);
    } else {
      ds.features.col(d).setConstant(0.5);  // point clusters collapse a feature
    }
  }
  return ds;
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

Splits split(const Dataset& dataset, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw InvalidInput("split fractions must be >= 0");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidInput("split fractions must sum to 1");

  const auto n = dataset.size();
  const auto idx = shuffled_indices(n, seed);
  const auto n_teacher = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
  const auto n_student = std::min(
      n - n_teacher, static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n))));
  const auto n_test = n - n_teacher - n_student;
  if (n_teacher == 0 || n_student == 0 || n_test == 0) {
    throw InvalidInput("split produces an empty partition");
  }
  std::span<const std::size_t> all(idx);
  return {dataset.subset(all.subspan(0, n_teacher), SplitTag::teacher),
          dataset.subset(all.subspan(n_teacher, n_student), SplitTag::student),
          dataset.subset(all.subspan(n_teacher + n_student), SplitTag::test)};
}

Dataset sample_queries(const Dataset& dataset, std::size_t count, std::uint64_t seed) {
  if (count > dataset.size()) {
    throw InvalidInput("cannot sample " + std::to_string(count) + " queries from " +
                       std::to_string(dataset.size()) + " points");
  }
  auto idx = shuffled_indices(dataset.size(), seed);
  idx.resize(count);
  return dataset.subset(idx, SplitTag::query);
}

io::Json metadata_json(const Dataset& ds) {
  return {{"m", ds.class_count}, {"n", ds.dim()},         {"seed", ds.seed},
          {"sigma", ds.sigma},   {"split_tag", to_string(ds.tag)}, {"rows", ds.size()},
          {"labeled", ds.labeled()}};
}

std::string to_csv(const Dataset& ds) {
  std::string out;
  for (std::size_t d = 0; d < ds.dim(); ++d) out += "x" + std::to_string(d) + ",";
  out += "label\n";
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (std::size_t d = 0; d < ds.dim(); ++d) {
      out += io::format17(ds.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)));
      out += ',';
    }
    if (ds.labels) out += std::to_string((*ds.labels)[r]);
    out += '\n';
  }
  return out;
}

void save_csv(const Dataset& ds, const std::filesystem::path& path) {
  io::write_text(path, to_csv(ds));
  io::save_json(path.string() + ".meta.json", metadata_json(ds));
}

Dataset load_csv(const std::filesystem::path& path) {
  const auto meta = io::load_json(path.string() + ".meta.json");
  Dataset ds;
  try {
    ds.class_count = meta.at("m").get<std::size_t>();
    ds.seed = meta.value("seed", std::uint64_t{0});
    ds.sigma = meta.value("sigma", 0.0);
    ds.tag = split_tag_from_string(meta.value("split_tag", std::string("full")));
  } catch (const io::Json::exception& e) {
    throw ConfigError(path.string() + ".meta.json", e.what());
  }
  const auto n = meta.at("n").get<std::size_t>();

  std::istringstream in(io::read_text(path));
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + ":1", "missing header");
  std::vector<double> values;
  std::vector<int> labels;
  bool any_label = false;
  bool any_missing = false;
  std::size_t rows = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::size_t start = 0;
    for (std::size_t d = 0; d <= n; ++d) {
      const auto comma = line.find(',', start);
      const bool last = d == n;
      if (!last && comma == std::string::npos) {
        throw ConfigError(path.string() + ":" + std::to_string(line_no), "too few columns");
      }
      const std::string cell =
          line.substr(start, last ? std::string::npos : comma - start);
      try {
        if (last) {
          if (cell.empty()) {
            any_missing = true;
          } else {
            labels.push_back(std::stoi(cell));
            any_label = true;
          }
        } else {
          values.push_back(std::stod(cell));
        }
      } catch (const std::exception&) {
        throw ConfigError(path.string() + ":" + std::to_string(line_no),
                          "cannot parse '" + cell + "'");
      }
      start = comma + 1;
    }
    ++rows;
  }
  if (any_label && any_missing) {
    throw ConfigError(path.string(), "label column is only partially filled");
  }
  ds.features = Eigen::Map<const Matrix>(values.data(), static_cast<Eigen::Index>(rows),
                                         static_cast<Eigen::Index>(n));
  if (any_label) {
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= ds.class_count) {
        throw ConfigError(path.string(), "label " + std::to_string(y) + " out of range");
      }
    }
    ds.labels = std::move(labels);
  }
  return ds;
}

}  // namespace sinemark::data
