#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <numeric>
#include <random>

#include "sinemark/harness.hpp"
#include "sinemark/random.hpp"
#include "sinemark/stats.hpp"

namespace sinemark::harness {

using ModelPtr = std::shared_ptr<const nnet::Model>;

// ------------------------------------------------------------- params

void ExperimentParams::validate() const {
  if (data.classes < 2 || data.dim < 2 || data.per_class == 0) {
    throw ConfigError("data", "need >= 2 classes, >= 2 dimensions and a positive per-class count");
  }
  if (watermarked_teachers == 0) throw ConfigError("watermarked_teachers", "must be >= 1");
  if (ensemble_sizes.empty()) throw ConfigError("ensemble_sizes", "must not be empty");
  for (auto n : ensemble_sizes) {
    if (n == 0) throw ConfigError("ensemble_sizes", "sizes must be >= 1");
  }
  if (epsilons.empty()) throw ConfigError("epsilons", "must not be empty");
  for (double e : epsilons) {
    if (!(e >= 0.0 && e <= wm::kDefaultEpsilonCap)) {
      throw ConfigError("epsilons", "each epsilon must lie in [0, " +
                                        io::format17(wm::kDefaultEpsilonCap) + "]");
    }
  }
  if (target_class >= data.classes) throw ConfigError("target_class", "must be < data.classes");
  if (!(periods > 0.0)) throw ConfigError("periods", "must be > 0");
  if (frequency && !(*frequency > 0.0)) throw ConfigError("frequency", "must be > 0");
  if (!(frequency_multiplier > 0.0)) throw ConfigError("frequency_multiplier", "must be > 0");
  if (!(accuracy_tolerance >= 0.0)) throw ConfigError("accuracy_tolerance", "must be >= 0");
  if (jobs == 0) throw ConfigError("jobs", "must be >= 1");
  if (query_count && *query_count < spectrum::kMinFitPoints) {
    throw ConfigError("query_count", "must be >= 3");
  }
  teacher_train.validate();
  student_train.validate();
}

io::Json to_json(const ExperimentParams& p) {
  io::Json j;
  j["seed"] = p.seed;
  j["jobs"] = p.jobs;
  j["data"] = {{"classes", p.data.classes},
               {"dim", p.data.dim},
               {"per_class", p.data.per_class},
               {"sigma", p.data.sigma}};
  j["fractions"] = p.fractions;
  j["teacher_model"] = nnet::to_json(p.teacher_model);
  j["student_model"] = nnet::to_json(p.student_model);
  j["teacher_train"] = nnet::to_json(p.teacher_train);
  j["student_train"] = nnet::to_json(p.student_train);
  j["watermarked_teachers"] = p.watermarked_teachers;
  j["unwatermarked_teachers"] = p.unwatermarked_teachers;
  j["students_per_ensemble"] = p.students_per_ensemble;
  j["ground_truth_students"] = p.ground_truth_students;
  j["ensemble_sizes"] = p.ensemble_sizes;
  j["epsilons"] = p.epsilons;
  j["target_class"] = p.target_class;
  j["periods"] = p.periods;
  j["frequency"] = p.frequency ? io::Json(*p.frequency) : io::Json(nullptr);
  j["frequency_multiplier"] = p.frequency_multiplier;
  j["extraction"] = spectrum::to_json(p.extraction);
  j["auto_filter"] = p.auto_filter;
  j["query_count"] = p.query_count ? io::Json(*p.query_count) : io::Json(nullptr);
  j["accuracy_tolerance"] = p.accuracy_tolerance;
  j["random_resamples"] = p.random_resamples;
  j["write_periodograms"] = p.write_periodograms;
  return j;
}

ExperimentParams experiment_params_from_json(const io::Json& j, ExperimentParams p) {
  io::require_known_fields(j,
                 {"seed", "jobs", "data", "fractions", "teacher_model", "student_model",
                  "teacher_train", "student_train", "watermarked_teachers", "unwatermarked_teachers",
                  "students_per_ensemble", "ground_truth_students", "ensemble_sizes", "epsilons",
                  "target_class", "periods", "frequency", "frequency_multiplier", "extraction",
                  "auto_filter", "query_count", "accuracy_tolerance", "random_resamples",
                  "write_periodograms", "sweep"},
                 "");
  std::string field;
  try {
    field = "seed";
    p.seed = j.value("seed", p.seed);
    field = "jobs";
    p.jobs = j.value("jobs", p.jobs);
    if (j.contains("data")) {
      field = "data";
      const auto& d = j.at("data");
      io::require_known_fields(d, {"classes", "dim", "per_class", "sigma"}, "data");
      p.data.classes = d.value("classes", p.data.classes);
      p.data.dim = d.value("dim", p.data.dim);
      p.data.per_class = d.value("per_class", p.data.per_class);
      p.data.sigma = d.value("sigma", p.data.sigma);
    }
    field = "fractions";
    if (j.contains("fractions")) p.fractions = j.at("fractions").get<std::array<double, 3>>();
    field = "teacher_model";
    if (j.contains("teacher_model")) p.teacher_model = nnet::model_spec_from_json(j.at("teacher_model"), p.teacher_model);
    field = "student_model";
    if (j.contains("student_model")) p.student_model = nnet::model_spec_from_json(j.at("student_model"), p.student_model);
    field = "teacher_train";
    if (j.contains("teacher_train")) p.teacher_train = nnet::train_config_from_json(j.at("teacher_train"), p.teacher_train);
    field = "student_train";
    if (j.contains("student_train")) p.student_train = nnet::train_config_from_json(j.at("student_train"), p.student_train);
    field = "watermarked_teachers";
    p.watermarked_teachers = j.value(field, p.watermarked_teachers);
    field = "unwatermarked_teachers";
    p.unwatermarked_teachers = j.value(field, p.unwatermarked_teachers);
    field = "students_per_ensemble";
    p.students_per_ensemble = j.value(field, p.students_per_ensemble);
    field = "ground_truth_students";
    p.ground_truth_students = j.value(field, p.ground_truth_students);
    field = "ensemble_sizes";
    if (j.contains(field)) p.ensemble_sizes = j.at(field).get<std::vector<std::size_t>>();
    field = "epsilons";
    if (j.contains(field)) p.epsilons = j.at(field).get<std::vector<double>>();
    field = "target_class";
    p.target_class = j.value(field, p.target_class);
    field = "periods";
    p.periods = j.value(field, p.periods);
    field = "frequency";
    if (j.contains(field)) {
      if (j.at(field).is_null()) p.frequency.reset();
      else p.frequency = j.at(field).get<double>();
    }
    field = "frequency_multiplier";
    p.frequency_multiplier = j.value(field, p.frequency_multiplier);
    field = "extraction";
    if (j.contains(field)) p.extraction = spectrum::extraction_params_from_json(j.at(field));
    field = "auto_filter";
    p.auto_filter = j.value(field, p.auto_filter);
    field = "query_count";
    if (j.contains(field)) {
      if (j.at(field).is_null()) p.query_count.reset();
      else p.query_count = j.at(field).get<std::size_t>();
    }
    field = "accuracy_tolerance";
    p.accuracy_tolerance = j.value(field, p.accuracy_tolerance);
    field = "random_resamples";
    p.random_resamples = j.value(field, p.random_resamples);
    field = "write_periodograms";
    p.write_periodograms = j.value(field, p.write_periodograms);
  } catch (const io::Json::exception& e) {
    throw ConfigError(field, e.what());
  }
  p.validate();
  return p;
}

// -------------------------------------------------------------- world

namespace {

std::string tag(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::uint64_t stream(std::uint64_t seed, const std::string& id) {
  return derive_seed(seed, io::fnv1a(id));
}

struct World {
  data::Splits splits;
  data::Dataset queries;
  std::vector<wm::WatermarkKey> keys;
  io::Json frequency_rule;
};

template <class Fn>
auto with_context(const std::string& id, Fn&& fn) {
  try {
    return fn();
  } catch (const TrainingFailure& e) {
    throw TrainingFailure(e.epoch(), id + ": " + e.what());
  }
}

World make_world(const ExperimentParams& p) {
  p.validate();
  World w;
  data::BlobSpec spec = p.data;
  spec.seed = stream(p.seed, "data");
  w.splits = data::split(data::make_blobs(spec), p.fractions, stream(p.seed, "split"));
  w.queries = p.query_count ? data::sample_queries(w.splits.student, *p.query_count, stream(p.seed, "queries"))
                            : w.splits.student;

  std::vector<double> freqs;
  for (std::size_t k = 0; k < p.watermarked_teachers; ++k) {
    const auto base = wm::WatermarkKey::random(p.data.dim, 1.0, p.target_class,
                                               stream(p.seed, "key" + std::to_string(k)));
    double f = p.frequency ? *p.frequency
                           : wm::rescaled_frequency(w.splits.teacher.features, base.projection(), p.periods);
    f *= p.frequency_multiplier;
    w.keys.push_back(base.with_frequency(f));
    freqs.push_back(f);
  }
  require_distinct_keys(w.keys);
  w.frequency_rule = {{"rule", p.frequency ? "absolute" : "2*pi*periods/(q97.5(v.x) - q2.5(v.x)) over the teacher half"},
                      {"periods", p.periods},
                      {"multiplier", p.frequency_multiplier},
                      {"frequencies", freqs}};
  return w;
}

struct TeacherSet {
  std::vector<std::vector<ModelPtr>> watermarked;  // [epsilon][key]
  std::vector<ModelPtr> plain;
  std::vector<TeacherRecord> records;
  double plain_mean = 0.0;
  std::vector<std::string> violations;
};

TeacherSet train_teachers(const ExperimentParams& p, const World& w, std::size_t plain_count) {
  struct Job {
    std::string id;
    std::optional<std::size_t> eps_index;
    std::size_t key = 0;
  };
  std::vector<Job> jobs;
  for (std::size_t u = 0; u < plain_count; ++u) jobs.push_back({"teacher_plain" + std::to_string(u), std::nullopt, 0});
  for (std::size_t e = 0; e < p.epsilons.size(); ++e) {
    for (std::size_t k = 0; k < w.keys.size(); ++k) {
      jobs.push_back({"teacher_wm" + std::to_string(k) + "_eps" + tag(p.epsilons[e]), e, k});
    }
  }
  std::vector<ModelPtr> models(jobs.size());
  std::vector<double> acc(jobs.size());
  parallel_for(jobs.size(), p.jobs, [&](std::size_t i) {
    const auto& job = jobs[i];
    nnet::TrainConfig cfg = p.teacher_train;
    cfg.loss = job.eps_index ? nnet::LossKind::watermarked_ce : nnet::LossKind::cross_entropy;
    // Watermarked teachers share their initialization across epsilons.
    cfg.seed = stream(p.seed, job.eps_index ? "teacher_wm" + std::to_string(job.key) : job.id);
    std::optional<wm::WatermarkConfig> wmc;
    if (job.eps_index) wmc.emplace(w.keys[job.key], p.epsilons[*job.eps_index]);
    auto model = with_context(job.id, [&] { return nnet::train_teacher(w.splits.teacher, cfg, p.teacher_model, wmc); });
    acc[i] = nnet::accuracy(model, w.splits.test);
    if (!p.out_dir.empty()) nnet::save_checkpoint(model, p.out_dir / "checkpoints" / (job.id + ".json"));
    models[i] = std::make_shared<const nnet::Model>(std::move(model));
  });

  TeacherSet t;
  t.watermarked.assign(p.epsilons.size(), std::vector<ModelPtr>(w.keys.size()));
  std::vector<double> plain_acc;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (jobs[i].eps_index) {
      t.watermarked[*jobs[i].eps_index][jobs[i].key] = models[i];
    } else {
      t.plain.push_back(models[i]);
      plain_acc.push_back(acc[i]);
    }
  }
  t.plain_mean = stats::mean(plain_acc);
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    TeacherRecord r;
    r.id = jobs[i].id;
    r.accuracy = acc[i];
    if (jobs[i].eps_index) {
      r.watermarked = true;
      r.epsilon = p.epsilons[*jobs[i].eps_index];
      r.frequency = w.keys[jobs[i].key].frequency();
      if (!plain_acc.empty()) {
        r.gap = t.plain_mean - acc[i];
        r.relative_gap = t.plain_mean > 0.0 ? r.gap / t.plain_mean : 0.0;
        r.gate_pass = r.gap <= p.accuracy_tolerance;
        if (!r.gate_pass) {
          t.violations.push_back(r.id + ": accuracy " + io::format17(acc[i]) + " is " +
                                 io::format17(r.gap) + " below the unwatermarked mean");
        }
      }
    }
    t.records.push_back(r);
  }
  return t;
}

// One ensemble and the students distilled from it.
struct Group {
  std::string id;
  std::vector<ModelPtr> members;
  std::vector<bool> has_key;
};

struct Cell {
  double epsilon = 0.0;
  std::size_t ensemble_size = 0;
  std::vector<Group> groups;
};

struct StudentOut {
  std::string id;
  std::size_t cell = 0;
  std::optional<std::size_t> group;  // none for ground-truth students
  Matrix outputs;
  double accuracy = 0.0;
};

spectrum::ExtractionParams extraction_for(const ExperimentParams& p, std::size_t ensemble_size) {
  auto ex = p.extraction;
  if (p.auto_filter) {
    const auto side = ex.filter.side;
    const auto ref = ex.filter.reference;
    ex.filter = ensemble_size == 1 ? spectrum::FilterPolicy::single_teacher() : spectrum::FilterPolicy::ensemble();
    ex.filter.side = side;
    ex.filter.reference = ref;
  }
  return ex;
}

std::vector<CellReport> run_students(const ExperimentParams& p, const World& w, const std::vector<Cell>& cells,
                                     double& gt_accuracy) {
  struct Job {
    std::string id;
    std::string seed_id;
    std::size_t cell = 0;
    std::optional<std::size_t> group;
  };
  std::vector<Job> jobs;
  for (std::size_t g = 0; g < p.ground_truth_students; ++g) {
    jobs.push_back({"gt" + std::to_string(g), "gt" + std::to_string(g), 0, std::nullopt});
  }
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::size_t g = 0; g < cells[c].groups.size(); ++g) {
      for (std::size_t s = 0; s < p.students_per_ensemble; ++s) {
        const std::string base = "N" + std::to_string(cells[c].ensemble_size) + "_" + cells[c].groups[g].id +
                                  "_s" + std::to_string(s);
        jobs.push_back({"eps" + tag(cells[c].epsilon) + "_" + base, base, c, g});
      }
    }
  }

  std::vector<StudentOut> outs(jobs.size());
  parallel_for(jobs.size(), p.jobs, [&](std::size_t i) {
    const auto& job = jobs[i];
    nnet::TrainConfig cfg = p.student_train;
    cfg.seed = stream(p.seed, "student_" + job.seed_id);
    auto model = with_context(job.id, [&] {
      if (!job.group) {
        cfg.loss = nnet::LossKind::cross_entropy;
        return nnet::train_teacher(w.splits.student, cfg, p.student_model, std::nullopt);
      }
      const nnet::Ensemble ens(cells[job.cell].groups[*job.group].members);
      return nnet::distill(ens, w.splits.student, cfg, p.student_model);
    });
    outs[i].id = job.id;
    outs[i].cell = job.cell;
    outs[i].group = job.group;
    outs[i].outputs = model.predict(w.queries.features);
    outs[i].accuracy = nnet::accuracy(model, w.splits.test);
    if (!p.out_dir.empty()) nnet::save_checkpoint(model, p.out_dir / "checkpoints" / (job.id + ".json"));
  });

  std::vector<double> gt_acc;
  for (const auto& o : outs) {
    if (!o.group) gt_acc.push_back(o.accuracy);
  }
  gt_accuracy = stats::mean(gt_acc);

  // Score every (cell, key, student) triple.
  struct ScoreJob {
    std::size_t cell, key, student;
  };
  std::vector<ScoreJob> sjobs;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::size_t k = 0; k < w.keys.size(); ++k) {
      for (std::size_t s = 0; s < outs.size(); ++s) {
        if (!outs[s].group || outs[s].cell == c) sjobs.push_back({c, k, s});
      }
    }
  }
  std::vector<ScoredStudent> scored(sjobs.size());
  parallel_for(sjobs.size(), p.jobs, [&](std::size_t i) {
    const auto& sj = sjobs[i];
    const auto& cell = cells[sj.cell];
    const auto& out = outs[sj.student];
    ScoredStudent s;
    s.id = out.id;
    s.positive = out.group && cell.groups[*out.group].has_key[sj.key];
    try {
      const auto ex = spectrum::extract_signal(out.outputs, w.queries.features, w.keys[sj.key],
                                               extraction_for(p, cell.ensemble_size), w.queries.label_span());
      s.p_snr = ex.report.p_snr_infinite ? std::numeric_limits<double>::infinity() : ex.report.p_snr;
      s.survivors = ex.report.survivors;
      if (!p.out_dir.empty() && p.write_periodograms) {
        io::write_text(p.out_dir / "cells" / ("eps" + tag(cell.epsilon) + "_N" + std::to_string(cell.ensemble_size)) /
                           "periodograms" / ("key" + std::to_string(sj.key) + "_" + out.id + ".csv"),
                       spectrum::periodogram_csv(ex.spectrum));
      }
    } catch (const InsufficientData& e) {
      s.p_snr = 0.0;  // nothing survives the filter: no evidence of a signal
      s.survivors = e.available();
    }
    scored[i] = std::move(s);
  });

  std::vector<CellReport> reports;
  std::size_t cursor = 0;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    CellReport cr;
    cr.epsilon = cells[c].epsilon;
    cr.ensemble_size = cells[c].ensemble_size;
    std::vector<double> aps, pos_all, acc;
    for (const auto& o : outs) {
      if (o.group && o.cell == c) acc.push_back(o.accuracy);
    }
    cr.mean_student_accuracy = stats::mean(acc);
    for (std::size_t k = 0; k < w.keys.size(); ++k) {
      KeyRanking kr;
      kr.key_index = k;
      std::vector<double> pos, neg, cross;
      while (cursor < sjobs.size() && sjobs[cursor].cell == c && sjobs[cursor].key == k) {
        const auto& s = scored[cursor];
        const bool distilled = outs[sjobs[cursor].student].group.has_value();
        if (std::isfinite(s.p_snr)) {
          (s.positive ? pos : neg).push_back(s.p_snr);
          if (!s.positive && distilled) cross.push_back(s.p_snr);
        }
        kr.students.push_back(s);
        ++cursor;
      }
      kr.ap = average_precision(kr.students);
      kr.mean_positive_snr = stats::mean(pos);
      kr.mean_negative_snr = stats::mean(neg);
      kr.mean_cross_snr = stats::mean(cross);
      aps.push_back(kr.ap);
      pos_all.insert(pos_all.end(), pos.begin(), pos.end());
      if (!p.out_dir.empty()) {
        io::write_text(p.out_dir / "cells" / ("eps" + tag(cr.epsilon) + "_N" + std::to_string(cr.ensemble_size)) /
                           ("ranking_key" + std::to_string(k) + ".csv"),
                       ranking_csv(kr.students));
      }
      cr.rankings.push_back(std::move(kr));
    }
    cr.map = stats::mean(aps);
    cr.map_std = stats::stddev(aps);
    cr.mean_positive_snr = stats::mean(pos_all);
    cr.std_positive_snr = stats::stddev(pos_all);
    const auto& first = cr.rankings.front().students;
    const auto positives = static_cast<std::size_t>(
        std::count_if(first.begin(), first.end(), [](const ScoredStudent& s) { return s.positive; }));
    cr.random = random_baseline(positives, first.size() - positives, p.random_resamples,
                                stream(p.seed, "random_baseline"));
    reports.push_back(std::move(cr));
  }
  return reports;
}

void finish(const ExperimentParams& p, ExperimentReport& r) {
  if (p.out_dir.empty()) return;
  io::save_json(p.out_dir / "config.json", to_json(p));
  io::save_json(p.out_dir / "summary.json", to_json(r));
}

ExperimentReport base_report(const std::string& kind, const ExperimentParams& p, const World& w,
                             const TeacherSet& t) {
  ExperimentReport r;
  r.kind = kind;
  r.seed = p.seed;
  r.teachers = t.records;
  r.unwatermarked_mean_accuracy = t.plain_mean;
  r.gate_violations = t.violations;
  r.frequency_rule = w.frequency_rule;
  if (!p.out_dir.empty()) {
    for (std::size_t k = 0; k < w.keys.size(); ++k) {
      wm::save_key(w.keys[k], p.out_dir / "keys" / ("key" + std::to_string(k) + ".json"));
    }
  }
  return r;
}

}  // namespace

// -------------------------------------------------------- experiments

ExperimentReport run_single_watermark_experiment(const ExperimentParams& p) {
  const auto w = make_world(p);
  std::size_t max_n = *std::max_element(p.ensemble_sizes.begin(), p.ensemble_sizes.end());
  if (max_n - 1 > p.unwatermarked_teachers) {
    throw ConfigError("ensemble_sizes", "N - 1 exceeds the number of unwatermarked teachers");
  }
  const auto t = train_teachers(p, w, p.unwatermarked_teachers);
  auto r = base_report("single", p, w, t);
  if (p.students_per_ensemble == 0) {
    finish(p, r);
    return r;
  }

  std::vector<Cell> cells;
  for (std::size_t e = 0; e < p.epsilons.size(); ++e) {
    for (auto n : p.ensemble_sizes) {
      Cell c{p.epsilons[e], n, {}};
      for (std::size_t k = 0; k < w.keys.size(); ++k) {
        Group g;
        g.id = "key" + std::to_string(k);
        g.members.push_back(t.watermarked[e][k]);
        // Same companions for every epsilon so amplitude comparisons are paired.
        std::vector<std::size_t> pool(t.plain.size());
        std::iota(pool.begin(), pool.end(), std::size_t{0});
        std::mt19937_64 rng(stream(p.seed, "ensemble_N" + std::to_string(n) + "_key" + std::to_string(k)));
        std::shuffle(pool.begin(), pool.end(), rng);
        for (std::size_t j = 0; j + 1 < n; ++j) g.members.push_back(t.plain[pool[j]]);
        g.has_key.assign(w.keys.size(), false);
        g.has_key[k] = true;
        c.groups.push_back(std::move(g));
      }
      cells.push_back(std::move(c));
    }
  }
  r.cells = run_students(p, w, cells, r.ground_truth_student_accuracy);
  finish(p, r);
  return r;
}

ExperimentReport run_mixed_loss_experiment(ExperimentParams p) {
  p.student_train.loss = nnet::LossKind::kl_ce;
  auto r = run_single_watermark_experiment(p);
  r.kind = "mixed";
  finish(p, r);
  return r;
}

ExperimentReport run_multi_watermark_experiment(const ExperimentParams& p) {
  const auto w = make_world(p);
  const std::size_t k_count = w.keys.size();
  for (auto n : p.ensemble_sizes) {
    if (n > k_count) throw ConfigError("ensemble_sizes", "N exceeds the number of watermarked teachers");
  }
  const auto t = train_teachers(p, w, p.unwatermarked_teachers);
  auto r = base_report("multi", p, w, t);
  if (p.students_per_ensemble == 0) {
    finish(p, r);
    return r;
  }
  std::vector<Cell> cells;
  for (std::size_t e = 0; e < p.epsilons.size(); ++e) {
    for (auto n : p.ensemble_sizes) {
      Cell c{p.epsilons[e], n, {}};
      for (std::size_t g0 = 0; g0 < k_count; ++g0) {
        Group g;
        g.id = "ens" + std::to_string(g0);
        g.has_key.assign(k_count, false);
        for (std::size_t j = 0; j < n; ++j) {
          const auto k = (g0 + j) % k_count;
          g.members.push_back(t.watermarked[e][k]);
          g.has_key[k] = true;
        }
        c.groups.push_back(std::move(g));
      }
      cells.push_back(std::move(c));
    }
  }
  r.cells = run_students(p, w, cells, r.ground_truth_student_accuracy);
  finish(p, r);
  return r;
}

void require_distinct_keys(std::span<const wm::WatermarkKey> keys) {
  for (std::size_t i = 0; i < keys.size(); ++i) {
    for (std::size_t j = i + 1; j < keys.size(); ++j) {
      if (keys[i].projection() == keys[j].projection() && keys[i].target_class() == keys[j].target_class()) {
        throw DuplicateKey("watermark keys " + std::to_string(i) + " and " + std::to_string(j) +
                           " share target class and projection");
      }
    }
  }
}

const CellReport& ExperimentReport::cell(double epsilon, std::size_t ensemble_size) const {
  for (const auto& c : cells) {
    if (c.epsilon == epsilon && c.ensemble_size == ensemble_size) return c;
  }
  throw InvalidInput("no cell for epsilon " + io::format17(epsilon) + ", N = " + std::to_string(ensemble_size));
}

namespace {

io::Json snr_value(double v) { return std::isfinite(v) ? io::Json(v) : io::Json("inf"); }

}  // namespace

io::Json to_json(const ExperimentReport& r) {
  io::Json teachers = io::Json::array();
  for (const auto& t : r.teachers) {
    teachers.push_back({{"id", t.id},
                        {"watermarked", t.watermarked},
                        {"epsilon", t.epsilon},
                        {"frequency", t.frequency},
                        {"accuracy", t.accuracy},
                        {"gap", t.gap},
                        {"relative_gap", t.relative_gap},
                        {"gate_pass", t.gate_pass}});
  }
  io::Json cells = io::Json::array();
  for (const auto& c : r.cells) {
    io::Json keys = io::Json::array();
    for (const auto& k : c.rankings) {
      keys.push_back({{"key", k.key_index},
                      {"ap", k.ap},
                      {"mean_positive_snr", snr_value(k.mean_positive_snr)},
                      {"mean_negative_snr", snr_value(k.mean_negative_snr)},
                      {"mean_cross_snr", snr_value(k.mean_cross_snr)}});
    }
    cells.push_back({{"epsilon", c.epsilon},
                     {"N", c.ensemble_size},
                     {"mAP", c.map},
                     {"mAP_std_over_keys", c.map_std},
                     {"mean_positive_snr", c.mean_positive_snr},
                     {"std_positive_snr", c.std_positive_snr},
                     {"mean_student_accuracy", c.mean_student_accuracy},
                     {"random_baseline",
                      {{"expected", c.random.expected},
                       {"mean", c.random.mean},
                       {"std", c.random.stddev},
                       {"resamples", c.random.resamples}}},
                     {"keys", keys}});
  }
  return {{"kind", r.kind},
          {"seed", r.seed},
          {"teachers", teachers},
          {"unwatermarked_mean_accuracy", r.unwatermarked_mean_accuracy},
          {"gate_violations", r.gate_violations},
          {"ground_truth_student_accuracy", r.ground_truth_student_accuracy},
          {"frequency_rule", r.frequency_rule},
          {"cells", cells}};
}

// --------------------------------------------------------- case study

namespace {

std::string series_csv(const spectrum::PairedSeries& s) {
  std::string out = "p,q\n";
  for (std::size_t i = 0; i < s.size(); ++i) out += io::format17(s.p()[i]) + "," + io::format17(s.q()[i]) + "\n";
  return out;
}

}  // namespace

CaseStudyReport run_case_study(const ExperimentParams& params) {
  ExperimentParams p = params;
  p.watermarked_teachers = 1;
  const auto w = make_world(p);
  const double eps = p.epsilons.front();
  const auto& key = w.keys.front();

  nnet::TrainConfig tcfg = p.teacher_train;
  tcfg.seed = stream(p.seed, "teacher_wm0");
  nnet::TrainConfig pcfg = p.teacher_train;
  pcfg.seed = stream(p.seed, "teacher_plain0");

  std::vector<ModelPtr> teachers(2);
  parallel_for(2, p.jobs, [&](std::size_t i) {
    auto m = i == 0 ? with_context("teacher_wm0", [&] {
      return nnet::train_teacher(w.splits.teacher, tcfg, p.teacher_model, wm::WatermarkConfig(key, eps));
    })
                    : with_context("teacher_plain0", [&] {
                        return nnet::train_teacher(w.splits.teacher, pcfg, p.teacher_model, std::nullopt);
                      });
    teachers[i] = std::make_shared<const nnet::Model>(std::move(m));
  });
  std::vector<ModelPtr> students(2);
  parallel_for(2, p.jobs, [&](std::size_t i) {
    nnet::TrainConfig cfg = p.student_train;
    cfg.seed = stream(p.seed, "student_case");
    const std::string id = i == 0 ? "student_wm" : "student_plain";
    auto m = with_context(id, [&] { return nnet::distill(nnet::Ensemble({teachers[i]}), w.splits.student, cfg, p.student_model); });
    students[i] = std::make_shared<const nnet::Model>(std::move(m));
  });

  const auto random_key = [&] {
    const auto base = wm::WatermarkKey::random(p.data.dim, 1.0, p.target_class, stream(p.seed, "random_key"));
    const double f = p.frequency ? *p.frequency
                                 : wm::rescaled_frequency(w.splits.teacher.features, base.projection(), p.periods);
    return base.with_frequency(f * p.frequency_multiplier);
  }();

  const auto ex_params = extraction_for(p, 1);
  const Matrix& x = w.queries.features;
  const auto labels = w.queries.label_span();
  const auto teacher_ex = spectrum::extract_signal(teachers[0]->predict(x), x, key, ex_params, labels);
  const auto student_ex = spectrum::extract_signal(students[0]->predict(x), x, key, ex_params, labels);
  const auto random_ex = spectrum::extract_signal(students[0]->predict(x), x, random_key, ex_params, labels);
  const auto control_ex = spectrum::extract_signal(students[1]->predict(x), x, key, ex_params, labels);

  CaseStudyReport r;
  r.seed = p.seed;
  r.epsilon = eps;
  r.frequency = key.frequency();
  r.teacher_accuracy = nnet::accuracy(*teachers[0], w.splits.test);
  r.unwatermarked_teacher_accuracy = nnet::accuracy(*teachers[1], w.splits.test);
  r.student_accuracy = nnet::accuracy(*students[0], w.splits.test);
  r.teacher = teacher_ex.report;
  r.student = student_ex.report;
  r.student_random_key = random_ex.report;
  r.control_student = control_ex.report;

  if (!p.out_dir.empty()) {
    const auto& o = p.out_dir;
    wm::save_key(key, o / "keys" / "key.json");
    wm::save_key(random_key, o / "keys" / "random_key.json");
    nnet::save_checkpoint(*teachers[0], o / "checkpoints" / "teacher_wm.json");
    nnet::save_checkpoint(*teachers[1], o / "checkpoints" / "teacher_plain.json");
    nnet::save_checkpoint(*students[0], o / "checkpoints" / "student_wm.json");
    nnet::save_checkpoint(*students[1], o / "checkpoints" / "student_plain.json");
    io::write_text(o / "periodogram_teacher.csv", spectrum::periodogram_csv(teacher_ex.spectrum));
    io::write_text(o / "periodogram_student.csv", spectrum::periodogram_csv(student_ex.spectrum));
    io::write_text(o / "periodogram_random_key.csv", spectrum::periodogram_csv(random_ex.spectrum));
    io::write_text(o / "periodogram_control.csv", spectrum::periodogram_csv(control_ex.spectrum));
    io::write_text(o / "series_teacher.csv", series_csv(teacher_ex.series));
    io::write_text(o / "series_student.csv", series_csv(student_ex.series));
    io::save_json(o / "config.json", to_json(p));
    io::save_json(o / "summary.json", to_json(r));
  }
  return r;
}

io::Json to_json(const CaseStudyReport& r) {
  return {{"seed", r.seed},
          {"epsilon", r.epsilon},
          {"f_w", r.frequency},
          {"teacher_accuracy", r.teacher_accuracy},
          {"unwatermarked_teacher_accuracy", r.unwatermarked_teacher_accuracy},
          {"student_accuracy", r.student_accuracy},
          {"teacher", spectrum::to_json(r.teacher)},
          {"student", spectrum::to_json(r.student)},
          {"student_random_key", spectrum::to_json(r.student_random_key)},
          {"control_student", spectrum::to_json(r.control_student)}};
}

// ----------------------------------------------------------- dilution

std::vector<DilutionRow> amplitude_dilution(const ExperimentParams& params,
                                            std::span<const std::size_t> ensemble_sizes) {
  ExperimentParams p = params;
  p.watermarked_teachers = 1;
  p.epsilons = {params.epsilons.front()};
  std::size_t max_n = 1;
  for (auto n : ensemble_sizes) max_n = std::max(max_n, n);
  const auto w = make_world(p);
  const auto t = train_teachers(p, w, std::max(max_n - 1, p.unwatermarked_teachers));
  const auto& key = w.keys.front();
  const auto istar = static_cast<Eigen::Index>(key.target_class());
  const Matrix& x = w.queries.features;
  const Vector proj = x * key.projection();

  const Matrix teacher_out = t.watermarked[0][0]->predict(x);
  std::vector<double> reference;
  const auto labels = w.queries.label_span();
  for (Eigen::Index l = 0; l < x.rows(); ++l) {
    if (labels.empty() || labels[static_cast<std::size_t>(l)] == static_cast<int>(istar)) {
      reference.push_back(teacher_out(l, istar));
    }
  }
  const double threshold = spectrum::filter_threshold(reference, spectrum::FilterPolicy::single_teacher());
  std::vector<Eigen::Index> kept;
  for (Eigen::Index l = 0; l < x.rows(); ++l) {
    if (teacher_out(l, istar) > threshold) kept.push_back(l);
  }

  auto amplitude = [&](const Matrix& out) {
    spectrum::PairedSeries s;
    for (auto l : kept) s.add(proj[l], out(l, istar));
    return spectrum::fit_sinusoid(s, key.frequency()).beta;
  };
  const double base = amplitude(teacher_out);
  std::vector<DilutionRow> rows;
  for (auto n : ensemble_sizes) {
    std::vector<ModelPtr> members{t.watermarked[0][0]};
    for (std::size_t j = 0; j + 1 < n; ++j) members.push_back(t.plain[j]);
    const double a = amplitude(nnet::ensemble_predict(nnet::Ensemble(members), x));
    rows.push_back({n, a, base > 0.0 ? a / base : 0.0});
  }
  return rows;
}

}  // namespace sinemark::harness
