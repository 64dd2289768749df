#include "sinemark/cli.hpp"

#include <CLI11.hpp>
#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include "sinemark/datagen.hpp"
#include "sinemark/error.hpp"
#include "sinemark/harness.hpp"
#include "sinemark/io.hpp"
#include "sinemark/nnet.hpp"
#include "sinemark/spectrum.hpp"
#include "sinemark/watermark.hpp"

namespace sinemark::cli {

namespace fs = std::filesystem;
using io::Json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t jobs = 1;
};

struct Context {
  std::string command;
  Common common;
  Json config = Json::object();
  fs::path base;  // directory of the config file
  fs::path out;
  std::ostream* log = nullptr;

  fs::path resolve(const Json& value, const std::string& field) const {
    if (!value.is_string()) throw ConfigError(field, "expected a path string");
    const fs::path p = value.get<std::string>();
    return p.is_absolute() ? p : base / p;
  }

  fs::path path_field(const std::string& field) const {
    if (!config.contains(field)) throw ConfigError(field, "missing required field");
    return resolve(config.at(field), field);
  }
};

fs::path output_dir(const std::string& flag, const std::string& command) {
  const char* root = std::getenv("SINEMARK_OUT");
  if (flag.empty()) return fs::path(root && *root ? root : "runs") / command;
  const fs::path p = flag;
  if (p.is_relative() && root && *root) return fs::path(root) / p;
  return p;
}

void write_manifest(const Context& ctx, const Json& effective, std::uint64_t seed) {
  const auto text = effective.dump();
  Json m{{"command", ctx.command},
         {"version", kVersion},
         {"config_hash", io::hex64(io::fnv1a(text))},
         {"seed", seed},
         {"jobs", ctx.common.jobs},
         {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                       std::to_string(EIGEN_MINOR_VERSION)},
         {"config", effective}};
  io::save_json(ctx.out / "manifest.json", m);
}

std::vector<fs::path> path_list(const Context& ctx, const std::string& field) {
  if (!ctx.config.contains(field)) throw ConfigError(field, "missing required field");
  const auto& v = ctx.config.at(field);
  std::vector<fs::path> out;
  if (v.is_string()) {
    out.push_back(ctx.resolve(v, field));
  } else if (v.is_array()) {
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(ctx.resolve(v[i], field + "[" + std::to_string(i) + "]"));
  } else {
    throw ConfigError(field, "expected a path or a list of paths");
  }
  if (out.empty()) throw ConfigError(field, "must not be empty");
  return out;
}

Matrix outputs_of(const std::vector<fs::path>& checkpoints, const Matrix& x) {
  std::vector<std::shared_ptr<const nnet::Model>> members;
  for (const auto& p : checkpoints) members.push_back(std::make_shared<const nnet::Model>(nnet::load_checkpoint(p)));
  return nnet::ensemble_predict(nnet::Ensemble(std::move(members)), x);
}

std::string series_csv(const spectrum::PairedSeries& s) {
  std::string out = "p,q\n";
  for (std::size_t i = 0; i < s.size(); ++i) out += io::format17(s.p()[i]) + "," + io::format17(s.q()[i]) + "\n";
  return out;
}

// ------------------------------------------------------------ commands

struct KeygenArgs {
  std::size_t dim = 32;
  double frequency = 30.0;
  std::size_t target = 0;
  std::string rescale;
  double periods = 8.0;
};

void cmd_keygen(Context& ctx, const KeygenArgs& a) {
  auto& c = ctx.config;
  io::require_known_fields(c, {"dim", "frequency", "target_class", "rescale", "periods", "seed"}, "");
  KeygenArgs k = a;
  k.dim = c.value("dim", k.dim);
  k.frequency = c.value("frequency", k.frequency);
  k.target = c.value("target_class", k.target);
  k.periods = c.value("periods", k.periods);
  if (c.contains("rescale")) k.rescale = ctx.resolve(c.at("rescale"), "rescale").string();
  const std::uint64_t seed = ctx.common.seed.value_or(c.value("seed", std::uint64_t{1}));
  if (k.dim == 0) throw ConfigError("dim", "must be >= 1");

  auto key = wm::WatermarkKey::random(k.dim, k.frequency, k.target, seed);
  if (!k.rescale.empty()) {
    const auto data = data::load_csv(k.rescale);
    key = key.with_frequency(wm::rescaled_frequency(data.features, key.projection(), k.periods));
  }
  wm::save_key(key, ctx.out / "key.json");
  Json eff{{"dim", k.dim}, {"frequency", k.frequency}, {"target_class", k.target}, {"seed", seed},
           {"rescale", k.rescale}, {"periods", k.periods}};
  write_manifest(ctx, eff, seed);
  *ctx.log << "key: " << (ctx.out / "key.json").string() << " (f_w = " << io::format17(key.frequency()) << ")\n";
}

void cmd_gen_data(Context& ctx) {
  auto& c = ctx.config;
  io::require_known_fields(c, {"data", "fractions", "seed"}, "");
  data::BlobSpec spec;
  if (c.contains("data")) {
    const auto& d = c.at("data");
    io::require_known_fields(d, {"classes", "dim", "per_class", "sigma"}, "data");
    spec.classes = d.value("classes", spec.classes);
    spec.dim = d.value("dim", spec.dim);
    spec.per_class = d.value("per_class", spec.per_class);
    spec.sigma = d.value("sigma", spec.sigma);
  }
  std::array<double, 3> fractions{0.45, 0.45, 0.10};
  if (c.contains("fractions")) fractions = c.at("fractions").get<std::array<double, 3>>();
  spec.seed = ctx.common.seed.value_or(c.value("seed", std::uint64_t{1}));
  const auto full = data::make_blobs(spec);
  const auto s = data::split(full, fractions, spec.seed + 1);
  data::save_csv(s.teacher, ctx.out / "teacher.csv");
  data::save_csv(s.student, ctx.out / "student.csv");
  data::save_csv(s.test, ctx.out / "test.csv");
  Json eff{{"data", {{"classes", spec.classes}, {"dim", spec.dim}, {"per_class", spec.per_class}, {"sigma", spec.sigma}}},
           {"fractions", fractions},
           {"seed", spec.seed}};
  write_manifest(ctx, eff, spec.seed);
  *ctx.log << "wrote teacher/student/test splits (" << s.teacher.size() << "/" << s.student.size() << "/"
           << s.test.size() << " rows) to " << ctx.out.string() << "\n";
}

void cmd_train(Context& ctx) {
  auto& c = ctx.config;
  io::require_known_fields(c, {"data", "test_data", "model", "train", "watermark"}, "");
  const auto data = data::load_csv(ctx.path_field("data"));
  const auto spec = nnet::model_spec_from_json(c.value("model", Json::object()));
  auto tc = nnet::train_config_from_json(c.value("train", Json::object()));
  if (ctx.common.seed) tc.seed = *ctx.common.seed;
  std::optional<wm::WatermarkConfig> wmc;
  Json wm_eff = nullptr;
  if (c.contains("watermark") && !c.at("watermark").is_null()) {
    const auto& w = c.at("watermark");
    io::require_known_fields(w, {"key", "epsilon"}, "watermark");
    if (!w.contains("epsilon")) throw ConfigError("watermark.epsilon", "missing required field");
    const auto key_path = ctx.resolve(w.at("key"), "watermark.key");
    wmc.emplace(wm::load_key(key_path), w.at("epsilon").get<double>());
    tc.loss = nnet::LossKind::watermarked_ce;
    wm_eff = {{"key", key_path.string()}, {"epsilon", wmc->epsilon()}};
  } else {
    tc.loss = nnet::LossKind::cross_entropy;
  }
  const auto model = nnet::train_teacher(data, tc, spec, wmc);
  nnet::save_checkpoint(model, ctx.out / "model.json");
  Json metrics{{"train_accuracy", nnet::accuracy(model, data)}};
  if (c.contains("test_data")) {
    metrics["test_accuracy"] = nnet::accuracy(model, data::load_csv(ctx.path_field("test_data")));
  }
  io::save_json(ctx.out / "metrics.json", metrics);
  write_manifest(ctx,
                 {{"data", ctx.path_field("data").string()}, {"model", nnet::to_json(spec)},
                  {"train", nnet::to_json(tc)}, {"watermark", wm_eff}},
                 tc.seed);
  *ctx.log << "model: " << (ctx.out / "model.json").string() << " " << metrics.dump() << "\n";
}

void cmd_distill(Context& ctx) {
  auto& c = ctx.config;
  io::require_known_fields(c, {"teachers", "data", "test_data", "model", "train"}, "");
  const auto teachers = path_list(ctx, "teachers");
  std::vector<std::shared_ptr<const nnet::Model>> members;
  for (const auto& p : teachers) members.push_back(std::make_shared<const nnet::Model>(nnet::load_checkpoint(p)));
  const nnet::Ensemble ensemble(std::move(members));
  auto data = data::load_csv(ctx.path_field("data"));
  const auto spec = nnet::model_spec_from_json(c.value("model", Json::object()),
                                               {nnet::Architecture::mlp, 128});
  nnet::TrainConfig defaults;
  defaults.loss = nnet::LossKind::kl;
  auto tc = nnet::train_config_from_json(c.value("train", Json::object()), defaults);
  if (ctx.common.seed) tc.seed = *ctx.common.seed;
  const auto model = nnet::distill(ensemble, data, tc, spec);
  nnet::save_checkpoint(model, ctx.out / "student.json");
  Json metrics = Json::object();
  if (c.contains("test_data")) {
    metrics["test_accuracy"] = nnet::accuracy(model, data::load_csv(ctx.path_field("test_data")));
  }
  io::save_json(ctx.out / "metrics.json", metrics);
  Json names = Json::array();
  for (const auto& p : teachers) names.push_back(p.string());
  write_manifest(ctx,
                 {{"teachers", names}, {"data", ctx.path_field("data").string()},
                  {"model", nnet::to_json(spec)}, {"train", nnet::to_json(tc)}},
                 tc.seed);
  *ctx.log << "student: " << (ctx.out / "student.json").string() << "\n";
}

struct ExtractArgs {
  std::string model;
  std::string key;
  std::string queries;
};

void cmd_extract(Context& ctx, const ExtractArgs& a) {
  auto& c = ctx.config;
  io::require_known_fields(c, {"model", "key", "queries", "extraction"}, "");
  if (!a.model.empty()) c["model"] = fs::absolute(a.model).string();
  if (!a.key.empty()) c["key"] = fs::absolute(a.key).string();
  if (!a.queries.empty()) c["queries"] = fs::absolute(a.queries).string();
  const auto models = path_list(ctx, "model");
  const auto key = wm::load_key(ctx.path_field("key"));
  const auto queries = data::load_csv(ctx.path_field("queries"));
  const auto params = c.contains("extraction") ? spectrum::extraction_params_from_json(c.at("extraction"))
                                               : spectrum::ExtractionParams{};
  const Matrix outputs = outputs_of(models, queries.features);
  const auto ex = spectrum::extract_signal(outputs, queries.features, key, params, queries.label_span());
  io::save_json(ctx.out / "report.json", spectrum::to_json(ex.report));
  io::write_text(ctx.out / "periodogram.csv", spectrum::periodogram_csv(ex.spectrum));
  io::write_text(ctx.out / "series.csv", series_csv(ex.series));
  Json eff = c;
  eff["extraction"] = spectrum::to_json(params);
  write_manifest(ctx, eff, 0);
  *ctx.log << "p_snr: " << (ex.report.p_snr_infinite ? std::string("inf") : io::format17(ex.report.p_snr))
           << " (" << ex.report.survivors << " pairs)\n";
}

void cmd_rank(Context& ctx) {
  auto& c = ctx.config;
  io::require_known_fields(c, {"key", "queries", "students", "extraction", "random_resamples", "seed"}, "");
  const auto key = wm::load_key(ctx.path_field("key"));
  const auto queries = data::load_csv(ctx.path_field("queries"));
  const auto params = c.contains("extraction") ? spectrum::extraction_params_from_json(c.at("extraction"))
                                               : spectrum::ExtractionParams{};
  if (!c.contains("students") || !c.at("students").is_array()) {
    throw ConfigError("students", "expected a list of {id, checkpoint, positive}");
  }
  std::vector<harness::ScoredStudent> scored;
  for (std::size_t i = 0; i < c.at("students").size(); ++i) {
    const auto& s = c.at("students")[i];
    const std::string where = "students[" + std::to_string(i) + "]";
    io::require_known_fields(s, {"id", "checkpoint", "positive"}, where);
    harness::ScoredStudent r;
    r.id = s.value("id", "student" + std::to_string(i));
    r.positive = s.value("positive", false);
    const auto model = nnet::load_checkpoint(ctx.resolve(s.at("checkpoint"), where + ".checkpoint"));
    try {
      const auto ex = spectrum::extract_signal(model.predict(queries.features), queries.features, key, params,
                                               queries.label_span());
      r.p_snr = ex.report.p_snr_infinite ? std::numeric_limits<double>::infinity() : ex.report.p_snr;
      r.survivors = ex.report.survivors;
    } catch (const InsufficientData& e) {
      r.p_snr = 0.0;
      r.survivors = e.available();
    }
    scored.push_back(r);
  }
  const std::uint64_t seed = ctx.common.seed.value_or(c.value("seed", std::uint64_t{1}));
  const double ap = harness::average_precision(scored);
  const auto positives = static_cast<std::size_t>(
      std::count_if(scored.begin(), scored.end(), [](const auto& s) { return s.positive; }));
  const auto random = harness::random_baseline(positives, scored.size() - positives,
                                               c.value("random_resamples", std::size_t{1000}), seed);
  io::write_text(ctx.out / "ranking.csv", harness::ranking_csv(scored));
  io::save_json(ctx.out / "summary.json",
                {{"ap", ap},
                 {"positives", positives},
                 {"negatives", scored.size() - positives},
                 {"random_baseline", {{"expected", random.expected}, {"mean", random.mean}, {"std", random.stddev}}}});
  write_manifest(ctx, c, seed);
  *ctx.log << "AP: " << io::format17(ap) << " (random " << io::format17(random.expected) << ")\n";
}

void cmd_verify_bound(Context& ctx) {
  auto& c = ctx.config;
  io::require_known_fields(c, {"teachers", "student", "sample", "frequencies", "frequency_multiples", "enforce"}, "");
  const auto teacher_paths = path_list(ctx, "teachers");
  std::vector<nnet::Model> teachers;
  for (const auto& p : teacher_paths) teachers.push_back(nnet::load_checkpoint(p));
  if (!teachers.front().watermark()) throw ConfigError("teachers[0]", "the first teacher must be watermarked");
  const auto student = nnet::load_checkpoint(ctx.path_field("student"));
  const auto sample = data::load_csv(ctx.path_field("sample"));
  const double fw = teachers.front().watermark()->key().frequency();
  std::vector<double> freqs;
  if (c.contains("frequencies")) {
    freqs = c.at("frequencies").get<std::vector<double>>();
  } else {
    for (double k : c.value("frequency_multiples", std::vector<double>{1.0, 0.5, 2.0})) freqs.push_back(k * fw);
  }
  const bool enforce = c.value("enforce", true);
  std::vector<const nnet::Model*> others;
  for (std::size_t i = 1; i < teachers.size(); ++i) others.push_back(&teachers[i]);

  Json reports = Json::array();
  std::optional<harness::BoundReport> violated;
  bool norm_ok = true;
  for (double f : freqs) {
    const auto r = harness::verify_bound(teachers.front(), others, student, sample.features, f);
    reports.push_back(harness::to_json(r));
    if (!r.holds() && !violated) violated = r;
    norm_ok = norm_ok && r.norm_holds();
  }
  io::save_json(ctx.out / "bound.json", {{"reports", reports}, {"all_hold", !violated}, {"norm_all_hold", norm_ok}});
  write_manifest(ctx, c, 0);
  *ctx.log << "stated bound " << (violated ? "VIOLATED" : "holds") << "; norm bound " << (norm_ok ? "holds" : "VIOLATED")
           << " over " << freqs.size() << " frequencies\n";
  if (violated && enforce) harness::enforce_bound(*violated);
}

harness::ExperimentParams experiment_params(Context& ctx) {
  auto p = harness::experiment_params_from_json(ctx.config);
  if (ctx.common.seed) p.seed = *ctx.common.seed;
  p.jobs = ctx.common.jobs;
  p.out_dir = ctx.out;
  return p;
}

void cmd_experiment(Context& ctx, const std::string& kind) {
  auto p = experiment_params(ctx);
  Json eff = harness::to_json(p);
  write_manifest(ctx, eff, p.seed);
  if (kind == "case-study") {
    const auto r = harness::run_case_study(p);
    *ctx.log << "teacher p_snr " << io::format17(r.teacher.p_snr) << ", student " << io::format17(r.student.p_snr)
             << ", random key " << io::format17(r.student_random_key.p_snr) << ", control "
             << io::format17(r.control_student.p_snr) << "\n";
    return;
  }
  harness::ExperimentReport r;
  if (kind == "single") r = harness::run_single_watermark_experiment(p);
  else if (kind == "multi") r = harness::run_multi_watermark_experiment(p);
  else r = harness::run_mixed_loss_experiment(p);
  for (const auto& cell : r.cells) {
    *ctx.log << "epsilon " << cell.epsilon << " N " << cell.ensemble_size << ": mAP " << io::format17(cell.map)
             << " +- " << io::format17(cell.map_std) << " (random " << io::format17(cell.random.expected) << ")\n";
  }
  for (const auto& v : r.gate_violations) *ctx.log << "accuracy gate: " << v << "\n";
}

void cmd_sweep(Context& ctx, const std::string& kind) {
  auto p = experiment_params(ctx);
  const Json sweep = ctx.config.value("sweep", Json::object());
  io::require_known_fields(sweep, {"epsilons", "ensemble_sizes", "frequencies"}, "sweep");
  const auto sizes = sweep.value("ensemble_sizes", std::vector<std::size_t>{1, 2, 4, 8});
  Json eff = harness::to_json(p);
  eff["sweep"] = sweep;
  harness::SweepTable table;
  if (kind == "amplitude") {
    const auto eps = sweep.value("epsilons", std::vector<double>{0.025, 0.05, 0.1, 0.2});
    eff["sweep"]["epsilons"] = eps;
    eff["sweep"]["ensemble_sizes"] = sizes;
    write_manifest(ctx, eff, p.seed);
    table = harness::sweep_amplitude(p, eps, sizes);
  } else {
    const auto freqs = sweep.value("frequencies", std::vector<double>{0.01, 1, 30, 100, 1e4, 1e6, 1e8});
    eff["sweep"]["frequencies"] = freqs;
    eff["sweep"]["ensemble_sizes"] = sizes;
    write_manifest(ctx, eff, p.seed);
    table = harness::sweep_frequency(p, freqs, sizes);
  }
  io::write_text(ctx.out / "sweep.csv", table.csv());
  *ctx.log << table.csv();
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"sinemark: embed, extract and rank cosine watermarks in classifier outputs"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Common common;
  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", common.config, "JSON config file");
    s->add_option("--seed", common.seed, "Master seed (overrides the config)");
    s->add_option("--out", common.out, "Output directory");
    s->add_option("--jobs", common.jobs, "Worker threads")->check(CLI::PositiveNumber);
  };

  KeygenArgs kg;
  auto* keygen = app.add_subcommand("keygen", "Draw a random watermark key");
  add_common(keygen);
  keygen->add_option("--dim", kg.dim, "Feature dimension n");
  keygen->add_option("--frequency", kg.frequency, "Angular frequency f_w");
  keygen->add_option("--target", kg.target, "Target class i*");
  keygen->add_option("--rescale", kg.rescale, "Dataset CSV; sets f_w from its projection spread");
  keygen->add_option("--periods", kg.periods, "Periods across the central 95% spread (with --rescale)");

  auto* gen = app.add_subcommand("gen-data", "Generate blob data and teacher/student/test splits");
  add_common(gen);
  auto* train = app.add_subcommand("train", "Train a (watermarked) teacher");
  add_common(train);
  auto* distill = app.add_subcommand("distill", "Distill a student from an ensemble of checkpoints");
  add_common(distill);

  ExtractArgs ea;
  auto* extract = app.add_subcommand("extract", "Score one model (or ensemble) against a key");
  add_common(extract);
  extract->add_option("--model", ea.model, "Checkpoint (overrides the config)");
  extract->add_option("--key", ea.key, "Key file (overrides the config)");
  extract->add_option("--queries", ea.queries, "Query CSV (overrides the config)");

  auto* rank = app.add_subcommand("rank", "Rank students by P_snr and report AP");
  add_common(rank);
  auto* bound = app.add_subcommand("verify-bound", "Check the periodogram bound on checkpoints");
  add_common(bound);

  std::string sweep_kind;
  auto* sweep = app.add_subcommand("sweep", "Amplitude or frequency sweep");
  add_common(sweep);
  sweep->add_option("kind", sweep_kind, "amplitude | frequency")
      ->required()
      ->check(CLI::IsMember({"amplitude", "frequency"}));

  std::string exp_kind;
  auto* experiment = app.add_subcommand("experiment", "Run a ranking experiment or the case study");
  add_common(experiment);
  experiment->add_option("kind", exp_kind, "single | multi | mixed | case-study")
      ->required()
      ->check(CLI::IsMember({"single", "multi", "mixed", "case-study"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  Context ctx;
  ctx.command = app.get_subcommands().front()->get_name();
  ctx.common = common;
  ctx.log = &out;
  try {
    if (!common.config.empty()) {
      ctx.config = io::load_json(common.config);
      if (!ctx.config.is_object()) throw ConfigError(common.config, "top level must be an object");
      ctx.base = fs::absolute(common.config).parent_path();
    } else {
      ctx.base = fs::current_path();
    }
    ctx.out = output_dir(common.out, ctx.command);

    if (*keygen) cmd_keygen(ctx, kg);
    else if (*gen) cmd_gen_data(ctx);
    else if (*train) cmd_train(ctx);
    else if (*distill) cmd_distill(ctx);
    else if (*extract) cmd_extract(ctx, ea);
    else if (*rank) cmd_rank(ctx);
    else if (*bound) cmd_verify_bound(ctx);
    else if (*sweep) cmd_sweep(ctx, sweep_kind);
    else cmd_experiment(ctx, exp_kind);
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const InvalidInput& e) {
    err << "invalid input: " << e.what() << "\n";
    return 1;
  } catch (const DuplicateKey& e) {
    err << "duplicate key: " << e.what() << "\n";
    return 1;
  } catch (const io::Json::exception& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace sinemark::cli
