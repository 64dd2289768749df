#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "sinemark/cli.hpp"
#include "sinemark/io.hpp"

using namespace sinemark;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "sinemark");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_json(const fs::path& path, const io::Json& j) { io::save_json(path, j); }

}  // namespace

TEST_CASE("usage errors exit with status 1") {
  CHECK(run_cli({}).code == 1);
  CHECK(run_cli({"frobnicate"}).code == 1);
  CHECK(run_cli({"sweep", "period"}).code == 1);
  CHECK(run_cli({"--version"}).code == 0);
  const auto d = fresh_dir("sinemark_cli_usage");
  write_json(d / "bad.json", {{"data", "x.csv"}, {"epoch", 3}});
  auto r = run_cli({"train", "--config", (d / "bad.json").string(), "--out", (d / "o").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("config error") != std::string::npos);
  io::write_text(d / "broken.json", "{\"data\": ");
  CHECK(run_cli({"train", "--config", (d / "broken.json").string(), "--out", (d / "o").string()}).code == 1);
  fs::remove_all(d);
}

TEST_CASE("a full pipeline through the command line") {
  const auto d = fresh_dir("sinemark_cli_pipeline");
  write_json(d / "gen.json", {{"data", {{"per_class", 80}, {"dim", 8}, {"classes", 4}}}});
  REQUIRE(run_cli({"gen-data", "--config", (d / "gen.json").string(), "--out", (d / "data").string(), "--seed", "2"}).code == 0);
  CHECK(fs::exists(d / "data" / "teacher.csv"));
  const auto manifest = io::load_json(d / "data" / "manifest.json");
  CHECK(manifest.at("command") == "gen-data");
  CHECK(manifest.at("seed") == 2);
  CHECK(manifest.at("config_hash").get<std::string>().size() == 16);

  REQUIRE(run_cli({"keygen", "--dim", "8", "--rescale", (d / "data" / "teacher.csv").string(), "--out",
               (d / "key").string(), "--seed", "5"})
              .code == 0);
  // Same seed, same key file.
  REQUIRE(run_cli({"keygen", "--dim", "8", "--rescale", (d / "data" / "teacher.csv").string(), "--out",
               (d / "key2").string(), "--seed", "5"})
              .code == 0);
  CHECK(io::read_text(d / "key" / "key.json") == io::read_text(d / "key2" / "key.json"));

  // Paths resolve against the config file's directory.
  write_json(d / "train.json", {{"data", "data/teacher.csv"},
                                {"test_data", "data/test.csv"},
                                {"train", {{"epochs", 20}}},
                                {"watermark", {{"key", "key/key.json"}, {"epsilon", 0.1}}}});
  REQUIRE(run_cli({"train", "--config", (d / "train.json").string(), "--out", (d / "teacher").string()}).code == 0);
  CHECK(io::load_json(d / "teacher" / "metrics.json").at("test_accuracy").get<double>() > 0.9);
  write_json(d / "plain.json", {{"data", "data/teacher.csv"}, {"train", {{"epochs", 20}}}});
  REQUIRE(run_cli({"train", "--config", (d / "plain.json").string(), "--out", (d / "plain").string()}).code == 0);

  write_json(d / "distill.json", {{"teachers", {"teacher/model.json"}},
                                  {"data", "data/student.csv"},
                                  {"model", {{"hidden_size", 16}}},
                                  {"train", {{"epochs", 20}}}});
  REQUIRE(run_cli({"distill", "--config", (d / "distill.json").string(), "--out", (d / "student").string()}).code == 0);
  CHECK(fs::exists(d / "student" / "student.json"));

  auto r = run_cli({"extract", "--model", (d / "teacher" / "model.json").string(), "--key",
                (d / "key" / "key.json").string(), "--queries", (d / "data" / "student.csv").string(),
                "--out", (d / "extract").string()});
  REQUIRE(r.code == 0);
  const auto report = io::load_json(d / "extract" / "report.json");
  CHECK(report.at("p_snr").get<double>() > 2.0);
  CHECK(fs::exists(d / "extract" / "periodogram.csv"));

  write_json(d / "rank.json", {{"key", "key/key.json"},
                               {"queries", "data/student.csv"},
                               {"students", {{{"id", "s"}, {"checkpoint", "student/student.json"}, {"positive", true}},
                                             {{"id", "t"}, {"checkpoint", "plain/model.json"}, {"positive", false}}}}});
  REQUIRE(run_cli({"rank", "--config", (d / "rank.json").string(), "--out", (d / "rank").string()}).code == 0);
  const auto summary = io::load_json(d / "rank" / "summary.json");
  CHECK(summary.at("random_baseline").at("expected").get<double>() == doctest::Approx(0.75));
  CHECK(io::read_text(d / "rank" / "ranking.csv").rfind("student_id,is_positive,p_snr\n", 0) == 0);

  // A plain first teacher cannot anchor the bound.
  write_json(d / "bound_bad.json", {{"teachers", {"plain/model.json"}}, {"student", "student/student.json"},
                                    {"sample", "data/student.csv"}});
  CHECK(run_cli({"verify-bound", "--config", (d / "bound_bad.json").string(), "--out", (d / "b0").string()}).code == 1);

  write_json(d / "bound.json", {{"teachers", {"teacher/model.json", "plain/model.json"}},
                                {"student", "student/student.json"},
                                {"sample", "data/student.csv"},
                                {"enforce", false}});
  REQUIRE(run_cli({"verify-bound", "--config", (d / "bound.json").string(), "--out", (d / "bound").string()}).code == 0);
  const auto bound = io::load_json(d / "bound" / "bound.json");
  CHECK(bound.at("reports").size() == 3);
  CHECK(bound.at("norm_all_hold") == true);
  fs::remove_all(d);
}

TEST_CASE("output directories default under SINEMARK_OUT") {
  const auto d = fresh_dir("sinemark_cli_env");
  ::setenv("SINEMARK_OUT", d.c_str(), 1);
  REQUIRE(run_cli({"keygen", "--dim", "4"}).code == 0);
  CHECK(fs::exists(d / "keygen" / "key.json"));
  REQUIRE(run_cli({"keygen", "--dim", "4", "--out", "rel"}).code == 0);
  CHECK(fs::exists(d / "rel" / "manifest.json"));
  ::unsetenv("SINEMARK_OUT");
  fs::remove_all(d);
}

TEST_CASE("the installed binary reports failures through its exit status") {
  const char* exe = std::getenv("SINEMARK_CLI");
  if (exe == nullptr) return;
  const auto d = fresh_dir("sinemark_cli_exe");
  const std::string base = std::string(exe) + " ";
  CHECK(std::system((base + "keygen --dim 4 --out " + (d / "k").string() + " > /dev/null").c_str()) == 0);
  const int status = std::system((base + "extract --model " + (d / "missing.json").string() + " --key " +
                                  (d / "k" / "key.json").string() + " --queries x.csv --out " +
                                  (d / "e").string() + " 2> /dev/null")
                                     .c_str());
  CHECK(WEXITSTATUS(status) == 2);
  fs::remove_all(d);
}
