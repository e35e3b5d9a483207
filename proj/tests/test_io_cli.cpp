#include "oracles.hpp"

#include <doctest.h>

#include "jmfpc/error.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace jmfpc;
namespace fs = std::filesystem;

namespace {

const char* long_csv = "subject_id,time,value\na,0,1.5\na,10,2.5\na,20,0.5\n";
const char* surv_csv = "subject_id,t_left,t_right,delta\na,5.0,5.0,1\n";
const char* cov_csv = "subject_id,Z\na,1\n";

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::invalid_argument;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " \"" JMFPC_CLI_PATH "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_SUITE("io") {
  TEST_CASE("three-row toy joins into one subject") {
    const CsvTable l = parse_csv(long_csv), s = parse_csv(surv_csv), c = parse_csv(cov_csv);
    const Dataset d = ingest_tables(l, s, &c, Family::gaussian);
    REQUIRE(d.size() == 1);
    CHECK(d.subjects[0].n_obs() == 3);
    CHECK(d.subjects[0].survival->kind() == CensorKind::exact);
    CHECK(d.subjects[0].survival->t_right == 5.0);
    CHECK(d.covariate_names == std::vector<std::string>{"Z"});
    CHECK(d.domain.lower == 0.0);
    CHECK(d.domain.upper == 20.0);
    const Dataset wide = ingest_tables(l, s, &c, Family::gaussian, Interval{-1.0, 30.0});
    CHECK(wide.domain.upper == 30.0);
  }

  TEST_CASE("validation errors") {
    const CsvTable l = parse_csv(long_csv), c = parse_csv(cov_csv);
    const CsvTable bad_interval = parse_csv("subject_id,t_left,t_right,delta\na,6,5,1\n");
    CHECK(kind_of([&] { ingest_tables(l, bad_interval, &c, Family::gaussian); }) == ErrorKind::validation_error);
    const CsvTable unknown = parse_csv("subject_id,time,value\nb,1,1\n");
    CHECK(kind_of([&] { ingest_tables(unknown, parse_csv(surv_csv), &c, Family::gaussian); }) == ErrorKind::join_error);
    CHECK(kind_of([&] { ingest_tables(l, parse_csv(surv_csv), &c, Family::binary); }) == ErrorKind::validation_error);
    const CsvTable text_time = parse_csv("subject_id,time,value\na,x,1\n");
    CHECK(kind_of([&] { ingest_tables(text_time, parse_csv(surv_csv), &c, Family::gaussian); }) ==
          ErrorKind::validation_error);
    try {
      ingest_tables(l, bad_interval, &c, Family::gaussian);
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }

  TEST_CASE("unsorted times are sorted with a warning") {
    std::ostringstream sink;
    set_warning_sink(&sink);
    const Dataset d = ingest_tables(parse_csv("subject_id,time,value\na,10,2\na,0,1\na,20,3\n"), parse_csv(surv_csv),
                                    nullptr, Family::gaussian);
    set_warning_sink(nullptr);
    CHECK(sink.str().find("not sorted") != std::string::npos);
    CHECK(d.subjects[0].times == (Vector(3) << 0, 10, 20).finished());
    CHECK(d.subjects[0].responses == (Vector(3) << 1, 2, 3).finished());
  }

  TEST_CASE("flat config parsing") {
    const auto v = parse_flat_config("# comment\nseed = 4\n  Rmax=300  # trailing\n", RunConfig::keys());
    CHECK(v.at("seed") == "4");
    CHECK(v.at("Rmax") == "300");
    CHECK(kind_of([] { parse_flat_config("bogus = 1\n", RunConfig::keys()); }) == ErrorKind::config_error);
    CHECK(kind_of([] { parse_flat_config("seed = 1\nseed = 2\n", RunConfig::keys()); }) == ErrorKind::config_error);
    const RunConfig r = resolve_config(v);
    CHECK(r.seed == 4);
    CHECK(r.Rmax == 300);
    CHECK(r.q == 8);
    // rendering and re-reading reproduces the configuration
    const RunConfig again = resolve_config(parse_flat_config(render_config(r), RunConfig::keys()));
    CHECK(render_config(again) == render_config(r));
  }

  TEST_CASE("dataset round trip through files") {
    TempDir tmp("jmfpc_test_io");
    const SimData sim = oracle::Gen(1).dataset(12, Family::binary);
    write_dataset(sim.data, tmp.path.string());
    const Dataset back = ingest((tmp.path / "longitudinal.csv").string(), (tmp.path / "survival.csv").string(),
                                (tmp.path / "covariates.csv").string(), Family::binary, sim.data.domain);
    REQUIRE(back.size() == sim.data.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back.subjects[i].id == sim.data.subjects[i].id);
      CHECK(back.subjects[i].times == sim.data.subjects[i].times);
      CHECK(back.subjects[i].responses == sim.data.subjects[i].responses);
      CHECK(back.subjects[i].survival->t_left == sim.data.subjects[i].survival->t_left);
      CHECK(back.subjects[i].survival->t_right == sim.data.subjects[i].survival->t_right);
    }
  }
}

TEST_SUITE("cli") {
  TEST_CASE("simulate, fit twice, predict") {
    TempDir tmp("jmfpc_test_cli");
    const fs::path& d = tmp.path;
    write(d / "sim.cfg", "seed = 2\nN = 40\nn_obs = 8\noutput_dir = " + (d / "data").string() + "\n");
    REQUIRE(run_cli("simulate " + (d / "sim.cfg").string()) == 0);
    CHECK(fs::exists(d / "data" / "truth.csv"));

    const std::string fit_cfg = "seed = 5\nK = 4\nRmax = 300\nmax_iter = 30\nlongitudinal = " +
                                (d / "data" / "longitudinal.csv").string() + "\nsurvival = " +
                                (d / "data" / "survival.csv").string() + "\ncovariates = " +
                                (d / "data" / "covariates.csv").string() + "\n";
    write(d / "fit.cfg", fit_cfg + "output_dir = " + (d / "fit1").string() + "\n");
    const int code = run_cli("fit " + (d / "fit.cfg").string());
    CHECK((code == 0 || code == 3));
    REQUIRE(fs::exists(d / "fit1" / "estimates.json"));
    CHECK(fs::exists(d / "fit1" / "functions.csv"));
    CHECK(fs::exists(d / "fit1" / "trace.csv"));
    CHECK(fs::exists(d / "fit1" / "config_resolved"));

    // same config, different output directory through the environment and more workers
    const int code2 = run_cli("fit " + (d / "fit.cfg").string(),
                              "JMFPC_OUTPUT_DIR=" + (d / "fit2").string() + " JMFPC_WORKERS=2");
    CHECK(code2 == code);
    CHECK(slurp(d / "fit1" / "estimates.json") == slurp(d / "fit2" / "estimates.json"));

    const auto j = nlohmann::json::parse(slurp(d / "fit1" / "estimates.json"));
    CHECK(j.at("family") == "gaussian");
    bool has_beta = false;
    for (const auto& e : j.at("estimates")) has_beta = has_beta || e.at("name") == "beta[0]";
    CHECK(has_beta);

    write(d / "new_long.csv", "subject_id,time,value\nn1,0,0.5\nn1,10,-1\nn1,20,1.2\n");
    write(d / "new_cov.csv", "subject_id,Z\nn1,1\n");
    write(d / "pred.cfg", "model = " + (d / "fit1" / "estimates.json").string() + "\nnew_longitudinal = " +
                              (d / "new_long.csv").string() + "\nnew_covariates = " + (d / "new_cov.csv").string() +
                              "\npredict_draws = 500\noutput_dir = " + (d / "pred").string() + "\n");
    REQUIRE(run_cli("predict " + (d / "pred.cfg").string()) == 0);
    const CsvTable p = read_csv((d / "pred" / "predictions.csv").string());
    REQUIRE(p.rows.size() == 1);
    const double lo = std::stod(p.rows[0][p.column("lower")]), med = std::stod(p.rows[0][p.column("median")]),
                 hi = std::stod(p.rows[0][p.column("upper")]);
    CHECK(lo <= med);
    CHECK(med <= hi);
  }

  TEST_CASE("exit codes for bad input") {
    TempDir tmp("jmfpc_test_cli_errors");
    write(tmp.path / "bogus.cfg", "bogus = 1\n");
    CHECK(run_cli("fit " + (tmp.path / "bogus.cfg").string()) == 2);
    write(tmp.path / "missing.cfg", "longitudinal = /nonexistent/l.csv\nsurvival = /nonexistent/s.csv\noutput_dir = " +
                                        (tmp.path / "out").string() + "\n");
    CHECK(run_cli("fit " + (tmp.path / "missing.cfg").string()) != 0);
    CHECK(run_cli("nosuchcommand") == 2);
    CHECK(run_cli("--help") == 0);
  }
}
