#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "sghmm/io.hpp"

#include "test_helpers.hpp"

using namespace sghmm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("sghmm_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_cli(const std::string& args, const fs::path& out) {
  std::string cmd = std::string(SGHMM_CLI_PATH) + " " + args + " > " + out.string() + " 2>/dev/null";
  int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("binary sequence roundtrip is exact") {
  auto dir = temp_dir("seq");
  Rng rng = make_rng(3);
  auto p = testgen::random_gaussian_params(2, 2, rng);
  auto y = testgen::simulate_obs(p, 137, 5);
  write_sequence((dir / "y.sghmm").string(), y);
  auto back = read_sequence((dir / "y.sghmm").string());
  REQUIRE(back.data == y.data);
  REQUIRE_THROWS_AS(read_sequence((dir / "missing.sghmm").string()), ValidationError);
}

TEST_CASE("csv import parses rows and rejects garbage") {
  auto dir = temp_dir("csv");
  {
    std::ofstream f(dir / "y.csv");
    f << "1.5,2.0\n-0.25,3.5\n0.0,1.0\n";
  }
  auto y = read_csv_sequence((dir / "y.csv").string());
  REQUIRE(y.T() == 3);
  REQUIRE(y.dim() == 2);
  REQUIRE(y.data(0, 1) == -0.25);
  {
    std::ofstream f(dir / "bad.csv");
    f << "1.0,oops\n";
  }
  REQUIRE_THROWS_AS(read_csv_sequence((dir / "bad.csv").string()), ValidationError);
  REQUIRE(load_sequence((dir / "y.csv").string()).T() == 3);
}

TEST_CASE("params JSON roundtrip for both families") {
  Rng rng = make_rng(7);
  auto pg = testgen::random_gaussian_params(3, 2, rng);
  auto jg = params_to_json(pg);
  REQUIRE(jg["column_stochastic"] == true);
  auto pg2 = params_from_json(jg);
  REQUIRE((pg2.A - pg.A).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((std::get<GaussianEmission>(pg2.emissions[1]).sigma -
           std::get<GaussianEmission>(pg.emissions[1]).sigma)
              .cwiseAbs()
              .maxCoeff() == 0.0);

  auto pl = testgen::random_lognormal_params(2, rng);
  auto pl2 = params_from_json(params_to_json(pl));
  REQUIRE(std::get<LogNormalEmission>(pl2.emissions[0]).sigma ==
          std::get<LogNormalEmission>(pl.emissions[0]).sigma);

  auto j = params_to_json(pg);
  j.erase("column_stochastic");
  REQUIRE_THROWS_AS(params_from_json(j), ValidationError);
}

TEST_CASE("trace ndjson and csv writers") {
  auto dir = temp_dir("trace");
  Rng rng = make_rng(11);
  Trace trace;
  for (int i = 0; i < 3; ++i) {
    TraceSample s;
    s.iter = i;
    s.wall_ms = 10.0 * i;
    auto p = testgen::random_lognormal_params(2, rng);
    s.A = p.A;
    s.emissions = p.emissions;
    trace.samples.push_back(s);
  }
  write_trace_ndjson((dir / "t.ndjson").string(), trace);
  write_trace_csv((dir / "t.csv").string(), trace);
  auto back = read_trace_ndjson((dir / "t.ndjson").string());
  REQUIRE(back.samples.size() == 3);
  REQUIRE((back.samples[2].A - trace.samples[2].A).cwiseAbs().maxCoeff() == 0.0);

  std::string csv = slurp(dir / "t.csv");
  REQUIRE(csv.rfind("iteration,wall_ms,log_pred,a_0_0,a_1_0,a_0_1,a_1_1", 0) == 0);
}

TEST_CASE("sampler config JSON: buffer modes and validation") {
  json_ns::json j = {{"K", 4},         {"family", "gaussian"}, {"L", 3},
                     {"batch_count", 7}, {"eps", 1e-3},          {"buffer", "none"}};
  auto cfg = sampler_config_from_json(j);
  REQUIRE(cfg.K == 4);
  REQUIRE(cfg.buffer_mode == SamplerConfig::BufferMode::None);

  j["buffer"] = {{"fixed", 6}};
  cfg = sampler_config_from_json(j);
  REQUIRE(cfg.buffer_mode == SamplerConfig::BufferMode::Fixed);
  REQUIRE(cfg.fixed_B == 6);

  auto echo = sampler_config_to_json(cfg);
  REQUIRE(echo["buffer"]["fixed"] == 6);

  j["buffer"] = "sometimes";
  REQUIRE_THROWS_AS(sampler_config_from_json(j), ValidationError);
  j["buffer"] = "none";
  j["prior"] = "bogus";
  REQUIRE_THROWS_AS(sampler_config_from_json(j), ValidationError);
}

TEST_CASE("cli: generate is deterministic and validates input") {
  auto dir = temp_dir("cli_gen");
  auto out1 = dir / "out1.json";
  auto out2 = dir / "out2.json";
  int rc1 = run_cli("generate --kind lognormal --T 500 --seed 9 --out " + (dir / "a").string(),
                    out1);
  int rc2 = run_cli("generate --kind lognormal --T 500 --seed 9 --out " + (dir / "b").string(),
                    out2);
  REQUIRE(rc1 == 0);
  REQUIRE(rc2 == 0);
  auto j1 = json_ns::json::parse(slurp(out1));
  auto j2 = json_ns::json::parse(slurp(out2));
  REQUIRE(j1["data_hash"] == j2["data_hash"]);
  REQUIRE(j1["truth_hash"] == j2["truth_hash"]);
  REQUIRE(fs::exists(dir / "a" / "manifest.json"));

  int rc_bad = run_cli("generate --kind rc --T 0 --out " + (dir / "c").string(), dir / "err.json");
  REQUIRE(rc_bad == 2);
}

TEST_CASE("cli: fit then eval end to end") {
  auto dir = temp_dir("cli_fit");
  REQUIRE(run_cli("generate --kind lognormal --T 2000 --seed 4 --out " + dir.string(),
                  dir / "gen.json") == 0);
  std::string fitdir = (dir / "fit").string();
  int rc = run_cli("fit --data " + (dir / "data.sghmm").string() +
                       " --method sg --buffer fixed:2 --K 2 --family lognormal --L 2"
                       " --batch-count 4 --eps 1e-3 --eps-transition 0.05 --n-iter 40"
                       " --n-steps 2 --seed 11 --prior std_normal_emissions --out " + fitdir,
                   dir / "fit.json");
  REQUIRE(rc == 0);
  REQUIRE(fs::exists(fs::path(fitdir) / "trace.ndjson"));
  REQUIRE(fs::exists(fs::path(fitdir) / "trace.csv"));
  REQUIRE(fs::exists(fs::path(fitdir) / "summary.json"));
  REQUIRE(fs::exists(fs::path(fitdir) / "manifest.json"));

  std::string evaldir = (dir / "eval").string();
  rc = run_cli("eval --data " + (dir / "data.sghmm").string() + " --trace " +
                   (fs::path(fitdir) / "trace.ndjson").string() + " --label sg --truth " +
                   (dir / "truth.json").string() + " --horizon 5 --points 20 --align-labels --out " +
                   evaldir,
               dir / "eval.json");
  REQUIRE(rc == 0);
  std::string metrics = slurp(fs::path(evaldir) / "metrics.csv");
  REQUIRE(metrics.find("mean_log_pred_5") != std::string::npos);
  REQUIRE(metrics.find("transition_error") != std::string::npos);

  // Missing trace file: nonzero exit, diagnostic names the path.
  rc = run_cli("eval --data " + (dir / "data.sghmm").string() + " --trace " +
                   (dir / "nope.ndjson").string() + " --out " + evaldir,
               dir / "eval2.json");
  REQUIRE(rc == 2);
}

TEST_CASE("cli: lyapunov subcommand emits JSON diagnostics") {
  auto dir = temp_dir("cli_lyap");
  REQUIRE(run_cli("generate --kind dd --T 3000 --seed 6 --out " + dir.string(),
                  dir / "gen.json") == 0);
  auto out = dir / "lyap.json";
  int rc = run_cli("lyapunov --data " + (dir / "data.sghmm").string() + " --params " +
                       (dir / "truth.json").string() + " --n-iter 2000 --seed 3",
                   out);
  REQUIRE(rc == 0);
  auto j = json_ns::json::parse(slurp(out));
  REQUIRE(j.contains("exponent"));
  REQUIRE(j.contains("std_error"));
  REQUIRE(j.contains("recommended_B"));
  REQUIRE(j.contains("nu"));
  REQUIRE(j["exponent"].get<double>() < 0.0);
  REQUIRE(j["recommended_B"].get<long>() >= 1);
}

TEST_CASE("cli: capacity errors exit with code 4") {
  auto dir = temp_dir("cli_cap");
  REQUIRE(run_cli("generate --kind lognormal --T 300 --seed 2 --out " + dir.string(),
                  dir / "gen.json") == 0);
  int rc = run_cli("fit --data " + (dir / "data.sghmm").string() +
                       " --method sg --buffer none --K 2 --family lognormal --L 40"
                       " --batch-count 30 --n-iter 3 --out " + (dir / "fit").string(),
                   dir / "fit.json");
  REQUIRE(rc == 4);
}
