// Command-line front end: generate | fit | eval | lyapunov.
//
// Machine-readable output goes to stdout and files; progress to stderr.
// Exit codes: 0 ok, 2 config error, 3 numeric error, 4 capacity error.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sghmm/adaptivity.hpp"
#include "sghmm/eval.hpp"
#include "sghmm/io.hpp"
#include "sghmm/sampler.hpp"

namespace fs = std::filesystem;
using sghmm::json_ns::json;

namespace {

struct FitOptions {
  std::string data_path;
  std::string method = "sg";
  std::string config_path;
  std::string out_dir = ".";
  std::string buffer = "adaptive";
  std::string dump_gradient_path;
  json overrides = json::object();
};

sghmm::SamplerConfig resolve_fit_config(const FitOptions& opt) {
  json merged = json::object();
  if (!opt.config_path.empty()) {
    std::ifstream f(opt.config_path);
    if (!f) throw sghmm::ValidationError("cannot open config: " + opt.config_path);
    f >> merged;
  }
  for (auto& [k, v] : opt.overrides.items()) merged[k] = v;

  if (opt.buffer == "adaptive" || opt.buffer == "none") {
    merged["buffer"] = opt.buffer;
  } else if (opt.buffer.rfind("fixed:", 0) == 0) {
    long b = std::stol(opt.buffer.substr(6));
    merged["buffer"] = {{"fixed", b}};
  } else {
    throw sghmm::ValidationError("--buffer must be adaptive | none | fixed:B");
  }
  return sghmm::sampler_config_from_json(merged);
}

int run_generate(const std::string& kind_str, long T, std::uint64_t seed,
                 const std::string& out_dir) {
  auto kind = sghmm::dataset_kind_from_string(kind_str);
  if (T < 1) throw sghmm::ValidationError("generate: --T must be >= 1");
  fs::create_directories(out_dir);
  sghmm::Dataset ds = sghmm::make_dataset(kind, T, seed);

  const std::string data_path = (fs::path(out_dir) / "data.sghmm").string();
  const std::string truth_path = (fs::path(out_dir) / "truth.json").string();
  sghmm::write_sequence(data_path, ds.observations);
  sghmm::save_json(truth_path, sghmm::params_to_json(ds.truth));

  json echo = {{"kind", kind_str}, {"T", T}, {"seed", seed}};
  std::vector<std::pair<std::string, std::string>> hashes = {
      {"data.sghmm", sghmm::hash_hex(sghmm::hash_file(data_path))},
      {"truth.json", sghmm::hash_hex(sghmm::hash_file(truth_path))}};
  sghmm::write_manifest(out_dir, "generate", echo, hashes);

  json out = {{"data", data_path},
              {"truth", truth_path},
              {"data_hash", hashes[0].second},
              {"truth_hash", hashes[1].second}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int run_fit(const FitOptions& opt) {
  sghmm::SamplerConfig cfg = resolve_fit_config(opt);
  sghmm::ObservationSequence y = sghmm::load_sequence(opt.data_path);
  fs::create_directories(opt.out_dir);

  if (!opt.dump_gradient_path.empty()) {
    // Debugging aid: one stochastic gradient at the k-means initialization.
    sghmm::SamplerConfig probe = cfg;
    probe.n_iter = 0;
    sghmm::Rng rng = sghmm::make_rng(cfg.seed, 1);
    auto emissions = sghmm::detail::kmeans_init(y, cfg.K, cfg.family, rng);
    sghmm::HmmParams p;
    p.K = cfg.K;
    p.A = sghmm::Matrix::Constant(cfg.K, cfg.K, 1.0 / cfg.K);
    p.emissions = emissions;
    p.pi0 = sghmm::Vector::Constant(cfg.K, 1.0 / cfg.K);
    long B = cfg.buffer_mode == sghmm::SamplerConfig::BufferMode::Fixed ? cfg.fixed_B : 0;
    auto batch = sghmm::sample_minibatch(y.T(), cfg.L, B, 1, cfg.batch_count, cfg.seed);
    auto g = sghmm::stochastic_gradient(p, cfg.prior, y, batch, true);
    json dump;
    std::vector<double> da;
    for (int c = 0; c < cfg.K; ++c)
      for (int i = 0; i < cfg.K; ++i) da.push_back(g.dA_hat(i, c));
    dump["dA_hat"] = da;
    dump["minibatch_log_prob"] = batch.log_prob;
    sghmm::save_json(opt.dump_gradient_path, dump);
  }

  std::cerr << "[sghmm] fitting method=" << opt.method << " K=" << cfg.K
            << " T=" << y.T() << "\n";
  cfg.progress = [](long n, long total) {
    const long stride = std::max<long>(1, total / 20);
    if (n % stride == 0) std::cerr << "[sghmm] iteration " << n << " / " << total << "\n";
  };
  sghmm::Trace trace;
  if (opt.method == "sg") {
    trace = sghmm::run_sg_mcmc(y, cfg);
  } else if (opt.method == "batch") {
    trace = sghmm::run_batch_rld(y, cfg);
  } else if (opt.method == "iid") {
    trace = sghmm::iid_baseline_fit(y, cfg.K, cfg);
  } else {
    throw sghmm::ValidationError("--method must be sg | batch | iid");
  }

  const std::string nd_path = (fs::path(opt.out_dir) / "trace.ndjson").string();
  const std::string csv_path = (fs::path(opt.out_dir) / "trace.csv").string();
  sghmm::write_trace_ndjson(nd_path, trace);
  sghmm::write_trace_csv(csv_path, trace);

  json summary;
  summary["method"] = opt.method;
  summary["n_samples"] = trace.samples.size();
  summary["eps_shrink_events"] = trace.eps_shrink_events;
  summary["sigma_rejections"] = trace.sigma_rejections;
  summary["total_wall_ms"] = trace.samples.empty() ? 0.0 : trace.samples.back().wall_ms;
  summary["adaptation"] = json::array();
  for (const auto& a : trace.adaptation)
    summary["adaptation"].push_back({{"iter", a.iter},
                                     {"B", a.B},
                                     {"nu", a.nu},
                                     {"lyapunov", a.lyapunov},
                                     {"warning", a.warning}});
  sghmm::save_json((fs::path(opt.out_dir) / "summary.json").string(), summary);

  json echo = sghmm::sampler_config_to_json(cfg);
  echo["method"] = opt.method;
  echo["data"] = opt.data_path;
  sghmm::write_manifest(opt.out_dir, "fit", echo,
                        {{"data", sghmm::hash_hex(sghmm::hash_file(opt.data_path))}});
  std::cout << json{{"trace", nd_path}, {"summary", "summary.json"}}.dump(2) << "\n";
  return 0;
}

sghmm::HmmParams posterior_mean_params(const sghmm::Trace& trace, double tail_frac = 0.5) {
  const auto& samples = trace.samples;
  std::size_t start = static_cast<std::size_t>(samples.size() * (1.0 - tail_frac));
  if (start >= samples.size()) start = samples.size() - 1;
  sghmm::Matrix A = sghmm::Matrix::Zero(samples.back().A.rows(), samples.back().A.cols());
  sghmm::detail::EmissionRunningMean em;
  long n = 0;
  for (std::size_t i = start; i < samples.size(); ++i) {
    A += samples[i].A;
    em.accumulate(samples[i].emissions);
    ++n;
  }
  sghmm::HmmParams p;
  p.K = static_cast<int>(A.rows());
  p.A = A / static_cast<double>(n);
  for (int j = 0; j < p.K; ++j) p.A.col(j) /= p.A.col(j).sum();
  p.emissions = em.mean();
  p.pi0 = sghmm::Vector::Constant(p.K, 1.0 / p.K);
  return p;
}

int run_eval(const std::string& data_path, const std::vector<std::string>& trace_paths,
             const std::vector<std::string>& labels, const std::string& truth_path, long horizon,
             double tail_frac, long n_points, bool model_select, const std::string& test_data,
             bool align_labels, bool emit_plot_data, const std::string& out_dir) {
  fs::create_directories(out_dir);
  sghmm::ObservationSequence y = sghmm::load_sequence(data_path);

  std::vector<sghmm::Trace> traces;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < trace_paths.size(); ++i) {
    traces.push_back(sghmm::read_trace_ndjson(trace_paths[i]));
    names.push_back(i < labels.size() ? labels[i] : "trace" + std::to_string(i));
  }
  if (traces.empty()) throw sghmm::ValidationError("eval: no --trace given");

  long first = static_cast<long>(y.T() * (1.0 - tail_frac));
  auto points = sghmm::evaluation_points(first, y.T(), horizon, n_points);

  std::ofstream metrics((fs::path(out_dir) / "metrics.csv").string());
  metrics << "method,wall_ms,metric,value\n";
  metrics.precision(17);

  sghmm::HmmParams truth;
  bool have_truth = !truth_path.empty();
  if (have_truth) truth = sghmm::load_params(truth_path);

  for (std::size_t i = 0; i < traces.size(); ++i) {
    auto params = posterior_mean_params(traces[i]);
    double wall = traces[i].samples.back().wall_ms;
    auto rep = sghmm::predictive_report(params, y, points, horizon);
    metrics << names[i] << "," << wall << ",mean_log_pred_" << horizon << "," << rep.mean << "\n";
    metrics << names[i] << "," << wall << ",se_log_pred_" << horizon << "," << rep.se << "\n";
    if (have_truth) {
      auto err = sghmm::transition_error(params.A, truth.A, align_labels);
      metrics << names[i] << "," << wall << ",transition_error," << err.error << "\n";
    }
    if (emit_plot_data) {
      std::ofstream curve((fs::path(out_dir) / ("curve_" + names[i] + ".csv")).string());
      curve << "iter,wall_ms,mean_log_pred";
      if (have_truth) curve << ",transition_error";
      curve << "\n";
      curve.precision(17);
      const auto& samples = traces[i].samples;
      std::size_t stride = std::max<std::size_t>(1, samples.size() / 60);
      for (std::size_t s = 0; s < samples.size(); s += stride) {
        sghmm::HmmParams ps;
        ps.K = static_cast<int>(samples[s].A.rows());
        ps.A = samples[s].A;
        ps.emissions = samples[s].emissions;
        ps.pi0 = sghmm::Vector::Constant(ps.K, 1.0 / ps.K);
        auto r = sghmm::predictive_report(ps, y, points, horizon);
        curve << samples[s].iter << "," << samples[s].wall_ms << "," << r.mean;
        if (have_truth)
          curve << "," << sghmm::transition_error(ps.A, truth.A, align_labels).error;
        curve << "\n";
      }
    }
  }

  // Cross-trace transition error, pairwise against the first trace.
  for (std::size_t i = 1; i < traces.size(); ++i) {
    auto a = posterior_mean_params(traces[0]);
    auto b = posterior_mean_params(traces[i]);
    auto err = sghmm::transition_error(b.A, a.A, align_labels);
    metrics << names[i] << "_vs_" << names[0] << ",0,transition_error," << err.error << "\n";
  }

  if (model_select) {
    if (test_data.empty())
      throw sghmm::ValidationError("eval --model-select requires --test-data");
    sghmm::ObservationSequence yt = sghmm::load_sequence(test_data);
    std::ofstream ms((fs::path(out_dir) / "model_selection.csv").string());
    ms << "label,score\n";
    ms.precision(17);
    std::vector<std::pair<std::string, double>> ranking;
    for (std::size_t i = 0; i < traces.size(); ++i) {
      sghmm::Trace tail;
      const auto& s = traces[i].samples;
      std::size_t start = s.size() / 2;
      std::size_t stride = std::max<std::size_t>(1, (s.size() - start) / 200);
      for (std::size_t k = start; k < s.size(); k += stride) tail.samples.push_back(s[k]);
      double score = sghmm::model_selection_score(yt, tail);
      ms << names[i] << "," << score << "\n";
      ranking.emplace_back(names[i], score);
    }
    std::sort(ranking.begin(), ranking.end(),
              [](const auto& a, const auto& b) { return a.second > b.second; });
    json jr = json::array();
    for (auto& [n, s] : ranking) jr.push_back({{"label", n}, {"score", s}});
    std::cout << jr.dump(2) << "\n";
  }

  json echo = {{"data", data_path}, {"horizon", horizon}, {"points", n_points}};
  sghmm::write_manifest(out_dir, "eval", echo,
                        {{"data", sghmm::hash_hex(sghmm::hash_file(data_path))}});
  return 0;
}

int run_lyapunov(const std::string& data_path, const std::string& params_path, long n_iter,
                 std::uint64_t seed, long L, double delta, double delta0, long B_max) {
  sghmm::ObservationSequence y = sghmm::load_sequence(data_path);
  sghmm::HmmParams p = sghmm::load_params(params_path);
  auto est = sghmm::estimate_lyapunov(p, y, n_iter, seed);
  auto pol = sghmm::buffer_length(est, delta, delta0, B_max);
  auto gp = sghmm::gap_policy(p.A, L, pol.B, y.T());
  json out = {{"exponent", est.exponent},
              {"std_error", est.std_error},
              {"n_samples", est.n_samples},
              {"recommended_B", pol.B},
              {"B_warning", pol.warning},
              {"nu", gp.nu},
              {"lambda2", gp.lambda2},
              {"min_gap", gp.min_gap}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Buffered stochastic-gradient MCMC for hidden Markov models"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Simulate a benchmark dataset");
  std::string gen_kind = "dd", gen_out = ".";
  long gen_T = 50000;
  std::uint64_t gen_seed = 1;
  gen->add_option("--kind", gen_kind, "dd | rc | lognormal")->required();
  gen->add_option("--T", gen_T, "sequence length")->required();
  gen->add_option("--seed", gen_seed, "rng seed");
  gen->add_option("--out", gen_out, "output directory");

  // fit
  auto* fit = app.add_subcommand("fit", "Run a sampler and write its trace");
  FitOptions fopt;
  fit->add_option("--data", fopt.data_path, "sequence file (.sghmm or .csv)")->required();
  fit->add_option("--method", fopt.method, "sg | batch | iid");
  fit->add_option("--config", fopt.config_path, "JSON config file");
  fit->add_option("--out", fopt.out_dir, "output directory");
  fit->add_option("--buffer", fopt.buffer, "adaptive | none | fixed:B");
  fit->add_option("--dump-gradient", fopt.dump_gradient_path,
                  "write one stochastic gradient at init to this JSON file");
  long f_K = -1, f_L = -1, f_batch = -1, f_niter = -1, f_nsteps = -1, f_thin = -1;
  double f_eps = -1, f_epst = -1;
  std::uint64_t f_seed = 0;
  bool f_have_seed = false;
  std::string f_family, f_prior;
  fit->add_option("--K", f_K, "state count");
  fit->add_option("--family", f_family, "gaussian | lognormal");
  fit->add_option("--L", f_L, "subsequence half-width");
  fit->add_option("--batch-count", f_batch, "windows per minibatch");
  fit->add_option("--eps", f_eps, "emission-block step size");
  fit->add_option("--eps-transition", f_epst, "transition-block step size");
  fit->add_option("--n-iter", f_niter, "outer iterations");
  fit->add_option("--n-steps", f_nsteps, "inner steps per block");
  fit->add_option("--thin", f_thin, "record every thin-th outer iteration");
  fit->add_option("--seed", f_seed, "rng seed")->each([&](const std::string&) { f_have_seed = true; });
  fit->add_option("--prior", f_prior, "flat | std_normal_emissions");

  // eval
  auto* ev = app.add_subcommand("eval", "Compute metrics from traces");
  std::string e_data, e_truth, e_test, e_out = ".";
  std::vector<std::string> e_traces, e_labels;
  long e_horizon = 10, e_points = 100;
  double e_tail = 0.1;
  bool e_model_select = false, e_align = false, e_plot = false;
  ev->add_option("--data", e_data, "sequence file")->required();
  ev->add_option("--trace", e_traces, "trace.ndjson (repeatable)")->required();
  ev->add_option("--label", e_labels, "label per trace (repeatable)");
  ev->add_option("--truth", e_truth, "truth params JSON");
  ev->add_option("--horizon", e_horizon, "predictive horizon");
  ev->add_option("--points", e_points, "evaluation points");
  ev->add_option("--eval-tail-frac", e_tail, "fraction of the sequence used as held-out tail");
  ev->add_flag("--model-select", e_model_select, "rank traces by held-out score");
  ev->add_option("--test-data", e_test, "held-out sequence for --model-select");
  ev->add_flag("--align-labels", e_align, "permutation-minimized transition error");
  ev->add_flag("--emit-plot-data", e_plot, "write per-iteration curves");
  ev->add_option("--out", e_out, "output directory");

  // lyapunov
  auto* ly = app.add_subcommand("lyapunov", "Estimate the Lyapunov exponent and buffer length");
  std::string l_data, l_params;
  long l_niter = 5000, l_L = 2, l_Bmax = 50;
  std::uint64_t l_seed = 1;
  double l_delta = 1e-3, l_delta0 = 2.0;
  ly->add_option("--data", l_data, "sequence file")->required();
  ly->add_option("--params", l_params, "params JSON")->required();
  ly->add_option("--n-iter", l_niter, "Monte Carlo iterations");
  ly->add_option("--seed", l_seed, "rng seed");
  ly->add_option("--L", l_L, "half-width used for the gap report");
  ly->add_option("--delta", l_delta, "error tolerance");
  ly->add_option("--delta0", l_delta0, "initial error bound");
  ly->add_option("--B-max", l_Bmax, "buffer cap");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return run_generate(gen_kind, gen_T, gen_seed, gen_out);
    if (fit->parsed()) {
      if (f_K >= 0) fopt.overrides["K"] = f_K;
      if (!f_family.empty()) fopt.overrides["family"] = f_family;
      if (f_L >= 0) fopt.overrides["L"] = f_L;
      if (f_batch >= 0) fopt.overrides["batch_count"] = f_batch;
      if (f_eps >= 0) fopt.overrides["eps"] = f_eps;
      if (f_epst >= 0) fopt.overrides["eps_transition"] = f_epst;
      if (f_niter >= 0) fopt.overrides["n_iter"] = f_niter;
      if (f_nsteps >= 0) fopt.overrides["n_steps"] = f_nsteps;
      if (f_thin >= 0) fopt.overrides["thin"] = f_thin;
      if (f_have_seed) fopt.overrides["seed"] = f_seed;
      if (!f_prior.empty()) fopt.overrides["prior"] = f_prior;
      return run_fit(fopt);
    }
    if (ev->parsed())
      return run_eval(e_data, e_traces, e_labels, e_truth, e_horizon, e_tail, e_points,
                      e_model_select, e_test, e_align, e_plot, e_out);
    if (ly->parsed())
      return run_lyapunov(l_data, l_params, l_niter, l_seed, l_L, l_delta, l_delta0, l_Bmax);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const sghmm::CapacityError& e) {
    std::cerr << "capacity error: " << e.what() << "\n";
    return 4;
  } catch (const sghmm::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const sghmm::ValidationError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
