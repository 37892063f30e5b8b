#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sghmm/common.hpp"
#include "sghmm/eval.hpp"
#include "sghmm/hmm.hpp"
#include "sghmm/sampler.hpp"

// File formats:
//  - sequences: binary little-endian, magic "SGHMM1", u32 T, u32 d, then
//    T x d float64; or CSV with one row per timestep.
//  - parameters: JSON with an explicit "column_stochastic": true marker
//    (A(i,j) = Pr(x_t = i | x_{t-1} = j); rows of the JSON array are matrix
//    rows).
//  - traces: newline-delimited JSON records plus a CSV summary whose A
//    entries are flattened column-major.

namespace sghmm {

namespace json_ns = nlohmann;

inline void write_sequence(const std::string& path, const ObservationSequence& y) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open for writing: " + path);
  f.write("SGHMM1", 6);
  std::uint32_t T = static_cast<std::uint32_t>(y.T());
  std::uint32_t d = static_cast<std::uint32_t>(y.dim());
  f.write(reinterpret_cast<const char*>(&T), 4);
  f.write(reinterpret_cast<const char*>(&d), 4);
  for (long t = 0; t < y.T(); ++t)
    for (int i = 0; i < y.dim(); ++i) {
      double v = y.data(i, t);
      f.write(reinterpret_cast<const char*>(&v), 8);
    }
  if (!f) throw ValidationError("write failed: " + path);
}

inline ObservationSequence read_sequence(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open: " + path);
  char magic[6];
  f.read(magic, 6);
  if (!f || std::memcmp(magic, "SGHMM1", 6) != 0)
    throw ValidationError("not a SGHMM1 sequence file: " + path);
  std::uint32_t T = 0, d = 0;
  f.read(reinterpret_cast<char*>(&T), 4);
  f.read(reinterpret_cast<char*>(&d), 4);
  if (!f || T == 0 || d == 0) throw ValidationError("corrupt sequence header: " + path);
  ObservationSequence y;
  y.data.resize(d, T);
  for (std::uint32_t t = 0; t < T; ++t)
    for (std::uint32_t i = 0; i < d; ++i) {
      double v;
      f.read(reinterpret_cast<char*>(&v), 8);
      if (!f) throw ValidationError("truncated sequence file: " + path);
      y.data(i, t) = v;
    }
  validate(y);
  return y;
}

inline ObservationSequence read_csv_sequence(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ValidationError("CSV parse error in " + path + ": '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw ValidationError("CSV rows have inconsistent widths: " + path);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ValidationError("empty CSV sequence: " + path);
  ObservationSequence y;
  y.data.resize(rows.front().size(), rows.size());
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::size_t i = 0; i < rows[t].size(); ++i) y.data(i, t) = rows[t][i];
  validate(y);
  return y;
}

// Picks the reader from the extension: .csv goes through the CSV importer.
inline ObservationSequence load_sequence(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") return read_csv_sequence(path);
  return read_sequence(path);
}

inline json_ns::json emission_to_json(const Emission& e) {
  json_ns::json j;
  if (const auto* g = std::get_if<GaussianEmission>(&e)) {
    j["family"] = "gaussian";
    j["mu"] = std::vector<double>(g->mu.data(), g->mu.data() + g->mu.size());
    std::vector<std::vector<double>> sig(g->sigma.rows());
    for (int i = 0; i < g->sigma.rows(); ++i)
      for (int c = 0; c < g->sigma.cols(); ++c) sig[i].push_back(g->sigma(i, c));
    j["sigma"] = sig;
  } else {
    const auto& l = std::get<LogNormalEmission>(e);
    j["family"] = "lognormal";
    j["mu"] = l.mu;
    j["sigma"] = l.sigma;
  }
  return j;
}

inline Emission emission_from_json(const json_ns::json& j) {
  const std::string fam = j.at("family");
  if (fam == "gaussian") {
    GaussianEmission g;
    std::vector<double> mu = j.at("mu");
    g.mu = Eigen::Map<Vector>(mu.data(), mu.size());
    auto sig = j.at("sigma");
    g.sigma.resize(sig.size(), sig.size());
    for (std::size_t i = 0; i < sig.size(); ++i)
      for (std::size_t c = 0; c < sig[i].size(); ++c) g.sigma(i, c) = sig[i][c];
    return g;
  }
  if (fam == "lognormal") return LogNormalEmission{j.at("mu"), j.at("sigma")};
  throw ValidationError("unknown emission family in JSON: " + fam);
}

inline json_ns::json params_to_json(const HmmParams& p) {
  json_ns::json j;
  j["column_stochastic"] = true;
  j["K"] = p.K;
  std::vector<std::vector<double>> A(p.K);
  for (int i = 0; i < p.K; ++i)
    for (int c = 0; c < p.K; ++c) A[i].push_back(p.A(i, c));
  j["A"] = A;
  j["pi0"] = std::vector<double>(p.pi0.data(), p.pi0.data() + p.pi0.size());
  j["emissions"] = json_ns::json::array();
  for (const auto& e : p.emissions) j["emissions"].push_back(emission_to_json(e));
  return j;
}

inline HmmParams params_from_json(const json_ns::json& j) {
  if (!j.value("column_stochastic", false))
    throw ValidationError("params JSON must declare \"column_stochastic\": true");
  HmmParams p;
  p.K = j.at("K");
  auto A = j.at("A");
  p.A.resize(p.K, p.K);
  for (int i = 0; i < p.K; ++i)
    for (int c = 0; c < p.K; ++c) p.A(i, c) = A[i][c];
  std::vector<double> pi0 = j.at("pi0");
  p.pi0 = Eigen::Map<Vector>(pi0.data(), pi0.size());
  for (const auto& je : j.at("emissions")) p.emissions.push_back(emission_from_json(je));
  validate(p);
  return p;
}

inline HmmParams load_params(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open: " + path);
  json_ns::json j;
  f >> j;
  return params_from_json(j);
}

inline void save_json(const std::string& path, const json_ns::json& j) {
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot open for writing: " + path);
  f << j.dump(2) << "\n";
}

inline void write_trace_ndjson(const std::string& path, const Trace& trace) {
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot open for writing: " + path);
  for (const auto& s : trace.samples) {
    json_ns::json j;
    j["iter"] = s.iter;
    j["wall_ms"] = s.wall_ms;
    std::vector<double> a;
    a.reserve(s.A.size());
    for (int c = 0; c < s.A.cols(); ++c)
      for (int i = 0; i < s.A.rows(); ++i) a.push_back(s.A(i, c));
    j["A"] = a;  // column-major
    j["emissions"] = json_ns::json::array();
    for (const auto& e : s.emissions) j["emissions"].push_back(emission_to_json(e));
    if (std::isfinite(s.log_pred)) j["log_pred"] = s.log_pred;
    f << j.dump() << "\n";
  }
}

inline Trace read_trace_ndjson(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open: " + path);
  Trace trace;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json_ns::json j = json_ns::json::parse(line);
    TraceSample s;
    s.iter = j.at("iter");
    s.wall_ms = j.at("wall_ms");
    std::vector<double> a = j.at("A");
    int K = static_cast<int>(std::lround(std::sqrt(static_cast<double>(a.size()))));
    s.A.resize(K, K);
    for (int c = 0; c < K; ++c)
      for (int i = 0; i < K; ++i) s.A(i, c) = a[c * K + i];
    for (const auto& je : j.at("emissions")) s.emissions.push_back(emission_from_json(je));
    if (j.contains("log_pred")) s.log_pred = j.at("log_pred");
    trace.samples.push_back(std::move(s));
  }
  if (trace.samples.empty()) throw ValidationError("empty trace file: " + path);
  return trace;
}

inline void write_trace_csv(const std::string& path, const Trace& trace) {
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot open for writing: " + path);
  f << "iteration,wall_ms,log_pred";
  if (!trace.samples.empty()) {
    int K = static_cast<int>(trace.samples.front().A.rows());
    for (int c = 0; c < K; ++c)
      for (int i = 0; i < K; ++i) f << ",a_" << i << "_" << c;
  }
  f << "\n";
  f.precision(17);
  for (const auto& s : trace.samples) {
    f << s.iter << "," << s.wall_ms << ",";
    if (std::isfinite(s.log_pred)) f << s.log_pred;
    for (int c = 0; c < s.A.cols(); ++c)
      for (int i = 0; i < s.A.rows(); ++i) f << "," << s.A(i, c);
    f << "\n";
  }
}

inline std::uint64_t hash_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open: " + path);
  char buf[1 << 16];
  std::uint64_t h = 0xcbf29ce484222325ull;
  while (f) {
    f.read(buf, sizeof(buf));
    h = fnv1a(buf, static_cast<std::size_t>(f.gcount()), h);
  }
  return h;
}

// Every run directory gets a manifest: the effective config plus content
// hashes of the inputs, enough to re-run exactly.
inline void write_manifest(const std::string& dir, const std::string& command,
                           const json_ns::json& config_echo,
                           const std::vector<std::pair<std::string, std::string>>& input_hashes) {
  json_ns::json j;
  j["command"] = command;
  j["config"] = config_echo;
  j["inputs"] = json_ns::json::object();
  for (const auto& [name, hash] : input_hashes) j["inputs"][name] = hash;
  save_json((std::filesystem::path(dir) / "manifest.json").string(), j);
}

inline SamplerConfig sampler_config_from_json(const json_ns::json& j) {
  SamplerConfig cfg;
  cfg.K = j.value("K", cfg.K);
  cfg.family = j.value("family", cfg.family);
  cfg.L = j.value("L", cfg.L);
  cfg.batch_count = j.value("batch_count", cfg.batch_count);
  cfg.eps = j.value("eps", cfg.eps);
  cfg.eps_transition = j.value("eps_transition", cfg.eps_transition);
  cfg.n_iter = j.value("n_iter", cfg.n_iter);
  cfg.n_steps = j.value("n_steps", cfg.n_steps);
  cfg.fixed_B = j.value("fixed_B", cfg.fixed_B);
  cfg.delta = j.value("delta", cfg.delta);
  cfg.delta0 = j.value("delta0", cfg.delta0);
  cfg.B_max = j.value("B_max", cfg.B_max);
  cfg.reestimate_every = j.value("reestimate_every", cfg.reestimate_every);
  cfg.lyapunov_iters = j.value("lyapunov_iters", cfg.lyapunov_iters);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.thin = j.value("thin", cfg.thin);
  cfg.averaging = j.value("averaging", cfg.averaging);
  cfg.estimate_noise = j.value("estimate_noise", cfg.estimate_noise);
  cfg.decay_gamma = j.value("decay_gamma", cfg.decay_gamma);
  cfg.decay_b = j.value("decay_b", cfg.decay_b);
  if (j.contains("buffer")) {
    const auto& b = j.at("buffer");
    if (b.is_string()) {
      std::string mode = b;
      if (mode == "adaptive")
        cfg.buffer_mode = SamplerConfig::BufferMode::Adaptive;
      else if (mode == "none")
        cfg.buffer_mode = SamplerConfig::BufferMode::None;
      else
        throw ValidationError("config: buffer must be \"adaptive\", \"none\" or {\"fixed\": B}");
    } else {
      cfg.buffer_mode = SamplerConfig::BufferMode::Fixed;
      cfg.fixed_B = b.at("fixed");
      if (cfg.fixed_B < 0) throw ValidationError("config: fixed buffer must be >= 0");
    }
  }
  std::string prior = j.value("prior", "flat");
  if (prior == "flat")
    cfg.prior = Prior::flat();
  else if (prior == "std_normal_emissions")
    cfg.prior = Prior::std_normal_emissions();
  else
    throw ValidationError("config: unknown prior " + prior);
  return cfg;
}

inline json_ns::json sampler_config_to_json(const SamplerConfig& cfg) {
  json_ns::json j;
  j["K"] = cfg.K;
  j["family"] = cfg.family;
  j["L"] = cfg.L;
  j["batch_count"] = cfg.batch_count;
  j["eps"] = cfg.eps;
  j["eps_transition"] = cfg.eps_transition;
  j["n_iter"] = cfg.n_iter;
  j["n_steps"] = cfg.n_steps;
  switch (cfg.buffer_mode) {
    case SamplerConfig::BufferMode::Adaptive: j["buffer"] = "adaptive"; break;
    case SamplerConfig::BufferMode::None: j["buffer"] = "none"; break;
    case SamplerConfig::BufferMode::Fixed: j["buffer"] = {{"fixed", cfg.fixed_B}}; break;
  }
  j["delta"] = cfg.delta;
  j["delta0"] = cfg.delta0;
  j["B_max"] = cfg.B_max;
  j["reestimate_every"] = cfg.reestimate_every;
  j["lyapunov_iters"] = cfg.lyapunov_iters;
  j["seed"] = cfg.seed;
  j["thin"] = cfg.thin;
  j["averaging"] = cfg.averaging;
  j["estimate_noise"] = cfg.estimate_noise;
  j["decay_gamma"] = cfg.decay_gamma;
  j["decay_b"] = cfg.decay_b;
  j["prior"] = cfg.prior.emissions == Prior::Emissions::StdNormal ? "std_normal_emissions" : "flat";
  return j;
}

}  // namespace sghmm
