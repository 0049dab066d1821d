#include "sbridge/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

namespace sbridge::run {

namespace fs = std::filesystem;

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string output_root(const cfg::ExperimentConfig& config) {
  if (const char* env = std::getenv("SBRIDGE_OUTPUT_ROOT"); env && *env) return env;
  return config.output_dir;
}

namespace {

json metric_to_json(const metrics::MetricValue& m) {
  json j;
  j["value"] = m.value;
  j["stderr"] = m.stderr_ ? json(*m.stderr_) : json(nullptr);
  j["n"] = m.n;
  j["method"] = m.method;
  return j;
}

json metrics_to_json(const drv::MetricMap& m) {
  json j = json::object();
  for (const auto& [name, v] : m) j[name] = metric_to_json(v);
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_runlog_header(std::ofstream& out) {
  out << "ipf_iter,phase,step,loss,elbo,path_kl,w2sq,wall_ms\n";
}

void write_runlog_row(std::ofstream& out, const drv::MetricRow& r) {
  out << r.ipf_iter << ',' << r.phase << ',' << r.step << ',' << fmt17(r.loss) << ','
      << fmt17(r.elbo) << ',' << fmt17(r.path_kl) << ',' << fmt17(r.w2sq) << ','
      << fmt17(r.wall_ms) << '\n';
  out.flush();  // partial logs must survive a mid-run abort
}

void write_traj_csv(std::ostream& out, const dyn::TrajectoryBatch& traj) {
  out << "traj_id,step,t";
  for (long j = 0; j < traj.dim; ++j) out << ",x" << j;
  out << '\n';
  for (long i = 0; i < traj.n; ++i)
    for (long k = 0; k <= traj.grid.n_steps; ++k) {
      out << i << ',' << k << ',' << fmt17(static_cast<double>(k) * traj.grid.dt);
      const Tensor& s = traj.states[static_cast<std::size_t>(k)];
      for (long j = 0; j < traj.dim; ++j) out << ',' << fmt17(s.at(i, j));
      out << '\n';
    }
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  drv::MetricMap finals;
  std::string checkpoint_path;
};

SeedOutcome run_one_seed(const cfg::ExperimentConfig& config, std::uint64_t seed,
                         const fs::path& dir) {
  fs::create_directories(dir);
  const std::string ckpt_path = (dir / "checkpoint.json").string();

  std::ofstream runlog(dir / "runlog.csv");
  if (!runlog) throw std::runtime_error("cannot write " + (dir / "runlog.csv").string());
  write_runlog_header(runlog);

  drv::RunHooks hooks;
  hooks.on_row = [&](const drv::MetricRow& r) { write_runlog_row(runlog, r); };
  hooks.on_iteration = [&](long iter, const ckpt::BridgeState& st) {
    ckpt::save_checkpoint(ckpt_path, config, seed, st);
    const auto& dumps = config.eval.traj_dump_iters;
    if (std::find(dumps.begin(), dumps.end(), iter) != dumps.end() &&
        config.eval.traj_dump_count > 0) {
      Rng rng = Rng::stream(seed, "traj_dump_" + std::to_string(iter));
      const dyn::TrajectoryBatch traj =
          drv::sample_bridge(config, st, config.eval.traj_dump_count, rng);
      std::ofstream out(dir / ("traj_ipf_" + std::to_string(iter) + ".csv"));
      write_traj_csv(out, traj);
    }
  };
  hooks.on_abort = [&](const ckpt::BridgeState& st) {
    ckpt::save_checkpoint(ckpt_path, config, seed, st);
    runlog.flush();
  };

  drv::RunResult res = drv::run_ipf(config, seed, hooks);

  ckpt::save_checkpoint(ckpt_path, config, seed, res.state);
  write_text((dir / "metrics.json").string(), metrics_to_json(res.final_metrics).dump(2) + "\n");

  SeedOutcome o;
  o.seed = seed;
  o.finals = std::move(res.final_metrics);
  o.checkpoint_path = ckpt_path;
  return o;
}

json aggregate_outcomes(const cfg::ExperimentConfig& config,
                        const std::vector<SeedOutcome>& outcomes) {
  json agg;
  agg["name"] = config.name;
  agg["config_hash"] = config.hash();
  agg["seeds"] = config.seeds;

  json per_metric = json::object();
  // Union of metric names across seeds, aggregated over whichever seeds
  // produced them.
  std::vector<std::string> names;
  for (const auto& o : outcomes)
    for (const auto& [name, v] : o.finals)
      if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
  std::sort(names.begin(), names.end());

  for (const auto& name : names) {
    std::vector<double> vals;
    for (const auto& o : outcomes)
      if (auto it = o.finals.find(name); it != o.finals.end()) vals.push_back(it->second.value);
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double sq = 0.0;
    for (double v : vals) sq += (v - mean) * (v - mean);
    const double std_dev =
        vals.size() > 1 ? std::sqrt(sq / static_cast<double>(vals.size() - 1)) : 0.0;
    per_metric[name] = {{"mean", mean},
                        {"std", std_dev},
                        {"n_seeds", vals.size()},
                        {"per_seed", vals}};
  }
  agg["metrics"] = per_metric;

  json hashes = json::object();
  for (const auto& o : outcomes)
    hashes[std::to_string(o.seed)] = ckpt::file_content_hash(o.checkpoint_path);
  agg["checkpoint_hashes"] = hashes;
  return agg;
}

}  // namespace

json run_experiment(const cfg::ExperimentConfig& config, bool parallel_seeds) {
  config.validate();
  const fs::path family_dir = fs::path(output_root(config)) / config.name;
  fs::create_directories(family_dir);

  const std::size_t n_seeds = config.seeds.size();
  std::vector<SeedOutcome> outcomes(n_seeds);
  std::vector<std::exception_ptr> failures(n_seeds);

  auto work = [&](std::size_t i) {
    const std::uint64_t seed = config.seeds[i];
    try {
      outcomes[i] = run_one_seed(config, seed, family_dir / ("seed_" + std::to_string(seed)));
    } catch (...) {
      failures[i] = std::current_exception();
    }
  };

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (parallel_seeds && n_seeds > 1 && hw > 1) {
    // Seeds are fully isolated (own rng streams, own graphs, own files), so
    // they fan out across threads; aggregation waits for all of them.
    std::vector<std::thread> pool;
    std::size_t next = 0;
    std::mutex mu;
    const unsigned n_workers = std::min<unsigned>(hw, static_cast<unsigned>(n_seeds));
    for (unsigned w = 0; w < n_workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next >= n_seeds) return;
            i = next++;
          }
          work(i);
        }
      });
    for (auto& t : pool) t.join();
  } else {
    for (std::size_t i = 0; i < n_seeds; ++i) work(i);
  }

  for (std::size_t i = 0; i < n_seeds; ++i)
    if (failures[i]) std::rethrow_exception(failures[i]);

  const json agg = aggregate_outcomes(config, outcomes);
  write_text((family_dir / "aggregate.json").string(), agg.dump(2) + "\n");
  return agg;
}

json sweep_experiment(const json& base_config, const std::string& axis,
                      const std::vector<json>& values, bool parallel_seeds) {
  if (values.empty()) throw cfg::ConfigError("sweep: need at least one value");

  json combined;
  combined["axis"] = axis;
  json rows = json::array();
  std::ostringstream csv;
  csv << "axis_value,metric,mean,std,n_seeds\n";

  std::string family_name;
  std::string root;
  for (const json& v : values) {
    json patched = cfg::set_by_path(base_config, axis, v);
    cfg::ExperimentConfig c = cfg::ExperimentConfig::from_json(patched);
    std::string vtag = v.is_string() ? v.get<std::string>() : v.dump();
    for (char& ch : vtag)
      if (ch == '.' || ch == '/' || ch == ' ') ch = '_';
    std::string atag = axis;
    for (char& ch : atag)
      if (ch == '.') ch = '_';
    if (family_name.empty()) family_name = c.name + "_sweep_" + atag;
    c.name = family_name + "/" + atag + "=" + vtag;
    c.validate();
    if (root.empty()) root = output_root(c);

    const json agg = run_experiment(c, parallel_seeds);
    json row;
    row["axis_value"] = v;
    row["aggregate"] = agg;
    rows.push_back(row);

    for (const auto& [metric, stats] : agg.at("metrics").items())
      csv << (v.is_string() ? v.get<std::string>() : v.dump()) << ',' << metric << ','
          << fmt17(stats.at("mean").get<double>()) << ','
          << fmt17(stats.at("std").get<double>()) << ',' << stats.at("n_seeds").get<long>()
          << '\n';
  }
  combined["runs"] = rows;

  const fs::path dir = fs::path(root) / family_name;
  fs::create_directories(dir);
  write_text((dir / "sweep.csv").string(), csv.str());
  write_text((dir / "sweep.json").string(), combined.dump(2) + "\n");
  return combined;
}

json eval_checkpoint(const std::string& checkpoint_path, const std::string& metric) {
  ckpt::Checkpoint c = ckpt::load_checkpoint(checkpoint_path);
  Rng rng = Rng::stream(c.seed, "final_eval");
  const drv::MetricMap all =
      drv::compute_metrics(c.config, c.state, c.config.eval.final_samples, rng);
  if (metric.empty() || metric == "all") return metrics_to_json(all);
  const auto it = all.find(metric);
  if (it == all.end()) {
    std::string known;
    for (const auto& [name, v] : all) known += (known.empty() ? "" : ", ") + name;
    throw cfg::ConfigError("eval: unknown or uncomputable metric '" + metric +
                           "' (available: " + known + ")");
  }
  json j = json::object();
  j[metric] = metric_to_json(it->second);
  return j;
}

void dump_trajectories(const std::string& checkpoint_path, long n, const std::string& out_path) {
  ckpt::Checkpoint c = ckpt::load_checkpoint(checkpoint_path);
  Rng rng = Rng::stream(c.seed, "traj_dump_cli");
  const dyn::TrajectoryBatch traj = drv::sample_bridge(c.config, c.state, n, rng);
  if (out_path.empty() || out_path == "-") {
    write_traj_csv(std::cout, traj);
  } else {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    write_traj_csv(out, traj);
  }
}

}  // namespace sbridge::run
