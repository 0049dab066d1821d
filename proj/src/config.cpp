#include "sbridge/config.hpp"

#include <fstream>
#include <sstream>

namespace sbridge::cfg {

namespace {

Tensor to_tensor_1d(const std::vector<double>& v) {
  Tensor t({static_cast<long>(v.size())});
  std::copy(v.begin(), v.end(), t.data());
  return t;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  return j.at(key).get<T>();
}

void expect_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
}

// A typo'd key would otherwise be silently ignored and the default used instead.
void reject_unknown(const json& j, const std::string& where,
                    std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool known = false;
    for (const char* a : allowed)
      if (key == a) {
        known = true;
        break;
      }
    if (!known) throw ConfigError(where + "." + key + ": unknown key");
  }
}

}  // namespace

std::string to_string(Regime r) {
  switch (r) {
    case Regime::kDataToData: return "data_to_data";
    case Regime::kDataToEnergy: return "data_to_energy";
    case Regime::kEnergyToEnergy: return "energy_to_energy";
  }
  return "?";
}

Regime regime_from_string(const std::string& s) {
  if (s == "data_to_data") return Regime::kDataToData;
  if (s == "data_to_energy") return Regime::kDataToEnergy;
  if (s == "energy_to_energy") return Regime::kEnergyToEnergy;
  throw ConfigError("regime: unknown value '" + s +
                    "' (expected data_to_data | data_to_energy | energy_to_energy)");
}

targets::TargetPtr TargetSpec::build() const {
  if (kind == "gauss") return targets::make_gauss(to_tensor_1d(mean), sigma, energy_shift);
  if (kind == "diag_gauss")
    return targets::make_diag_gauss(to_tensor_1d(mean), to_tensor_1d(sigmas), energy_shift);
  if (kind == "gmm") {
    const long c = static_cast<long>(means.size());
    const long d = c > 0 ? static_cast<long>(means.front().size()) : 0;
    Tensor m({c, d});
    for (long i = 0; i < c; ++i) {
      if (static_cast<long>(means[static_cast<std::size_t>(i)].size()) != d)
        throw ConfigError("gmm: ragged means");
      for (long j = 0; j < d; ++j) m.at(i, j) = means[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    return targets::make_gmm(std::move(m), to_tensor_1d(sigmas), to_tensor_1d(weights),
                             energy_shift);
  }
  if (kind == "gmm_ring") return targets::make_gmm_ring(n_components, radius, sigma, energy_shift);
  if (kind == "two_moons") return targets::make_two_moons(noise);
  throw ConfigError("target kind: unknown value '" + kind + "'");
}

Tensor TargetSpec::mixture_means() const {
  if (kind == "gmm") {
    const long c = static_cast<long>(means.size());
    const long d = dim();
    Tensor m({c, d});
    for (long i = 0; i < c; ++i)
      for (long j = 0; j < d; ++j)
        m.at(i, j) = means[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    return m;
  }
  if (kind == "gmm_ring") {
    Tensor m({n_components, 2});
    for (long c = 0; c < n_components; ++c) {
      const double a = 2.0 * M_PI * static_cast<double>(c) / static_cast<double>(n_components);
      m.at(c, 0) = radius * std::cos(a);
      m.at(c, 1) = radius * std::sin(a);
    }
    return m;
  }
  throw ConfigError("mixture_means: target kind '" + kind + "' is not a mixture");
}

double TargetSpec::mixture_sigma() const {
  if (kind == "gmm_ring") return sigma;
  if (kind == "gmm") {
    if (sigmas.empty()) throw ConfigError("mixture_sigma: gmm has no component widths");
    double s = 0.0;
    for (double v : sigmas) s += v;
    return s / static_cast<double>(sigmas.size());
  }
  throw ConfigError("mixture_sigma: target kind '" + kind + "' is not a mixture");
}

long TargetSpec::dim() const {
  if (kind == "gauss" || kind == "diag_gauss") return static_cast<long>(mean.size());
  if (kind == "gmm") return means.empty() ? 0 : static_cast<long>(means.front().size());
  if (kind == "gmm_ring" || kind == "two_moons") return 2;
  return 0;
}

json TargetSpec::to_json() const {
  json j;
  j["kind"] = kind;
  if (kind == "gauss") {
    j["mean"] = mean;
    j["sigma"] = sigma;
  } else if (kind == "diag_gauss") {
    j["mean"] = mean;
    j["sigmas"] = sigmas;
  } else if (kind == "gmm") {
    j["means"] = means;
    j["sigmas"] = sigmas;
    j["weights"] = weights;
  } else if (kind == "gmm_ring") {
    j["n_components"] = n_components;
    j["radius"] = radius;
    j["sigma"] = sigma;
  } else if (kind == "two_moons") {
    j["noise"] = noise;
  }
  if (energy_shift != 0.0) j["energy_shift"] = energy_shift;
  return j;
}

TargetSpec TargetSpec::from_json(const json& j, const std::string& where) {
  expect_object(j, where);
  reject_unknown(j, where,
                 {"kind", "mean", "sigma", "sigmas", "means", "weights", "n_components", "radius",
                  "noise", "energy_shift"});
  TargetSpec s;
  if (!j.contains("kind")) throw ConfigError(where + ".kind: missing");
  s.kind = j.at("kind").get<std::string>();
  s.mean = get_or(j, "mean", std::vector<double>{});
  s.sigma = get_or(j, "sigma", 1.0);
  s.sigmas = get_or(j, "sigmas", std::vector<double>{});
  s.means = get_or(j, "means", std::vector<std::vector<double>>{});
  s.weights = get_or(j, "weights", std::vector<double>{});
  s.n_components = get_or(j, "n_components", 8L);
  s.radius = get_or(j, "radius", 4.0);
  s.noise = get_or(j, "noise", 0.1);
  s.energy_shift = get_or(j, "energy_shift", 0.0);
  return s;
}

void ExperimentConfig::validate() const {
  std::vector<std::string> errs;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errs.push_back(msg);
  };

  check(!name.empty(), "name: must be non-empty");

  targets::TargetPtr src, tgt;
  try {
    src = source.build();
  } catch (const std::exception& e) {
    errs.push_back(std::string("source: ") + e.what());
  }
  try {
    tgt = target.build();
  } catch (const std::exception& e) {
    errs.push_back(std::string("target: ") + e.what());
  }

  if (src && tgt) {
    check(src->dim() == tgt->dim(), "source/target: dimension mismatch (" +
                                        std::to_string(src->dim()) + " vs " +
                                        std::to_string(tgt->dim()) + ")");
    using targets::Cap;
    switch (regime) {
      case Regime::kDataToData:
        check(src->has(Cap::kSample), "source: data_to_data requires a sampler on p0");
        check(tgt->has(Cap::kSample), "target: data_to_data requires a sampler on p1");
        break;
      case Regime::kDataToEnergy:
        check(src->has(Cap::kSample), "source: data_to_energy requires a sampler on p0");
        check(tgt->has(Cap::kEnergy), "target: data_to_energy requires an energy on p1");
        if (offpolicy.plan.langevin.enabled)
          check(tgt->has(Cap::kScore),
                "offpolicy.langevin: enabled but target has no score capability");
        break;
      case Regime::kEnergyToEnergy:
        check(src->has(Cap::kEnergy), "source: energy_to_energy requires an energy on p0");
        check(tgt->has(Cap::kEnergy), "target: energy_to_energy requires an energy on p1");
        if (offpolicy.plan.langevin.enabled) {
          check(src->has(Cap::kScore),
                "offpolicy.langevin: enabled but source has no score capability");
          check(tgt->has(Cap::kScore),
                "offpolicy.langevin: enabled but target has no score capability");
        }
        check(offpolicy.plan.ratio >= 1.0 && !offpolicy.plan.anneal,
              "offpolicy.ratio: energy_to_energy training is buffer-only; set ratio to 1.0");
        break;
    }
  }

  try {
    grid.validate();
  } catch (const std::exception& e) {
    errs.push_back(std::string("grid: ") + e.what());
  }
  try {
    reference.validate();
  } catch (const std::exception& e) {
    errs.push_back(std::string("reference: ") + e.what());
  }
  try {
    offpolicy.plan.validate();
  } catch (const std::exception& e) {
    errs.push_back(std::string("offpolicy: ") + e.what());
  }

  check(net.hidden_dim > 0, "net.hidden_dim: must be positive");
  check(net.n_hidden >= 0, "net.n_hidden: must be >= 0");

  check(schedule.n_ipf_iterations >= 0, "schedule.n_ipf_iterations: must be >= 0");
  check(schedule.steps_per_backward_phase > 0,
        "schedule.steps_per_backward_phase: must be positive");
  check(schedule.steps_per_forward_phase > 0,
        "schedule.steps_per_forward_phase: must be positive");
  check(schedule.batch_size > 0, "schedule.batch_size: must be positive");
  const bool uses_variance_loss = regime != Regime::kDataToData;
  if (uses_variance_loss)
    check(schedule.n_traj_per_x0 >= 2,
          "schedule.n_traj_per_x0: variance losses need N >= 2");

  check(optimizer.lr > 0.0, "optimizer.lr: must be positive");
  check(optimizer.grad_clip > 0.0, "optimizer.grad_clip: must be positive");
  check(optimizer.weight_decay >= 0.0, "optimizer.weight_decay: must be >= 0");

  check(offpolicy.buffer_capacity > 0, "offpolicy.buffer_capacity: must be positive");
  check(offpolicy.reinit_fraction >= 0.0 && offpolicy.reinit_fraction <= 1.0,
        "offpolicy.reinit_fraction: must be in [0,1]");

  check(eval.samples_per_phase > 0, "eval.samples_per_phase: must be positive");
  check(eval.final_samples > 0, "eval.final_samples: must be positive");
  check(eval.traj_dump_count >= 0, "eval.traj_dump_count: must be >= 0");

  check(!seeds.empty(), "seeds: must list at least one seed");
  check(!output_dir.empty(), "output_dir: must be non-empty");

  if (!errs.empty()) {
    std::ostringstream msg;
    msg << "invalid config (" << errs.size() << " problem" << (errs.size() > 1 ? "s" : "")
        << "):";
    for (const auto& e : errs) msg << "\n  - " << e;
    throw ConfigError(msg.str());
  }
}

json ExperimentConfig::to_json() const {
  json j;
  j["name"] = name;
  j["regime"] = to_string(regime);
  j["source"] = source.to_json();
  j["target"] = target.to_json();
  j["grid"] = {{"n_steps", grid.n_steps}, {"dt", grid.dt}, {"t_max", grid.t_max()}};
  j["reference"] = {{"sigma", reference.sigma}, {"ou_alpha", reference.ou_alpha}};
  j["variance_mode"] = variance_mode == dyn::VarianceMode::kLearnt ? "learnt" : "fixed";
  j["net"] = {{"hidden_dim", net.hidden_dim},
              {"n_hidden", net.n_hidden},
              {"layernorm", net.layernorm}};
  j["schedule"] = {{"n_ipf_iterations", schedule.n_ipf_iterations},
                   {"steps_per_backward_phase", schedule.steps_per_backward_phase},
                   {"steps_per_forward_phase", schedule.steps_per_forward_phase},
                   {"batch_size", schedule.batch_size},
                   {"n_traj_per_x0", schedule.n_traj_per_x0}};
  j["optimizer"] = {{"lr", optimizer.lr},
                    {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},
                    {"weight_decay", optimizer.weight_decay},
                    {"grad_clip", optimizer.grad_clip},
                    {"reset_moments_each_phase", optimizer.reset_moments_each_phase}};
  json lang = {{"enabled", offpolicy.plan.langevin.enabled},
               {"every", offpolicy.plan.langevin.every},
               {"n_steps", offpolicy.plan.langevin.n_steps},
               {"step_size", offpolicy.plan.langevin.step_size}};
  if (offpolicy.plan.langevin.anneal_to) lang["anneal_to"] = *offpolicy.plan.langevin.anneal_to;
  json op = {{"ratio", offpolicy.plan.ratio},
             {"reuse_backward", offpolicy.plan.reuse_backward},
             {"buffer_capacity", offpolicy.buffer_capacity},
             {"reinit_fraction", offpolicy.reinit_fraction},
             {"langevin", lang}};
  if (offpolicy.plan.anneal)
    op["anneal"] = {offpolicy.plan.anneal->first, offpolicy.plan.anneal->second};
  j["offpolicy"] = op;
  j["eval"] = {{"samples_per_phase", eval.samples_per_phase},
               {"final_samples", eval.final_samples},
               {"traj_dump_iters", eval.traj_dump_iters},
               {"traj_dump_count", eval.traj_dump_count}};
  j["seeds"] = seeds;
  j["output_dir"] = output_dir;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  expect_object(j, "config");
  reject_unknown(j, "config",
                 {"name", "regime", "source", "target", "grid", "reference", "variance_mode",
                  "net", "schedule", "optimizer", "offpolicy", "eval", "seeds", "output_dir"});
  ExperimentConfig c;
  c.name = get_or(j, "name", std::string("run"));
  if (!j.contains("regime")) throw ConfigError("regime: missing");
  c.regime = regime_from_string(j.at("regime").get<std::string>());
  if (!j.contains("source")) throw ConfigError("source: missing");
  if (!j.contains("target")) throw ConfigError("target: missing");
  c.source = TargetSpec::from_json(j.at("source"), "source");
  c.target = TargetSpec::from_json(j.at("target"), "target");

  if (!j.contains("grid")) throw ConfigError("grid: missing");
  const json& g = j.at("grid");
  expect_object(g, "grid");
  reject_unknown(g, "grid", {"n_steps", "dt", "t_max"});
  if (!g.contains("n_steps")) throw ConfigError("grid.n_steps: missing");
  c.grid.n_steps = g.at("n_steps").get<long>();
  if (g.contains("dt") && !g.at("dt").is_null()) {
    c.grid.dt = g.at("dt").get<double>();
    if (g.contains("t_max") && !g.at("t_max").is_null()) {
      const double t_max = g.at("t_max").get<double>();
      const double implied = static_cast<double>(c.grid.n_steps) * c.grid.dt;
      if (std::abs(implied - t_max) > 1e-9 * std::max(1.0, std::abs(t_max)))
        throw ConfigError("grid: n_steps * dt = " + std::to_string(implied) +
                          " does not equal t_max = " + std::to_string(t_max));
    }
  } else if (g.contains("t_max") && !g.at("t_max").is_null()) {
    if (c.grid.n_steps > 0)
      c.grid.dt = g.at("t_max").get<double>() / static_cast<double>(c.grid.n_steps);
  } else {
    throw ConfigError("grid: provide dt or t_max");
  }

  if (j.contains("reference")) {
    const json& r = j.at("reference");
    expect_object(r, "reference");
    reject_unknown(r, "reference", {"sigma", "ou_alpha"});
    c.reference.sigma = get_or(r, "sigma", c.reference.sigma);
    c.reference.ou_alpha = get_or(r, "ou_alpha", 0.0);
  }

  const std::string vm = get_or(j, "variance_mode", std::string("learnt"));
  if (vm == "learnt")
    c.variance_mode = dyn::VarianceMode::kLearnt;
  else if (vm == "fixed")
    c.variance_mode = dyn::VarianceMode::kFixed;
  else
    throw ConfigError("variance_mode: unknown value '" + vm + "' (expected learnt | fixed)");

  if (j.contains("net")) {
    const json& n = j.at("net");
    expect_object(n, "net");
    reject_unknown(n, "net", {"hidden_dim", "n_hidden", "layernorm"});
    c.net.hidden_dim = get_or(n, "hidden_dim", 64L);
    c.net.n_hidden = get_or(n, "n_hidden", 3L);
    c.net.layernorm = get_or(n, "layernorm", true);
  }

  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    expect_object(s, "schedule");
    reject_unknown(s, "schedule",
                   {"n_ipf_iterations", "steps_per_backward_phase", "steps_per_forward_phase",
                    "batch_size", "n_traj_per_x0"});
    c.schedule.n_ipf_iterations = get_or(s, "n_ipf_iterations", c.schedule.n_ipf_iterations);
    c.schedule.steps_per_backward_phase =
        get_or(s, "steps_per_backward_phase", c.schedule.steps_per_backward_phase);
    c.schedule.steps_per_forward_phase =
        get_or(s, "steps_per_forward_phase", c.schedule.steps_per_forward_phase);
    c.schedule.batch_size = get_or(s, "batch_size", c.schedule.batch_size);
    c.schedule.n_traj_per_x0 = get_or(s, "n_traj_per_x0", c.schedule.n_traj_per_x0);
  }

  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    expect_object(o, "optimizer");
    reject_unknown(o, "optimizer",
                   {"lr", "beta1", "beta2", "weight_decay", "grad_clip",
                    "reset_moments_each_phase"});
    c.optimizer.lr = get_or(o, "lr", c.optimizer.lr);
    c.optimizer.beta1 = get_or(o, "beta1", c.optimizer.beta1);
    c.optimizer.beta2 = get_or(o, "beta2", c.optimizer.beta2);
    c.optimizer.weight_decay = get_or(o, "weight_decay", c.optimizer.weight_decay);
    c.optimizer.grad_clip = get_or(o, "grad_clip", c.optimizer.grad_clip);
    c.optimizer.reset_moments_each_phase =
        get_or(o, "reset_moments_each_phase", c.optimizer.reset_moments_each_phase);
  }

  if (j.contains("offpolicy")) {
    const json& o = j.at("offpolicy");
    expect_object(o, "offpolicy");
    reject_unknown(o, "offpolicy",
                   {"ratio", "reuse_backward", "anneal", "buffer_capacity", "reinit_fraction",
                    "langevin"});
    c.offpolicy.plan.ratio = get_or(o, "ratio", c.offpolicy.plan.ratio);
    c.offpolicy.plan.reuse_backward = get_or(o, "reuse_backward", true);
    if (o.contains("anneal") && !o.at("anneal").is_null()) {
      const auto v = o.at("anneal").get<std::vector<double>>();
      if (v.size() != 2) throw ConfigError("offpolicy.anneal: expected [start, end]");
      c.offpolicy.plan.anneal = {v[0], v[1]};
    }
    c.offpolicy.buffer_capacity = get_or(o, "buffer_capacity", c.offpolicy.buffer_capacity);
    c.offpolicy.reinit_fraction = get_or(o, "reinit_fraction", 0.0);
    if (o.contains("langevin")) {
      const json& l = o.at("langevin");
      expect_object(l, "offpolicy.langevin");
      reject_unknown(l, "offpolicy.langevin",
                     {"enabled", "every", "n_steps", "step_size", "anneal_to"});
      c.offpolicy.plan.langevin.enabled = get_or(l, "enabled", false);
      c.offpolicy.plan.langevin.every = get_or(l, "every", 500L);
      c.offpolicy.plan.langevin.n_steps = get_or(l, "n_steps", 50L);
      c.offpolicy.plan.langevin.step_size = get_or(l, "step_size", 0.01);
      if (l.contains("anneal_to") && !l.at("anneal_to").is_null())
        c.offpolicy.plan.langevin.anneal_to = l.at("anneal_to").get<double>();
    }
  }

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    expect_object(e, "eval");
    reject_unknown(e, "eval",
                   {"samples_per_phase", "final_samples", "traj_dump_iters", "traj_dump_count"});
    c.eval.samples_per_phase = get_or(e, "samples_per_phase", c.eval.samples_per_phase);
    c.eval.final_samples = get_or(e, "final_samples", c.eval.final_samples);
    c.eval.traj_dump_iters = get_or(e, "traj_dump_iters", c.eval.traj_dump_iters);
    c.eval.traj_dump_count = get_or(e, "traj_dump_count", c.eval.traj_dump_count);
  }

  c.seeds = get_or(j, "seeds", c.seeds);
  c.output_dir = get_or(j, "output_dir", c.output_dir);
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return from_json(j);
}

std::string hash_bytes(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

std::string ExperimentConfig::hash() const {
  // nlohmann objects iterate in sorted key order, so dump() is canonical.
  return hash_bytes(to_json().dump());
}

json set_by_path(json cfg, const std::string& path, const json& value) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : path) {
    if (ch == '.') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  parts.push_back(cur);
  if (parts.empty() || parts.front().empty())
    throw ConfigError("sweep axis: empty parameter path");

  json* node = &cfg;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = value;

  // Changing the grid shape re-derives dt from t_max so K*dt == t_max keeps
  // holding (the step-count ablation varies K at fixed horizon).
  if (path == "grid.n_steps" || path == "grid.t_max") {
    if (cfg.contains("grid")) {
      json& g = cfg["grid"];
      if (g.contains("t_max") && g.contains("n_steps")) g.erase("dt");
    }
  }
  return cfg;
}

}  // namespace sbridge::cfg
