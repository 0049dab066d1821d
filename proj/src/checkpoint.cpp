#include "sbridge/checkpoint.hpp"

#include <fstream>
#include <sstream>

namespace sbridge::ckpt {

namespace {

constexpr const char* kFormat = "sbridge_checkpoint_v1";

json params_to_json(const dyn::Policy& policy) {
  json list = json::array();
  for (const auto& p : policy.params()) {
    json entry;
    entry["name"] = p->name;
    entry["shape"] = p->val.shape();
    entry["data"] = std::vector<double>(p->val.data(), p->val.data() + p->val.size());
    list.push_back(std::move(entry));
  }
  return list;
}

std::vector<std::pair<std::string, Tensor>> params_from_json(const json& list,
                                                             const std::string& which) {
  if (!list.is_array())
    throw cfg::ConfigError("checkpoint." + which + ": expected a parameter array");
  std::vector<std::pair<std::string, Tensor>> out;
  for (const json& entry : list) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<long>>();
    const auto data = entry.at("data").get<std::vector<double>>();
    Tensor t(shape);
    if (static_cast<std::size_t>(t.size()) != data.size())
      throw cfg::ConfigError("checkpoint." + which + "." + name +
                             ": data length does not match shape");
    std::copy(data.begin(), data.end(), t.data());
    out.emplace_back(name, std::move(t));
  }
  return out;
}

json buffer_to_json(const offpolicy::ReplayBuffer& b) {
  json j;
  j["capacity"] = b.capacity();
  j["dim"] = b.dim();
  j["size"] = b.size();
  j["skipped_nonfinite"] = b.skipped_nonfinite();
  // Cursor is recoverable only through restore(); expose it via a snapshot of
  // rows in storage order.
  std::vector<double> flat(static_cast<std::size_t>(b.size() * b.dim()));
  for (long i = 0; i < b.size(); ++i)
    std::copy(b.row(i), b.row(i) + b.dim(), flat.begin() + i * b.dim());
  j["data"] = std::move(flat);
  return j;
}

offpolicy::ReplayBuffer buffer_from_json(const json& j, long cursor, const std::string& which) {
  const long capacity = j.at("capacity").get<long>();
  const long dim = j.at("dim").get<long>();
  const long size = j.at("size").get<long>();
  const long skipped = j.value("skipped_nonfinite", 0L);
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<long>(data.size()) != size * dim)
    throw cfg::ConfigError("checkpoint." + which + ": buffer data length mismatch");
  Tensor store({size, dim});
  std::copy(data.begin(), data.end(), store.data());
  return offpolicy::ReplayBuffer::restore(capacity, dim, size, cursor, skipped, store);
}

}  // namespace

BridgeState init_bridge_state(const cfg::ExperimentConfig& config, std::uint64_t seed) {
  BridgeState st;
  const long d = config.dim();
  Rng theta_rng = Rng::stream(seed, "theta_init");
  Rng phi_rng = Rng::stream(seed, "phi_init");
  st.theta = dyn::Policy(dyn::Direction::kForward, config.variance_mode, d, config.grid,
                         config.reference, config.net, theta_rng, "forward");
  st.phi = dyn::Policy(dyn::Direction::kBackward, config.variance_mode, d, config.grid,
                       config.reference, config.net, phi_rng, "backward");

  const long cap = config.offpolicy.buffer_capacity;
  if (config.regime == cfg::Regime::kDataToEnergy) {
    st.buffer_x1 = offpolicy::ReplayBuffer(cap, d);
  } else if (config.regime == cfg::Regime::kEnergyToEnergy) {
    // Both buffers start as standard Gaussian noise so the very first phases
    // already have endpoints to anchor variance-loss groups on.
    Rng noise = Rng::stream(seed, "buffer_init");
    offpolicy::ReplayBuffer b1(cap, d);
    b1.push(noise.normal_tensor({cap, d}));
    offpolicy::ReplayBuffer b0(cap, d);
    b0.push(noise.normal_tensor({cap, d}));
    st.buffer_x1 = std::move(b1);
    st.buffer_x0 = std::move(b0);
  }
  return st;
}

json checkpoint_to_json(const cfg::ExperimentConfig& config, std::uint64_t seed,
                        const BridgeState& state) {
  json j;
  j["format"] = kFormat;
  j["config"] = config.to_json();
  j["seed"] = seed;
  j["iterations_done"] = state.iterations_done;
  j["theta"] = params_to_json(state.theta);
  j["phi"] = params_to_json(state.phi);
  // The ring cursor is private buffer state: while filling it equals size,
  // and once the ring is full it only picks which slot the next push
  // overwrites. Storing it beside the payload keeps restores deterministic.
  auto cursor_of = [](const offpolicy::ReplayBuffer& b) {
    return b.size() < b.capacity() ? b.size() : 0L;
  };
  if (state.buffer_x1) {
    j["buffer_x1"] = buffer_to_json(*state.buffer_x1);
    j["buffer_x1_cursor"] = cursor_of(*state.buffer_x1);
  }
  if (state.buffer_x0) {
    j["buffer_x0"] = buffer_to_json(*state.buffer_x0);
    j["buffer_x0_cursor"] = cursor_of(*state.buffer_x0);
  }
  return j;
}

void save_checkpoint(const std::string& path, const cfg::ExperimentConfig& config,
                     std::uint64_t seed, const BridgeState& state) {
  json j = checkpoint_to_json(config, seed, state);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error("checkpoint parse error in " + path + ": " + e.what());
  }
  if (j.value("format", std::string()) != kFormat)
    throw std::runtime_error("checkpoint " + path + ": unknown format '" +
                             j.value("format", std::string("<missing>")) + "'");

  Checkpoint c;
  c.config = cfg::ExperimentConfig::from_json(j.at("config"));
  c.config.validate();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.state = init_bridge_state(c.config, c.seed);
  c.state.iterations_done = j.at("iterations_done").get<long>();
  c.state.theta.net().load_values(params_from_json(j.at("theta"), "theta"));
  c.state.phi.net().load_values(params_from_json(j.at("phi"), "phi"));

  if (j.contains("buffer_x1"))
    c.state.buffer_x1 =
        buffer_from_json(j.at("buffer_x1"), j.value("buffer_x1_cursor", 0L), "buffer_x1");
  else
    c.state.buffer_x1.reset();
  if (j.contains("buffer_x0"))
    c.state.buffer_x0 =
        buffer_from_json(j.at("buffer_x0"), j.value("buffer_x0_cursor", 0L), "buffer_x0");
  else
    c.state.buffer_x0.reset();
  return c;
}

std::string file_content_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot hash missing file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return cfg::hash_bytes(ss.str());
}

}  // namespace sbridge::ckpt
