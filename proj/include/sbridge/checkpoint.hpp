#pragma once

#include "sbridge/config.hpp"
#include "sbridge/dynamics.hpp"
#include "sbridge/replay.hpp"

#include <json.hpp>

#include <optional>
#include <string>

namespace sbridge::ckpt {

using nlohmann::json;

/// Everything a run accumulates: both policies plus the replay buffers the
/// regime uses (x1 buffer for data-to-energy, both for energy-to-energy).
struct BridgeState {
  dyn::Policy theta;
  dyn::Policy phi;
  std::optional<offpolicy::ReplayBuffer> buffer_x1;
  std::optional<offpolicy::ReplayBuffer> buffer_x0;
  long iterations_done = 0;
};

/// Fresh zero-head policies (and Gaussian- or empty-initialised buffers as the
/// regime dictates) for the given config and seed.
BridgeState init_bridge_state(const cfg::ExperimentConfig& config, std::uint64_t seed);

struct Checkpoint {
  cfg::ExperimentConfig config;
  std::uint64_t seed = 0;
  BridgeState state;
};

json checkpoint_to_json(const cfg::ExperimentConfig& config, std::uint64_t seed,
                        const BridgeState& state);

void save_checkpoint(const std::string& path, const cfg::ExperimentConfig& config,
                     std::uint64_t seed, const BridgeState& state);

Checkpoint load_checkpoint(const std::string& path);

/// FNV-1a content hash of a file on disk (hex), for aggregate provenance rows.
std::string file_content_hash(const std::string& path);

}  // namespace sbridge::ckpt
