#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "tcal/diffnet/network.hpp"

namespace tcal::diffnet {

/// Architecture description: input channels, seed, conditioning, layer list
/// and one {name, file, shape} entry per parameter.
[[nodiscard]] nlohmann::ordered_json network_manifest(const Network<float>& network, const std::string& file_prefix);

/// Writes one FCT1 file per parameter, named `<file_prefix><parameter name>.fct1`.
void save_parameters(const Network<float>& network, const std::filesystem::path& dir, const std::string& file_prefix);

/// Rebuilds a network from network_manifest() output and its parameter files.
[[nodiscard]] Network<float> load_network(const nlohmann::ordered_json& manifest, const std::filesystem::path& dir);

/// Standalone weights directory: manifest.json plus parameter files.
void save_network(const Network<float>& network, const std::filesystem::path& dir);
[[nodiscard]] Network<float> load_network(const std::filesystem::path& dir);

}  // namespace tcal::diffnet
