#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace tcal::cli {

inline constexpr std::string_view toolkit_version = "1.0.0";

/// Process exit codes.
enum ExitCode : int { ok = 0, usage = 1, invalid_data = 2, numerical = 3 };

/// Runs one command line (without the program name), e.g.
/// {"synth", "--samples", "10", "--out", "d"}. Never throws.
int run(const std::vector<std::string>& args);

/// Digest of a dataset directory: SHA-256 over the digests of its
/// logits.fct1, labels.fct1 and lead_times.fct1, in that order.
[[nodiscard]] std::string dataset_digest(const std::filesystem::path& dir);

/// Digest of a calibrator bundle: SHA-256 over "name:digest" lines of every
/// file in the directory except the run manifest, sorted by name.
[[nodiscard]] std::string bundle_digest(const std::filesystem::path& dir);

}  // namespace tcal::cli
