#pragma once

#include <filesystem>

#include "dynvocab/model.hpp"

namespace dynvocab {

inline constexpr int kCheckpointVersion = 1;

/// Writes a framed header (config, array manifest, version, heads flag,
/// fingerprint) followed by every array as little-endian float64 in
/// manifest order. With include_training_heads == false the "head.*" arrays
/// are left out, giving an inference checkpoint.
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     bool include_training_heads = true);

Model load_checkpoint(const std::filesystem::path& path);

/// Header-level manifest entries shared with the training-state format.
Json array_manifest(const diff::ParameterSet& params, bool include_heads);
void write_arrays(std::ostream& out, const diff::ParameterSet& params, bool include_heads);
diff::ParameterSet read_arrays(std::istream& in, const Json& manifest, const std::string& what);

}  // namespace dynvocab
