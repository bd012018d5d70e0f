#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dynvocab/corpus.hpp"
#include "dynvocab/rng.hpp"
#include "dynvocab/training.hpp"

namespace dynvocab::testing {

std::string random_residues(Rng& rng, std::size_t length);

/// Records of length 20-120 with 0-5 annotations each, deliberately mixing
/// nested, partially overlapping and same-start spans.
std::vector<ProteinRecord> messy_corpus(std::size_t count, std::uint64_t seed);

/// Eight text-protein pairs (length 30-60), each carrying one distinctive
/// fragment of its own type.
std::vector<ProteinRecord> overfit_corpus(std::uint64_t seed);

/// Settings used for the small overfitting runs.
TrainConfig overfit_config(std::size_t steps = 500);

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

std::string read_bytes(const std::filesystem::path& path);

}  // namespace dynvocab::testing
