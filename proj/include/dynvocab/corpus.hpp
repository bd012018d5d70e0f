#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "dynvocab/io.hpp"

namespace dynvocab {

/// Residue alphabet and the three special tokens of the protein side.
/// Ids 0..19 are residues in alphabetical order, then BOS, EOS, PAD.
struct Vocabulary {
    static constexpr std::string_view kResidues = "ACDEFGHIKLMNPQRSTVWY";
    static constexpr int kNumResidues = 20;
    static constexpr int kBos = 20;
    static constexpr int kEos = 21;
    static constexpr int kPad = 22;
    static constexpr int kSize = 23;

    static std::optional<int> residue_id(char residue);
    static char residue(int id);
    static bool is_residue(int id) { return id >= 0 && id < kNumResidues; }
    static std::string_view token_name(int id);
};

enum class FragmentType {
    Domain,
    Family,
    HomologousSuperfamily,
    Repeat,
    ConservedSite,
    ActiveSite,
    BindingSite,
    PTM,
};

inline constexpr int kNumFragmentTypes = 8;

std::string_view to_string(FragmentType type);
std::optional<FragmentType> parse_fragment_type(std::string_view name);

/// Annotated span over a protein; `start` inclusive, `end` exclusive, 0-based.
struct FragmentAnnotation {
    std::size_t start = 0;
    std::size_t end = 0;
    FragmentType type = FragmentType::Domain;
    std::string description;

    bool operator==(const FragmentAnnotation&) const = default;
};

struct ProteinRecord {
    std::string id;
    std::string sequence;
    std::string description;
    std::vector<FragmentAnnotation> fragments;

    bool operator==(const ProteinRecord&) const = default;
};

struct ResidueStep {
    int token = 0;

    bool operator==(const ResidueStep&) const = default;
};

struct FragmentStep {
    std::string residues;
    FragmentType type = FragmentType::Domain;
    std::string description;

    bool operator==(const FragmentStep&) const = default;
};

using Step = std::variant<ResidueStep, FragmentStep>;

/// A protein as an ordered list of single-residue and whole-fragment steps.
struct SegmentedSequence {
    std::vector<Step> steps;
    std::string source;

    bool operator==(const SegmentedSequence&) const = default;
};

/// Error raised while reading a corpus file; carries the 1-based line number.
class CorpusError : public std::runtime_error {
public:
    CorpusError(std::size_t line, const std::string& message)
        : std::runtime_error("line " + std::to_string(line) + ": " + message), line_(line) {}

    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// Throws std::invalid_argument naming the offending residue or record id.
void validate_record(const ProteinRecord& record);
/// Throws std::invalid_argument if `residues` is empty or leaves the alphabet.
void validate_residues(std::string_view residues, std::string_view context);

ProteinRecord record_from_json(const Json& object);
Json record_to_json(const ProteinRecord& record);

std::vector<ProteinRecord> load_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, std::span<const ProteinRecord> records);

SegmentedSequence segment(const ProteinRecord& record);
std::string detokenize(const SegmentedSequence& seg);
std::size_t residue_count(const Step& step);

std::array<double, Vocabulary::kNumResidues> empirical_aa_distribution(
    std::span<const ProteinRecord> corpus);

/// Per-type loss weights, computed once over a whole training corpus.
class TypeWeights {
public:
    TypeWeights() = default;
    explicit TypeWeights(std::map<FragmentType, double> weights);

    bool contains(FragmentType type) const { return weights_.contains(type); }
    double at(FragmentType type) const;
    const std::map<FragmentType, double>& entries() const { return weights_; }

    Json to_json() const;
    static TypeWeights from_json(const Json& object);

private:
    std::map<FragmentType, double> weights_;
};

/// Balanced inverse frequency: w_c = N_total / (C_present * N_c).
TypeWeights compute_type_weights(std::span<const ProteinRecord> corpus);

}  // namespace dynvocab
