#include "dynvocab/corpus.hpp"

#include <cmath>
#include <algorithm>
#include <fstream>
#include <numeric>

namespace dynvocab {

namespace {

constexpr std::array<std::string_view, kNumFragmentTypes> kTypeNames = {
    "Domain",        "Family",     "HomologousSuperfamily", "Repeat",
    "ConservedSite", "ActiveSite", "BindingSite",           "PTM",
};

const Json& require_field(const Json& object, const char* name, bool (Json::*check)() const,
                          const char* kind) {
    auto it = object.find(name);
    if (it == object.end()) {
        throw std::invalid_argument(std::string("missing field '") + name + "'");
    }
    if (!((*it).*check)()) {
        throw std::invalid_argument(std::string("field '") + name + "' must be " + kind);
    }
    return *it;
}

void reject_unknown_fields(const Json& object, std::initializer_list<std::string_view> allowed,
                           std::string_view where) {
    for (const auto& [key, _] : object.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw std::invalid_argument("unknown field '" + key + "' in " + std::string(where));
        }
    }
}

}  // namespace

std::optional<int> Vocabulary::residue_id(char residue) {
    const auto pos = kResidues.find(residue);
    if (pos == std::string_view::npos) {
        return std::nullopt;
    }
    return static_cast<int>(pos);
}

char Vocabulary::residue(int id) {
    if (!is_residue(id)) {
        throw std::out_of_range("token id " + std::to_string(id) + " is not a residue");
    }
    return kResidues[static_cast<std::size_t>(id)];
}

std::string_view Vocabulary::token_name(int id) {
    static constexpr std::array<std::string_view, kSize> names = {
        "A", "C", "D", "E", "F", "G", "H", "I", "K", "L", "M", "N",
        "P", "Q", "R", "S", "T", "V", "W", "Y", "<bos>", "<eos>", "<pad>"};
    if (id < 0 || id >= kSize) {
        throw std::out_of_range("token id " + std::to_string(id) + " out of range");
    }
    return names[static_cast<std::size_t>(id)];
}

std::string_view to_string(FragmentType type) {
    return kTypeNames[static_cast<std::size_t>(type)];
}

std::optional<FragmentType> parse_fragment_type(std::string_view name) {
    for (std::size_t i = 0; i < kTypeNames.size(); ++i) {
        if (kTypeNames[i] == name) {
            return static_cast<FragmentType>(i);
        }
    }
    return std::nullopt;
}

void validate_residues(std::string_view residues, std::string_view context) {
    if (residues.empty()) {
        throw std::invalid_argument(std::string(context) + ": empty residue string");
    }
    for (char c : residues) {
        if (!Vocabulary::residue_id(c)) {
            throw std::invalid_argument(std::string(context) + ": invalid residue '" +
                                        std::string(1, c) + "'");
        }
    }
}

void validate_record(const ProteinRecord& record) {
    validate_residues(record.sequence, "record '" + record.id + "'");
    for (const auto& frag : record.fragments) {
        if (!(frag.start < frag.end && frag.end <= record.sequence.size())) {
            throw std::invalid_argument("record '" + record.id + "': invalid fragment span [" +
                                        std::to_string(frag.start) + "," +
                                        std::to_string(frag.end) + ") for sequence length " +
                                        std::to_string(record.sequence.size()));
        }
    }
}

ProteinRecord record_from_json(const Json& object) {
    if (!object.is_object()) {
        throw std::invalid_argument("record must be a JSON object");
    }
    reject_unknown_fields(object, {"id", "sequence", "description", "fragments"}, "record");
    ProteinRecord record;
    record.id = require_field(object, "id", &Json::is_string, "a string").get<std::string>();
    record.sequence =
        require_field(object, "sequence", &Json::is_string, "a string").get<std::string>();
    record.description =
        require_field(object, "description", &Json::is_string, "a string").get<std::string>();
    const Json& frags = require_field(object, "fragments", &Json::is_array, "an array");
    for (const Json& f : frags) {
        if (!f.is_object()) {
            throw std::invalid_argument("fragment entries must be objects");
        }
        reject_unknown_fields(f, {"start", "end", "type", "description"}, "fragment");
        FragmentAnnotation ann;
        const Json& start = require_field(f, "start", &Json::is_number_integer, "an integer");
        const Json& end = require_field(f, "end", &Json::is_number_integer, "an integer");
        if (start.get<long long>() < 0 || end.get<long long>() < 0) {
            throw std::invalid_argument("record '" + record.id + "': negative fragment bound");
        }
        ann.start = start.get<std::size_t>();
        ann.end = end.get<std::size_t>();
        const auto type_name =
            require_field(f, "type", &Json::is_string, "a string").get<std::string>();
        const auto type = parse_fragment_type(type_name);
        if (!type) {
            throw std::invalid_argument("record '" + record.id + "': unknown fragment type '" +
                                        type_name + "'");
        }
        ann.type = *type;
        ann.description =
            require_field(f, "description", &Json::is_string, "a string").get<std::string>();
        record.fragments.push_back(std::move(ann));
    }
    validate_record(record);
    return record;
}

Json record_to_json(const ProteinRecord& record) {
    Json frags = Json::array();
    for (const auto& f : record.fragments) {
        frags.push_back(Json{{"start", f.start},
                             {"end", f.end},
                             {"type", std::string(to_string(f.type))},
                             {"description", f.description}});
    }
    return Json{{"id", record.id},
                {"sequence", record.sequence},
                {"description", record.description},
                {"fragments", std::move(frags)}};
}

std::vector<ProteinRecord> load_corpus(const std::filesystem::path& path) {
    const auto lines = read_lines(path);
    std::vector<ProteinRecord> records;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto& line = lines[i];
        if (line.find_first_not_of(" \t") == std::string::npos) {
            continue;
        }
        Json object;
        try {
            object = Json::parse(line);
        } catch (const Json::parse_error& e) {
            throw CorpusError(i + 1, std::string("malformed JSON: ") + e.what());
        }
        try {
            records.push_back(record_from_json(object));
        } catch (const std::invalid_argument& e) {
            throw CorpusError(i + 1, e.what());
        }
    }
    return records;
}

void write_corpus(const std::filesystem::path& path, std::span<const ProteinRecord> records) {
    std::string text;
    for (const auto& r : records) {
        text += record_to_json(r).dump();
        text += '\n';
    }
    write_text(path, text);
}

std::size_t residue_count(const Step& step) {
    if (const auto* frag = std::get_if<FragmentStep>(&step)) {
        return frag->residues.size();
    }
    return 1;
}

SegmentedSequence segment(const ProteinRecord& record) {
    validate_record(record);
    // Candidate fragment per start position: longest span, then lowest list index.
    std::vector<int> best(record.sequence.size(), -1);
    for (std::size_t i = 0; i < record.fragments.size(); ++i) {
        const auto& f = record.fragments[i];
        const int current = best[f.start];
        if (current < 0 ||
            f.end - f.start > record.fragments[static_cast<std::size_t>(current)].end -
                                  record.fragments[static_cast<std::size_t>(current)].start) {
            best[f.start] = static_cast<int>(i);
        }
    }

    SegmentedSequence seg;
    seg.source = record.id;
    std::size_t pos = 0;
    while (pos < record.sequence.size()) {
        // A fragment starting at `pos` never overlaps consumed residues because
        // everything before `pos` is consumed and nothing after it is.
        if (best[pos] >= 0) {
            const auto& f = record.fragments[static_cast<std::size_t>(best[pos])];
            seg.steps.emplace_back(FragmentStep{record.sequence.substr(f.start, f.end - f.start),
                                                f.type, f.description});
            pos = f.end;
        } else {
            seg.steps.emplace_back(ResidueStep{*Vocabulary::residue_id(record.sequence[pos])});
            ++pos;
        }
    }
    return seg;
}

std::string detokenize(const SegmentedSequence& seg) {
    std::string out;
    for (const auto& step : seg.steps) {
        if (const auto* frag = std::get_if<FragmentStep>(&step)) {
            out += frag->residues;
        } else {
            out += Vocabulary::residue(std::get<ResidueStep>(step).token);
        }
    }
    return out;
}

std::array<double, Vocabulary::kNumResidues> empirical_aa_distribution(
    std::span<const ProteinRecord> corpus) {
    std::array<std::size_t, Vocabulary::kNumResidues> counts{};
    std::size_t total = 0;
    for (const auto& record : corpus) {
        for (char c : record.sequence) {
            const auto id = Vocabulary::residue_id(c);
            if (!id) {
                throw std::invalid_argument("record '" + record.id + "': invalid residue '" +
                                            std::string(1, c) + "'");
            }
            ++counts[static_cast<std::size_t>(*id)];
            ++total;
        }
    }
    if (total == 0) {
        throw std::invalid_argument("empirical distribution needs at least one residue");
    }
    std::array<double, Vocabulary::kNumResidues> dist{};
    for (std::size_t i = 0; i < dist.size(); ++i) {
        dist[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
    }
    return dist;
}

TypeWeights::TypeWeights(std::map<FragmentType, double> weights) : weights_(std::move(weights)) {
    for (const auto& [type, w] : weights_) {
        if (!(std::isfinite(w) && w > 0.0)) {
            throw std::invalid_argument("type weight for " + std::string(to_string(type)) +
                                        " must be finite and positive");
        }
    }
}

double TypeWeights::at(FragmentType type) const {
    auto it = weights_.find(type);
    if (it == weights_.end()) {
        throw std::out_of_range("no type weight for " + std::string(to_string(type)));
    }
    return it->second;
}

Json TypeWeights::to_json() const {
    Json out = Json::object();
    for (const auto& [type, w] : weights_) {
        out[std::string(to_string(type))] = w;
    }
    return out;
}

TypeWeights TypeWeights::from_json(const Json& object) {
    std::map<FragmentType, double> weights;
    for (const auto& [key, value] : object.items()) {
        const auto type = parse_fragment_type(key);
        if (!type || !value.is_number()) {
            throw std::invalid_argument("malformed type weight entry '" + key + "'");
        }
        weights[*type] = value.get<double>();
    }
    return TypeWeights(std::move(weights));
}

TypeWeights compute_type_weights(std::span<const ProteinRecord> corpus) {
    std::map<FragmentType, std::size_t> counts;
    std::size_t total = 0;
    for (const auto& record : corpus) {
        for (const auto& f : record.fragments) {
            ++counts[f.type];
            ++total;
        }
    }
    if (total == 0) {
        throw std::invalid_argument("type weights need at least one fragment annotation");
    }
    const double present = static_cast<double>(counts.size());
    std::map<FragmentType, double> weights;
    for (const auto& [type, n] : counts) {
        weights[type] = static_cast<double>(total) / (present * static_cast<double>(n));
    }
    return TypeWeights(std::move(weights));
}

}  // namespace dynvocab
