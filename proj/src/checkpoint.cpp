#include "dynvocab/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace dynvocab {

namespace {

bool is_head(const std::string& name) { return name.rfind("head.", 0) == 0; }

}  // namespace

Json array_manifest(const diff::ParameterSet& params, bool include_heads) {
    Json arrays = Json::array();
    for (const auto& [name, p] : params) {
        if (!include_heads && is_head(name)) continue;
        arrays.push_back(Json{{"name", name},
                              {"shape", {p.value.rows(), p.value.cols()}},
                              {"dtype", "float64"}});
    }
    return arrays;
}

void write_arrays(std::ostream& out, const diff::ParameterSet& params, bool include_heads) {
    for (const auto& [name, p] : params) {
        if (!include_heads && is_head(name)) continue;
        write_f64(out, p.value.values());
    }
}

diff::ParameterSet read_arrays(std::istream& in, const Json& manifest, const std::string& what) {
    if (!manifest.is_array()) {
        throw std::runtime_error(what + ": array manifest missing");
    }
    diff::ParameterSet params;
    for (const Json& entry : manifest) {
        const auto name = entry.at("name").get<std::string>();
        if (entry.at("dtype").get<std::string>() != "float64") {
            throw std::runtime_error(what + ": unsupported dtype for '" + name + "'");
        }
        const auto& shape = entry.at("shape");
        diff::Matrix m(shape.at(0).get<std::size_t>(), shape.at(1).get<std::size_t>());
        read_f64(in, m.values(), what);
        params.add(name, std::move(m));
    }
    return params;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     bool include_training_heads) {
    const bool heads = include_training_heads && model.has_training_heads();
    Json header{{"format", "dynvocab-checkpoint"},
                {"version", kCheckpointVersion},
                {"config", model.config().to_json()},
                {"training_heads", heads},
                {"fingerprint", model.fingerprint()},
                {"arrays", array_manifest(model.params(), heads)}};
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write checkpoint " + path.string());
    }
    write_framed_header(out, header);
    write_arrays(out, model.params(), heads);
    if (!out) {
        throw std::runtime_error("failed writing checkpoint " + path.string());
    }
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open checkpoint " + path.string());
    }
    const std::string what = "checkpoint " + path.string();
    const Json header = read_framed_header(in, what);
    if (header.value("format", "") != "dynvocab-checkpoint") {
        throw std::runtime_error(what + ": not a checkpoint file");
    }
    if (header.at("version").get<int>() != kCheckpointVersion) {
        throw std::runtime_error(what + ": unsupported format version");
    }
    const ModelConfig config = ModelConfig::from_json(header.at("config"));
    diff::ParameterSet params = read_arrays(in, header.at("arrays"), what);
    Model model(config, std::move(params));
    if (model.has_training_heads() != header.at("training_heads").get<bool>()) {
        throw std::runtime_error(what + ": training-heads flag disagrees with the arrays");
    }
    if (model.fingerprint() != header.at("fingerprint").get<std::string>()) {
        throw std::runtime_error(what + ": fingerprint mismatch (corrupted payload?)");
    }
    return model;
}

}  // namespace dynvocab
