#include "support.hpp"

#include <fstream>
#include <sstream>
#include <unistd.h>

namespace dynvocab::testing {

std::string random_residues(Rng& rng, std::size_t length) {
    std::string s(length, 'A');
    for (char& c : s) c = Vocabulary::residue(static_cast<int>(uniform_index(rng, 20)));
    return s;
}

std::vector<ProteinRecord> messy_corpus(std::size_t count, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<ProteinRecord> out;
    for (std::size_t i = 0; i < count; ++i) {
        ProteinRecord r;
        r.id = "r" + std::to_string(i);
        r.sequence = random_residues(rng, 20 + uniform_index(rng, 101));
        r.description = "synthetic record " + std::to_string(i);
        const std::size_t n = r.sequence.size();
        const std::size_t frags = uniform_index(rng, 6);
        for (std::size_t f = 0; f < frags; ++f) {
            FragmentAnnotation a;
            a.type = static_cast<FragmentType>(uniform_index(rng, kNumFragmentTypes));
            a.description = "region " + std::to_string(f);
            const auto mode = uniform_index(rng, 4);
            if (f > 0 && mode == 0) {
                // nested inside the previous span
                const auto& p = r.fragments.back();
                a.start = p.start + uniform_index(rng, p.end - p.start);
                a.end = a.start + 1 + uniform_index(rng, p.end - a.start);
            } else if (f > 0 && mode == 1) {
                // same start as the previous span, different length
                const auto& p = r.fragments.back();
                a.start = p.start;
                a.end = a.start + 1 + uniform_index(rng, n - a.start);
            } else if (f > 0 && mode == 2) {
                // straddles the previous span's end
                const auto& p = r.fragments.back();
                a.start = p.end - 1;
                a.end = std::min(n, a.start + 2 + uniform_index(rng, 10));
                if (a.end <= a.start) a.end = a.start + 1;
            } else {
                a.start = uniform_index(rng, n);
                a.end = a.start + 1 + uniform_index(rng, std::min<std::size_t>(30, n - a.start));
            }
            r.fragments.push_back(a);
        }
        validate_record(r);
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<ProteinRecord> overfit_corpus(std::uint64_t seed) {
    static const char* kAdjectives[] = {"amber", "brisk", "coral", "dusky",
                                        "ember", "frost", "gilded", "hollow"};
    static const char* kRoles[] = {"kinase",  "transporter", "protease", "chaperone",
                                   "ligase",  "receptor",    "channel",  "synthase"};
    Rng rng(seed);
    std::vector<ProteinRecord> out;
    for (int i = 0; i < 8; ++i) {
        const auto type = static_cast<FragmentType>(i);
        const std::string fragment = random_residues(rng, 8 + uniform_index(rng, 5));
        const std::size_t total = 30 + uniform_index(rng, 31);
        const std::size_t before = uniform_index(rng, total - fragment.size() + 1);
        ProteinRecord r;
        r.id = "pair" + std::to_string(i);
        r.sequence = random_residues(rng, before) + fragment +
                     random_residues(rng, total - before - fragment.size());
        r.description = std::string(kAdjectives[i]) + " " + kRoles[i] + " with a " +
                        std::string(to_string(type)) + " region";
        r.fragments.push_back(FragmentAnnotation{before, before + fragment.size(), type,
                                                 std::string(kRoles[i]) + " " +
                                                     std::string(to_string(type)) + " motif"});
        validate_record(r);
        out.push_back(std::move(r));
    }
    return out;
}

TrainConfig overfit_config(std::size_t steps) {
    TrainConfig c;
    c.max_lr = 3e-3;
    c.total_steps = steps;
    c.microbatch_size = 4;
    c.effective_batch_size = 8;
    c.seed = 11;
    c.model.d_model = 32;
    c.model.n_layers = 2;
    c.model.n_heads = 4;
    c.model.text_width = 32;
    c.model.fragment_width = 32;
    c.model.dropout = 0.0;
    c.model.max_steps = 256;
    c.validate();
    return c;
}

TempDir::TempDir(const std::string& tag) {
    std::string pattern =
        (std::filesystem::temp_directory_path() / ("dynvocab_" + tag + "_XXXXXX")).string();
    if (!mkdtemp(pattern.data())) throw std::runtime_error("mkdtemp failed");
    path_ = pattern;
}

TempDir::~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
}

std::string read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace dynvocab::testing
