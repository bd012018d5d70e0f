#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "dynvocab/retrieval.hpp"
#include "support.hpp"

using namespace dynvocab;
using diff::Matrix;
using dynvocab::testing::TempDir;

namespace {

// Looks texts up in a table; the "name" stands in for a model fingerprint.
class TableEmbedder : public DescriptionEmbedder {
public:
    TableEmbedder(std::map<std::string, std::vector<double>> table, std::string name)
        : table_(std::move(table)), name_(std::move(name)) {}
    std::vector<double> embed(std::string_view text) const override {
        return unit_normalized(table_.at(std::string(text)));
    }
    std::string fingerprint() const override { return name_; }

private:
    std::map<std::string, std::vector<double>> table_;
    std::string name_;
};

ProteinRecord doc(const std::string& id, const std::string& seq, const std::string& text,
                  std::vector<FragmentAnnotation> frags = {}) {
    return ProteinRecord{id, seq, text, std::move(frags)};
}

}  // namespace

TEST_CASE("unit_normalized") {
    const std::vector<double> v{3.0, 4.0};
    const auto u = unit_normalized(v);
    CHECK(u[0] == doctest::Approx(0.6));
    CHECK(u[1] == doctest::Approx(0.8));
    CHECK_THROWS(unit_normalized(std::vector<double>{0.0, 0.0}));
    CHECK_THROWS(unit_normalized(std::vector<double>{NAN, 1.0}));
}

TEST_CASE("index search: order, ties, K range") {
    const TableEmbedder e({{"a", {1, 0}}, {"b", {0, 1}}, {"c", {1, 1}}, {"a2", {2, 0}}, {"q", {1, 0.1}}},
                          "table-v1");
    const std::vector<ProteinRecord> docs{doc("1", "MK", "a"), doc("2", "MK", "b"), doc("3", "MK", "c"),
                                          doc("4", "MK", "a2")};
    const auto index = build_index(docs, e);
    CHECK(index.size() == 4);
    CHECK(index.dim() == 2);
    for (std::size_t r = 0; r < 4; ++r) CHECK(diff::l2_norm(index.rows().row(r)) == doctest::Approx(1.0));

    const auto hits = retrieve_topk(index, e, "q", 4);
    REQUIRE(hits.size() == 4);
    CHECK(hits[0].index == 0);  // duplicate direction: lower insertion index first
    CHECK(hits[1].index == 3);
    CHECK(hits[0].score == hits[1].score);
    CHECK(hits[2].index == 2);
    CHECK(hits[3].index == 1);
    CHECK(retrieve_topk(index, e, "q", 1).size() == 1);
    CHECK_THROWS_AS(retrieve_topk(index, e, "q", 0), std::out_of_range);
    CHECK_THROWS_AS(retrieve_topk(index, e, "q", 5), std::out_of_range);
    CHECK_THROWS(index.search(std::vector<double>{1, 0, 0}, 1));
}

TEST_CASE("index save/load round trip and embedder pinning") {
    TempDir dir("index");
    const TableEmbedder e({{"x", {0.3, -1, 2}}, {"y", {5, 1, 0}}}, "table-v1");
    const FragmentAnnotation f{1, 4, FragmentType::BindingSite, "loop"};
    const std::vector<ProteinRecord> docs{doc("x1", "MKTAYIAK", "x", {f}), doc("y1", "GGHW", "y")};
    const auto index = build_index(docs, e);
    index.save(dir / "docs.idx");
    const auto back = EmbeddingIndex::load(dir / "docs.idx");
    CHECK(back.rows() == index.rows());
    CHECK(back.documents() == index.documents());
    CHECK(back.fingerprint() == "table-v1");

    const TableEmbedder other({{"x", {0.3, -1, 2}}, {"y", {5, 1, 0}}}, "table-v2");
    CHECK_THROWS(retrieve_topk(back, other, "x", 1));

    dynvocab::write_text(dir / "junk.idx", "not an index");
    CHECK_THROWS(EmbeddingIndex::load(dir / "junk.idx"));
    CHECK_THROWS(EmbeddingIndex(Matrix(1, 2, std::vector<double>{1.0, 1.0}), {docs[0]}, "t"));
}

TEST_CASE("fragment candidates: dedup, order, idempotence") {
    const std::vector<ProteinRecord> docs{
        doc("1", "MKTAYIAKQR", "a",
            {{0, 3, FragmentType::Domain, "first"}, {2, 6, FragmentType::PTM, "second"}}),
        doc("2", "AAMKTGG", "b", {{2, 5, FragmentType::Repeat, "again"}, {5, 7, FragmentType::Family, "tail"}}),
        doc("3", "WWWW", "c"),
    };
    const auto c = fragment_candidates(docs);
    REQUIRE(c.size() == 3);
    CHECK(c[0] == FragmentCandidate{"MKT", FragmentType::Domain, "first"});
    CHECK(c[1].residues == "TAYI");
    CHECK(c[2].residues == "GG");

    std::vector<ProteinRecord> doubled = docs;
    doubled.insert(doubled.end(), docs.begin(), docs.end());
    CHECK(fragment_candidates(doubled) == c);
    CHECK(fragment_candidates(std::span<const ProteinRecord>{}).empty());
}

TEST_CASE("model embedder gives unit vectors and is deterministic") {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.text_width = 8;
    cfg.text_heads = 2;
    cfg.fragment_width = 8;
    cfg.fragment_heads = 2;
    const Model m(cfg, 3);
    const ModelDescriptionEmbedder e(m);
    const auto v = e.embed("globin fold");
    CHECK(v.size() == 8);
    CHECK(diff::l2_norm(v) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(e.embed("globin fold") == v);
    CHECK(e.fingerprint() == m.fingerprint());
    CHECK_THROWS(e.embed(""));
}

TEST_CASE("random indexes with duplicate rows match a brute-force scan") {
    Rng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + uniform_index(rng, 40), d = 1 + uniform_index(rng, 6);
        Matrix rows(n, d);
        std::vector<ProteinRecord> docs;
        for (std::size_t r = 0; r < n; ++r) {
            std::vector<double> v(d);
            if (r > 0 && uniform01(rng) < 0.3) {
                const auto src = rows.row(uniform_index(rng, r));
                v.assign(src.begin(), src.end());
            } else {
                for (double& x : v) x = standard_normal(rng);
                v = unit_normalized(v);
            }
            std::copy(v.begin(), v.end(), rows.row(r).begin());
            docs.push_back(doc(std::to_string(r), "M", "t"));
        }
        const EmbeddingIndex index(rows, docs, "rand");
        std::vector<double> q(d);
        for (double& x : q) x = standard_normal(rng);
        q = unit_normalized(q);
        const std::size_t k = 1 + uniform_index(rng, n);
        const auto hits = index.search(q, k);
        std::vector<std::pair<double, std::size_t>> brute;
        for (std::size_t r = 0; r < n; ++r) brute.emplace_back(diff::dot(rows.row(r), q), r);
        std::stable_sort(brute.begin(), brute.end(), [](auto& a, auto& b) { return a.first > b.first; });
        REQUIRE(hits.size() == k);
        for (std::size_t i = 0; i < k; ++i) CHECK(hits[i].index == brute[i].second);
    }
}
