#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "dynvocab/cli.hpp"
#include "dynvocab/evaluation.hpp"
#include "support.hpp"

using namespace dynvocab;
using dynvocab::testing::read_bytes;
using dynvocab::testing::TempDir;

namespace {

struct Run {
    int code = 0;
    std::string err;
};

// Runs one command line, capturing stderr.
Run run(const std::vector<std::string>& args) {
    std::ostringstream captured;
    auto* old = std::cerr.rdbuf(captured.rdbuf());
    Run r;
    try {
        r.code = run_cli(args);
    } catch (...) {
        std::cerr.rdbuf(old);
        throw;
    }
    std::cerr.rdbuf(old);
    r.err = captured.str();
    return r;
}

Json read_json(const std::filesystem::path& p) { return Json::parse(read_bytes(p)); }

std::vector<Json> read_jsonl(const std::filesystem::path& p) {
    std::vector<Json> out;
    std::istringstream in(read_bytes(p));
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(Json::parse(line));
    return out;
}

// A tiny trained checkpoint shared by the generation tests.
struct Trained {
    TempDir dir{"cli_model"};
    std::filesystem::path corpus = dir / "corpus.jsonl";
    std::filesystem::path ckpt = dir / "run" / "final.ckpt";
    std::filesystem::path index = dir / "docs.idx";

    Trained() {
        write_corpus(corpus, dynvocab::testing::overfit_corpus(31));
        TrainConfig c = dynvocab::testing::overfit_config(4);
        c.model.d_model = 8;
        c.model.n_heads = 2;
        c.model.text_width = 8;
        c.model.text_heads = 2;
        c.model.fragment_width = 8;
        c.model.fragment_heads = 2;
        c.model.n_layers = 1;
        write_text(dir / "cfg.json", c.to_json().dump());
        REQUIRE(run({"train", "--config", (dir / "cfg.json").string(), "--corpus", corpus.string(), "--out",
                     (dir / "run").string()})
                    .code == 0);
        REQUIRE(run({"index", "--checkpoint", ckpt.string(), "--docs", corpus.string(), "--out", index.string()})
                    .code == 0);
    }
};

Trained& trained() {
    static Trained t;
    return t;
}

}  // namespace

TEST_CASE("usage errors exit non-zero") {
    CHECK(run({}).code != 0);
    CHECK(run({"frobnicate"}).code != 0);
    CHECK(run({"validate"}).code != 0);
    CHECK(run({"--version"}).code == 0);
}

TEST_CASE("validate reports problems and summaries") {
    TempDir dir("cli_validate");
    write_text(dir / "bad.jsonl",
               "{\"id\":\"ok\",\"sequence\":\"MKTAY\",\"description\":\"d\",\"fragments\":[]}\n"
               "{\"id\":\"bad_span\",\"sequence\":\"MKTAY\",\"description\":\"d\","
               "\"fragments\":[{\"start\":3,\"end\":9,\"type\":\"Domain\",\"description\":\"x\"}]}\n");
    const Run bad = run({"validate", "--corpus", (dir / "bad.jsonl").string()});
    CHECK(bad.code != 0);
    CHECK(bad.err.find("line 2") != std::string::npos);

    write_corpus(dir / "good.jsonl", dynvocab::testing::overfit_corpus(3));
    const auto out = dir / "report.json";
    REQUIRE(run({"validate", "--corpus", (dir / "good.jsonl").string(), "--out", out.string()}).code == 0);
    const Json rep = read_json(out);
    CHECK(rep.at("records") == 8);
    CHECK(rep.at("fragments") == 8);
    CHECK(rep.at("type_histogram").size() == 8);
    CHECK(std::filesystem::exists(out.string() + ".manifest.json"));
}

TEST_CASE("train with alpha = beta = 0 logs L == L_NTP") {
    TempDir dir("cli_train");
    write_corpus(dir / "c.jsonl", dynvocab::testing::overfit_corpus(4));
    TrainConfig c = dynvocab::testing::overfit_config(3);
    c.model.d_model = 8;
    c.model.n_heads = 2;
    c.model.n_layers = 1;
    write_text(dir / "cfg.json", c.to_json().dump());
    REQUIRE(run({"train", "--config", (dir / "cfg.json").string(), "--corpus", (dir / "c.jsonl").string(),
                 "--out", (dir / "run").string(), "--alpha", "0", "--beta", "0"})
                .code == 0);
    const auto log = read_jsonl(dir / "run" / "loss_log.jsonl");
    REQUIRE(log.size() == 3);
    for (const auto& rec : log) CHECK(rec.at("L") == rec.at("L_NTP"));
    const Json manifest = read_json(dir / "run" / "train.manifest.json");
    CHECK(manifest.dump().find("\"alpha\":0.0") != std::string::npos);

    CHECK(run({"train", "--corpus", (dir / "c.jsonl").string(), "--out", (dir / "x").string(), "--tau", "0"})
              .code != 0);
}

TEST_CASE("generate: sweep files, seeds and the unconditional warning") {
    Trained& t = trained();
    TempDir dir("cli_generate");
    const auto out = dir / "designs.jsonl";
    REQUIRE(run({"generate", "--checkpoint", t.ckpt.string(), "--index", t.index.string(), "--description",
                 "a small test protein", "--topk-retrieval", "2,4", "--samples", "2", "--seed", "3",
                 "--max-residues", "20", "--out", out.string()})
                .code == 0);
    const auto k2 = read_jsonl(dir / "designs.k2.jsonl");
    const auto k4 = read_jsonl(dir / "designs.k4.jsonl");
    CHECK(k2.size() == 2);
    CHECK(k4.size() == 2);
    CHECK(k2[0].at("params").at("K") == 2);
    CHECK(k2[0].at("id") != k2[1].at("id"));
    CHECK_FALSE(std::filesystem::exists(out));

    // worker count does not change the output
    const auto w1 = dir / "w1.jsonl", w3 = dir / "w3.jsonl";
    for (const auto& [path, workers] : {std::pair{w1, "1"}, std::pair{w3, "3"}}) {
        REQUIRE(run({"generate", "--checkpoint", t.ckpt.string(), "--index", t.index.string(), "--description",
                     "a small test protein", "--samples", "4", "--max-residues", "15", "--workers", workers,
                     "--out", path.string()})
                    .code == 0);
    }
    CHECK(read_bytes(w1) == read_bytes(w3));

    const auto un = dir / "uncond.jsonl";
    const Run r = run({"generate", "--checkpoint", t.ckpt.string(), "--unconditional", "--corpus",
                       t.corpus.string(), "--index", t.index.string(), "--samples", "2", "--max-residues", "10",
                       "--out", un.string()});
    CHECK(r.code == 0);
    CHECK(r.err.find("warning") != std::string::npos);
    CHECK(read_jsonl(un).size() == 2);

    CHECK(run({"generate", "--checkpoint", t.ckpt.string(), "--unconditional", "--out", un.string()}).code != 0);
}

TEST_CASE("generate rejects an index built by another model") {
    Trained& t = trained();
    TempDir dir("cli_mismatch");
    TrainConfig c = dynvocab::testing::overfit_config(1);
    c.seed = 999;
    c.model.d_model = 8;
    c.model.n_heads = 2;
    c.model.n_layers = 1;
    c.model.text_width = 8;
    c.model.text_heads = 2;
    c.model.fragment_width = 8;
    c.model.fragment_heads = 2;
    write_text(dir / "cfg.json", c.to_json().dump());
    REQUIRE(run({"train", "--config", (dir / "cfg.json").string(), "--corpus", t.corpus.string(), "--out",
                 (dir / "run").string()})
                .code == 0);
    const Run r = run({"generate", "--checkpoint", (dir / "run" / "final.ckpt").string(), "--index",
                       t.index.string(), "--description", "x", "--out", (dir / "d.jsonl").string()});
    CHECK(r.code != 0);
    CHECK(r.err.find("error") != std::string::npos);
}

TEST_CASE("evaluate without a scorer records a notice") {
    TempDir dir("cli_evaluate");
    write_text(dir / "d.jsonl",
               "{\"id\":\"a\",\"description\":\"k\",\"sequence\":\"MKTAYIAKQR\"}\n"
               "{\"id\":\"b\",\"description\":\"k\",\"sequence\":\"MKTAYIAKQQ\"}\n");
    const auto out = dir / "report.json";
    const Run r = run({"evaluate", "--designs", (dir / "d.jsonl").string(), "--out", out.string(), "--table",
                       (dir / "table.txt").string()});
    REQUIRE(r.code == 0);
    const Json rep = read_json(out);
    CHECK_FALSE(rep.at("notices").empty());
    CHECK_FALSE(rep.at("aggregate").contains("ppl"));
    CHECK(rep.at("diversity").at("groups").size() == 1);
    CHECK(std::filesystem::exists(dir / "table.txt"));
}

TEST_CASE("baselines") {
    TempDir dir("cli_baseline");
    const auto uni = dir / "uniform.jsonl";
    REQUIRE(run({"baseline", "--kind", "uniform", "--count", "5", "--min-length", "10", "--max-length", "12",
                 "--seed", "1", "--out", uni.string()})
                .code == 0);
    const auto rows = load_designs(uni);
    REQUIRE(rows.size() == 5);
    for (const auto& d : rows) {
        CHECK(d.sequence.size() >= 10);
        CHECK(d.sequence.size() <= 12);
    }
    CHECK(run({"baseline", "--kind", "empirical", "--count", "3", "--out", (dir / "e.jsonl").string()}).code != 0);

    write_corpus(dir / "c.jsonl", dynvocab::testing::overfit_corpus(5));
    write_text(dir / "ref.jsonl",
               "{\"id\":\"r1\",\"sequence\":\"MKTAYIAKQRQISF\"}\n{\"id\":\"r2\",\"sequence\":\"MKTAYIA\"}\n");
    const auto plus = dir / "plus.jsonl";
    REQUIRE(run({"baseline", "--kind", "plus", "--corpus", (dir / "c.jsonl").string(), "--lengths-from",
                 (dir / "ref.jsonl").string(), "--p-frag", "0.5", "--out", plus.string()})
                .code == 0);
    const auto p = load_designs(plus);
    REQUIRE(p.size() == 2);
    CHECK(p[0].sequence.size() >= 14);
    CHECK(p[1].sequence.size() >= 7);
    CHECK(run({"baseline", "--kind", "bogus", "--out", plus.string()}).code != 0);
}
