#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "dynvocab/checkpoint.hpp"
#include "dynvocab/training.hpp"
#include "support.hpp"

using namespace dynvocab;
using diff::Matrix;
using dynvocab::testing::read_bytes;
using dynvocab::testing::TempDir;

namespace {

TrainConfig tiny_config(std::size_t steps) {
    TrainConfig c;
    c.max_lr = 3e-3;
    c.total_steps = steps;
    c.microbatch_size = 2;
    c.effective_batch_size = 4;
    c.seed = 21;
    c.model.d_model = 8;
    c.model.n_layers = 1;
    c.model.n_heads = 2;
    c.model.text_width = 8;
    c.model.text_heads = 2;
    c.model.fragment_width = 8;
    c.model.fragment_heads = 2;
    c.model.max_steps = 256;
    c.model.dropout = 0.1;
    c.validate();
    return c;
}

std::vector<Json> read_log(const std::filesystem::path& p) {
    std::vector<Json> out;
    std::istringstream in(read_bytes(p));
    for (std::string line; std::getline(in, line);) out.push_back(Json::parse(line));
    return out;
}

}  // namespace

TEST_CASE("learning-rate schedule edges") {
    TrainConfig c;
    c.max_lr = 2.0;
    c.total_steps = 40;
    c.warmup_fraction = 0.1;  // 4 warmup steps
    c.decay_fraction = 0.25;  // decay over steps 30..39
    CHECK(lr_at(0, c) == 0.0);
    CHECK(lr_at(2, c) == doctest::Approx(1.0));
    CHECK(lr_at(4, c) == 2.0);
    CHECK(lr_at(29, c) == 2.0);
    CHECK(lr_at(30, c) == 2.0);
    CHECK(lr_at(39, c) == doctest::Approx(2.0 * (1.0 - std::sqrt(0.9))));
    for (std::size_t s = 31; s < 40; ++s) CHECK(lr_at(s, c) < lr_at(s - 1, c));
    CHECK_THROWS_AS(lr_at(40, c), std::out_of_range);

    c.warmup_fraction = 0.0;
    CHECK(lr_at(0, c) == 2.0);
}

TEST_CASE("global-norm clipping") {
    diff::ParameterSet ps;
    ps.add("a", Matrix(1, 2)).grad = Matrix(1, 2, std::vector<double>{3.0, 0.0});
    ps.add("b", Matrix(1, 1)).grad = Matrix(1, 1, std::vector<double>{4.0});
    auto& frozen = ps.add("frozen", Matrix(1, 1));
    frozen.grad = Matrix(1, 1, std::vector<double>{100.0});
    frozen.requires_grad = false;

    CHECK(clip_global_norm(ps, 10.0) == doctest::Approx(5.0));
    CHECK(ps.at("a").grad[0] == 3.0);
    CHECK(clip_global_norm(ps, 2.5) == doctest::Approx(5.0));
    CHECK(ps.at("a").grad[0] == doctest::Approx(1.5));
    CHECK(ps.at("b").grad[0] == doctest::Approx(2.0));
    CHECK(ps.at("frozen").grad[0] == 100.0);
}

TEST_CASE("AdamW with zero gradients") {
    TrainConfig c = tiny_config(10);
    c.weight_decay = 0.0;
    TrainState s = init_train_state(c, 4);
    for (auto& [_, p] : s.model.params()) p.grad = Matrix(p.value.rows(), p.value.cols());
    const auto before = s.model.params();
    adamw_update(s, c, 1e-2);
    for (const auto& [name, p] : s.model.params()) CHECK(p.value == before.at(name).value);

    // with decay on, only decayed arrays shrink, by exactly lr * wd * theta
    c.weight_decay = 0.5;
    adamw_update(s, c, 1e-2);
    for (const auto& [name, p] : s.model.params()) {
        const auto& old = before.at(name);
        const double factor = (p.decay && p.requires_grad) ? 1.0 - 1e-2 * 0.5 : 1.0;
        for (std::size_t i = 0; i < p.value.size(); ++i)
            CHECK(p.value[i] == doctest::Approx(old.value[i] * factor).epsilon(1e-14));
    }
}

TEST_CASE("AdamW first step moves each coordinate by about lr") {
    TrainConfig c = tiny_config(10);
    c.weight_decay = 0.0;
    TrainState s = init_train_state(c, 4);
    for (auto& [_, p] : s.model.params()) p.grad = Matrix(p.value.rows(), p.value.cols(), -0.25);
    const auto before = s.model.params();
    adamw_update(s, c, 1e-3);
    const auto& w = s.model.params().at("plm.tok_out");
    CHECK(w.value[0] - before.at("plm.tok_out").value[0] == doctest::Approx(1e-3).epsilon(1e-6));
    CHECK(s.model.params().at("text.tok_emb").value == before.at("text.tok_emb").value);
}

TEST_CASE("epochs visit every record once") {
    const TrainConfig c = tiny_config(10);
    const auto corpus = dynvocab::testing::overfit_corpus(5);
    std::vector<TrainingExample> examples;
    for (const auto& r : corpus) examples.push_back(make_example(r));
    TrainState s = init_train_state(c, examples.size());
    std::multiset<std::string> seen;
    for (int call = 0; call < 2; ++call) {
        const auto batches = next_microbatches(s, c, examples);
        CHECK(batches.size() == 2);
        for (const auto& b : batches) {
            CHECK(b.size() == 2);
            for (const auto& e : b) seen.insert(e.id);
        }
    }
    CHECK(seen.size() == 8);
    CHECK(std::set<std::string>(seen.begin(), seen.end()).size() == 8);
}

TEST_CASE("training is deterministic, resumable and keeps the text encoder frozen") {
    const TrainConfig c = tiny_config(12);
    const auto corpus = dynvocab::testing::overfit_corpus(6);
    TempDir a("train_a"), b("train_b"), r("train_r"), r2("train_r2");
    const auto ra = train(c, corpus, a.path());
    train(c, corpus, b.path());
    CHECK(read_bytes(a / "loss_log.jsonl") == read_bytes(b / "loss_log.jsonl"));
    CHECK(read_bytes(a / "final.ckpt") == read_bytes(b / "final.ckpt"));
    CHECK(read_log(a / "loss_log.jsonl").size() == 12);

    TrainOptions stop;
    stop.stop_after = 5;
    const auto partial = train(c, corpus, r.path(), stop);
    CHECK(partial.history.size() == 5);
    TrainOptions resume;
    resume.resume_from = r / "final.state";
    train(c, corpus, r2.path(), resume);
    CHECK(read_bytes(r2 / "final.ckpt") == read_bytes(a / "final.ckpt"));
    CHECK(read_bytes(r2 / "loss_log.jsonl") == read_bytes(a / "loss_log.jsonl"));

    const Model init = init_train_state(c, corpus.size()).model;
    for (const auto& [name, p] : ra.model.params()) {
        if (name.rfind("text.", 0) == 0) CHECK(p.value == init.params().at(name).value);
    }
    CHECK(ra.model.params().at("plm.tok_out").value != init.params().at("plm.tok_out").value);

    TrainConfig other = c;
    other.max_lr = 1e-3;
    CHECK_THROWS(train(other, corpus, r2.path(), resume));
}

TEST_CASE("unfrozen text encoder does move") {
    TrainConfig c = tiny_config(3);
    c.freeze_text_encoder = false;
    const auto corpus = dynvocab::testing::overfit_corpus(7);
    TempDir d("unfrozen");
    const auto res = train(c, corpus, d.path());
    const Model init = init_train_state(c, corpus.size()).model;
    CHECK(res.model.params().at("text.tok_emb").value != init.params().at("text.tok_emb").value);
}

TEST_CASE("alpha = beta = 0 logs L == L_NTP") {
    TrainConfig c = tiny_config(4);
    c.model.alpha = 0.0;
    c.model.beta = 0.0;
    TempDir d("ntp_only");
    train(c, dynvocab::testing::overfit_corpus(8), d.path());
    for (const auto& rec : read_log(d / "loss_log.jsonl")) {
        CHECK(rec.at("L").get<double>() == rec.at("L_NTP").get<double>());
        CHECK(rec.at("L_TYPE").get<double>() > 0.0);  // still measured, just not weighted
    }
}

TEST_CASE("train config JSON") {
    const TrainConfig c = tiny_config(7);
    const TrainConfig back = TrainConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());

    Json j = c.to_json();
    j["alpha"] = 0.5;
    j["tau"] = 0.1;
    const TrainConfig over = TrainConfig::from_json(j);
    CHECK(over.model.alpha == 0.5);
    CHECK(over.model.tau == 0.1);

    Json bad = c.to_json();
    bad["learning_rate"] = 1.0;
    CHECK_THROWS(TrainConfig::from_json(bad));
    Json indivisible = c.to_json();
    indivisible["effective_batch_size"] = 5;
    CHECK_THROWS(TrainConfig::from_json(indivisible).validate());
    CHECK(TrainConfig{}.max_lr == 1e-4);
    CHECK(TrainConfig{}.beta2 == 0.95);
    CHECK(TrainConfig{}.weight_decay == 0.01);
}

TEST_CASE("a short run lowers the loss") {
    TrainConfig c = tiny_config(60);
    c.model.dropout = 0.0;
    c.effective_batch_size = 8;  // full batch: the curve is not sampling noise
    c.microbatch_size = 4;
    TempDir d("smoke");
    const auto res = train(c, dynvocab::testing::overfit_corpus(9), d.path());
    auto mean_of = [&](std::size_t from, std::size_t to) {
        double s = 0.0;
        for (std::size_t i = from; i < to; ++i) s += res.history[i].loss.total;
        return s / static_cast<double>(to - from);
    };
    CHECK(mean_of(50, 60) < mean_of(0, 10) - 0.1);
    for (const auto& rec : res.history) CHECK(std::isfinite(rec.grad_norm));
}
