#include <doctest.h>

#include <filesystem>

#include "recall/fixtures.hpp"
#include "recall/interventions.hpp"
#include "recall/taxonomy.hpp"

using namespace recall;
namespace fs = std::filesystem;

namespace {

// Checks every closed-form expectation of a fixture against the attribution
// pipeline. This is the master oracle for the DLA machinery.
void check_expected_tables(const fixtures::Fixture& fx, double tol = 1e-6) {
    REQUIRE(fx.entries.size() == fx.expected.size());
    for (std::size_t i = 0; i < fx.entries.size(); ++i) {
        const auto& e = fx.entries[i];
        const Trace<double> tr = traced_forward(fx.model, e.prompt_tokens);
        for (const auto& rec : fx.expected[i].dla) {
            double got = 0;
            if (rec.source_group) {
                const auto groups = dla_by_source_group(
                    fx.model, tr, rec.component, e.end_pos(), e.spans);
                got = groups.at(*rec.source_group).values[rec.token];
            } else {
                got = dla(fx.model, tr, rec.component, e.end_pos()).values[rec.token];
            }
            INFO("fixture ", to_string(fx.spec.name), " entry ", i, " component ",
                 rec.component.to_string(), " token ", rec.token);
            CHECK(std::abs(got - rec.value) <= tol);
        }
        if (fx.expected[i].logit_diff_true_false) {
            const int t = *fx.vocab.id("true");
            const int f = *fx.vocab.id("false");
            const double diff =
                tr.logits(e.end_pos(), t) - tr.logits(e.end_pos(), f);
            CHECK(std::abs(diff - *fx.expected[i].logit_diff_true_false) <= tol);
        }
    }
}

}  // namespace

TEST_SUITE("fixtures") {

TEST_CASE("every fixture validates and matches its expected table") {
    for (const auto name : fixtures::all_fixture_names()) {
        CAPTURE(to_string(name));
        const auto fx = fixtures::build_fixture(name, 0);
        fx.model.validate();
        check_expected_tables(fx);
    }
}

TEST_CASE("expected tables hold across seeds") {
    for (std::uint64_t seed : {1ULL, 5ULL, 9ULL}) {
        const auto fx =
            fixtures::build_fixture(fixtures::FixtureName::kComposite, seed);
        check_expected_tables(fx);
    }
}

TEST_CASE("planted attention is saturated") {
    const auto fx = fixtures::build_fixture(fixtures::FixtureName::kSubjectHead, 0);
    for (const auto& e : fx.entries) {
        const Trace<double> tr = traced_forward(fx.model, e.prompt_tokens);
        CHECK(tr.attn_prob(0, 0)(e.end_pos(), e.spans.subject.begin) >= 0.99);
        CHECK(tr.attn_prob(0, 0)(e.end_pos(), e.spans.subject.begin) >=
              1.0 - 1e-8);
    }
}

TEST_CASE("div6 behaves like the arithmetic toy on every residue") {
    const auto fx = fixtures::build_fixture(fixtures::FixtureName::kDiv6, 0);
    const int tok_true = *fx.vocab.id("true");
    const int tok_false = *fx.vocab.id("false");
    REQUIRE(fx.entries.size() == 24);
    for (int n = 0; n < 24; ++n) {
        const auto& e = fx.entries[static_cast<std::size_t>(n)];
        const Trace<double> tr = traced_forward(fx.model, e.prompt_tokens);
        // independent enumeration oracle over residues
        const double expect_diff =
            (n % 2 == 0 ? 1.0 : 0.0) + (n % 3 == 0 ? 1.0 : 0.0) - 1.5;
        const double diff = tr.logits(0, tok_true) - tr.logits(0, tok_false);
        CHECK(diff == doctest::Approx(expect_diff).epsilon(1e-9));
        // the model answers the divisibility question correctly
        const Vecd row = tr.logits.row(0).transpose();
        const bool predicted_true =
            row[tok_true] > row[tok_false];
        CHECK(predicted_true == (n % 6 == 0));
    }
}

TEST_CASE("div6: each circuit alone answers false on multiples of six") {
    const auto fx = fixtures::build_fixture(fixtures::FixtureName::kDiv6, 0);
    const int tok_true = *fx.vocab.id("true");
    const int tok_false = *fx.vocab.id("false");
    for (int n : {0, 6, 12, 18}) {
        const auto& e = fx.entries[static_cast<std::size_t>(n)];
        const Trace<double> tr = traced_forward(fx.model, e.prompt_tokens);
        for (const char* role : {"div2_head", "div3_head"}) {
            const Vecd alone =
                dla(fx.model, tr, fx.roles.at(role), 0).values +
                dla(fx.model, tr, ComponentId::bias(), 0).values;
            CHECK(alone[tok_false] > alone[tok_true]);  // +1 < +1.5
        }
    }
}

TEST_CASE("composite: no mechanism suffices alone, the sum does") {
    const auto fx = fixtures::build_fixture(fixtures::FixtureName::kComposite, 0);
    const std::vector<ComponentId> mechanisms = {
        fx.roles.at("subject_head"), fx.roles.at("relation_head"),
        fx.roles.at("mixed_head"), fx.roles.at("mlp")};
    REQUIRE(fx.entries.size() == 20);
    for (const auto& e : fx.entries) {
        const Trace<double> tr = traced_forward(fx.model, e.prompt_tokens);
        Vecd sum = Vecd::Zero(fx.model.config.vocab_size);
        for (const auto& c : mechanisms) {
            const Vecd v = dla(fx.model, tr, c, e.end_pos()).values;
            CHECK(rank_of<double>(v, e.a_first_token) > 0);
            sum += v;
        }
        CHECK(rank_of<double>(sum, e.a_first_token) == 0);
        // and the full model puts the answer on top
        CHECK(rank_of<double>(tr.logits.row(e.end_pos()).transpose(),
                              e.a_first_token) == 0);
        // the additivity detector agrees
        const auto rep = detect_additivity(fx.model, tr, e, mechanisms);
        CHECK(rep.verdict);
    }
}

TEST_CASE("undersized dims are rejected") {
    ModelConfig tiny{2, 2, 16, 12, 8, 112, 4, 1e-5, ResidualStyle::kParallel};
    CHECK_THROWS_WITH_AS(
        fixtures::build_fixture(fixtures::FixtureName::kSubjectHead, 0, &tiny),
        "fixture dims too small for the planted structure", std::runtime_error);
}

TEST_CASE("emitted assets reload to a bit-identical model") {
    const fs::path dir = fs::temp_directory_path() / "recall_fx_emit";
    fs::remove_all(dir);
    const auto fx = fixtures::build_fixture(fixtures::FixtureName::kComposite, 2);
    fixtures::emit(fx, dir);
    CHECK(fs::exists(dir / "expected.json"));

    const auto loaded = load_model<double>(dir / "config.json", dir / "weights.json",
                                           dir / "vocab.txt");
    const auto entries = load_dataset(dir / "dataset.jsonl", loaded.vocab);
    REQUIRE(entries.size() == fx.entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const Matd a = forward(fx.model, fx.entries[i].prompt_tokens);
        const Matd b = forward(loaded.model, entries[i].prompt_tokens);
        CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
    }
}

}  // TEST_SUITE
