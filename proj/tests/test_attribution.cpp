#include <doctest.h>

#include <random>
#include <set>

#include "recall/attribution.hpp"
#include "recall/fixtures.hpp"
#include "test_support.hpp"

using namespace recall;

namespace {

TokenGroupSpans spans_for(int T) {
    // fixture prompt template: [prefix subject relation end]
    TokenGroupSpans s;
    s.prefix = {0, 1};
    s.subject = {1, 2};
    s.relation = {2, T - 1};
    s.end_pos = T - 1;
    return s;
}

}  // namespace

TEST_SUITE("attribution") {

TEST_CASE("completeness: component DLAs sum to the logits") {
    std::mt19937_64 rng(101);
    for (int trial = 0; trial < 20; ++trial) {
        const ModelBundle<double> m = testsup::random_model(rng);
        const int T = 1 + static_cast<int>(rng() % 8);
        const auto tokens = testsup::random_tokens(rng, m.config.vocab_size, T);
        const Trace<double> tr = traced_forward(m, tokens);
        for (int t : {0, T - 1}) {
            const Vecd sum = dla_sum_all(m, tr, t);
            const Vecd target = tr.logits.row(t).transpose();
            CHECK((sum - target).cwiseAbs().maxCoeff() <= 1e-6);
        }
    }
}

TEST_CASE("logit lens at the last layer is the forward logits, bit for bit") {
    std::mt19937_64 rng(103);
    for (int trial = 0; trial < 20; ++trial) {
        const ModelBundle<double> m = testsup::random_model(rng);
        const int T = 1 + static_cast<int>(rng() % 12);
        const auto tokens = testsup::random_tokens(rng, m.config.vocab_size, T);
        const Trace<double> tr = traced_forward(m, tokens);
        for (int t = 0; t < T; ++t) {
            const Vecd lens = logit_lens(m, tr, m.config.n_layers, t);
            CHECK((lens - tr.logits.row(t).transpose()).cwiseAbs().maxCoeff() ==
                  0.0);
        }
        if (trial == 0)
            CHECK_THROWS_AS(logit_lens(m, tr, m.config.n_layers + 1, 0),
                            std::out_of_range);
    }
}

TEST_CASE("logit lens at layer 0 is the unembedded embedding") {
    std::mt19937_64 rng(107);
    ModelBundle<double> m = testsup::random_model(rng);
    for (auto& lw : m.layers) {
        for (auto& hw : lw.heads) {
            hw.wq.setZero(); hw.wk.setZero(); hw.wv.setZero(); hw.wo.setZero();
        }
        lw.attn_bias.reset();
        lw.mlp.w_in.setZero(); lw.mlp.b_in.setZero();
        lw.mlp.w_out.setZero(); lw.mlp.b_out.setZero();
    }
    const auto tokens = testsup::random_tokens(rng, m.config.vocab_size, 4);
    const Trace<double> tr = traced_forward(m, tokens);
    for (int t = 0; t < 4; ++t) {
        const Vecd z0 = (m.token_embed.row(tokens[static_cast<std::size_t>(t)]) +
                         m.pos_embed.row(t))
                            .transpose();
        auto [y, st] = layer_norm<double>(z0, m.final_ln.gamma, m.final_ln.beta,
                                          m.config.ln_eps);
        Vecd expect = (y.transpose() * m.unembed).transpose();
        if (m.unembed_bias) expect += *m.unembed_bias;
        CHECK((logit_lens(m, tr, 0, t) - expect).cwiseAbs().maxCoeff() <= 1e-12);
        // residual is untouched by zeroed layers, so every lens agrees
        CHECK((logit_lens(m, tr, m.config.n_layers, t) - expect)
                  .cwiseAbs()
                  .maxCoeff() <= 1e-12);
    }
}

TEST_CASE("lens on the subject fixture: the answer rises after layer 0") {
    const auto fx = fixtures::build_fixture(fixtures::FixtureName::kSubjectHead, 1);
    const auto& e = fx.entries[2];
    const Trace<double> tr = traced_forward(fx.model, e.prompt_tokens);
    const double before = logit_lens(fx.model, tr, 0, e.end_pos())[e.a_first_token];
    const double after = logit_lens(fx.model, tr, 1, e.end_pos())[e.a_first_token];
    CHECK(std::abs(before) < 1e-9);
    CHECK(after > 1.0);
}

TEST_CASE("dla of a zero component is all zeros") {
    std::mt19937_64 rng(109);
    ModelBundle<double> m = testsup::random_model(rng);
    for (auto& hw : m.layers[0].heads) {
        hw.wv.setZero();
        hw.wo.setZero();
    }
    const auto tokens = testsup::random_tokens(rng, m.config.vocab_size, 3);
    const Trace<double> tr = traced_forward(m, tokens);
    const auto d = dla(m, tr, ComponentId::head(0, 0), 2);
    CHECK(d.values.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("frozen-LN linearization is exactly linear") {
    std::mt19937_64 rng(113);
    const ModelBundle<double> m = testsup::random_model(rng);
    const auto tokens = testsup::random_tokens(rng, m.config.vocab_size, 4);
    const Trace<double> tr = traced_forward(m, tokens);
    const Vecd c1 = testsup::gaussian_vec(rng, m.config.d_model, 1.0);
    const Vecd c2 = testsup::gaussian_vec(rng, m.config.d_model, 1.0);
    const Vecd lhs = linearize_to_logits(m, tr, Vecd(c1 + c2), 3);
    const Vecd rhs = linearize_to_logits(m, tr, c1, 3) +
                     linearize_to_logits(m, tr, c2, 3);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("dla_by_source_group partitions the head DLA") {
    std::mt19937_64 rng(127);
    for (int trial = 0; trial < 8; ++trial) {
        const ModelBundle<double> m = testsup::random_model(rng);
        const int T = 5;
        const auto tokens = testsup::random_tokens(rng, m.config.vocab_size, T);
        const Trace<double> tr = traced_forward(m, tokens);
        const TokenGroupSpans spans = spans_for(T);
        for (int h = 0; h < m.config.n_heads; ++h) {
            const ComponentId head = ComponentId::head(0, h);
            const auto groups = dla_by_source_group(m, tr, head, T - 1, spans);
            Vecd sum = Vecd::Zero(m.config.vocab_size);
            for (const auto& [g, d] : groups) sum += d.values;
            const Vecd whole = dla(m, tr, head, T - 1).values;
            CHECK((sum - whole).cwiseAbs().maxCoeff() <= 1e-6);
        }
    }
}

TEST_CASE("dla_by_source_group trivial partitions and errors") {
    std::mt19937_64 rng(131);
    const ModelBundle<double> m = testsup::random_model(rng);

    SUBCASE("T=1 end-only spans put everything in END") {
        const auto tokens = testsup::random_tokens(rng, m.config.vocab_size, 1);
        const Trace<double> tr = traced_forward(m, tokens);
        const auto groups = dla_by_source_group(
            m, tr, ComponentId::head(0, 0), 0, TokenGroupSpans::end_only());
        const Vecd whole = dla(m, tr, ComponentId::head(0, 0), 0).values;
        CHECK((groups.at(Group::kEnd).values - whole).cwiseAbs().maxCoeff() <=
              1e-12);
        CHECK(groups.at(Group::kPrefix).values.cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("non-partition spans rejected") {
        const auto tokens = testsup::random_tokens(rng, m.config.vocab_size, 5);
        const Trace<double> tr = traced_forward(m, tokens);
        TokenGroupSpans bad = spans_for(5);
        bad.subject = {1, 3};  // overlaps relation
        CHECK_THROWS_AS(
            dla_by_source_group(m, tr, ComponentId::head(0, 0), 4, bad),
            std::invalid_argument);
        CHECK_THROWS_AS(
            dla_by_source_group(m, tr, ComponentId::mlp(0), 4, spans_for(5)),
            std::invalid_argument);
    }
}

TEST_CASE("mean_center examples and algebra") {
    Vecd v(3);
    v << 3.0, 1.0, 2.0;
    const Vecd c = mean_center(v);
    CHECK(c[0] == doctest::Approx(1.0));
    CHECK(c[1] == doctest::Approx(-1.0));
    CHECK(c[2] == doctest::Approx(0.0));
    CHECK(std::abs(mean_center(c).mean()) < 1e-12);
    CHECK((mean_center(c) - c).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(mean_center(Vecd(Vecd::Constant(6, 4.2))).cwiseAbs().maxCoeff() < 1e-12);

    // centering commutes with summation
    std::mt19937_64 rng(137);
    const Vecd a = testsup::gaussian_vec(rng, 11, 1.0);
    const Vecd b = testsup::gaussian_vec(rng, 11, 1.0);
    CHECK((mean_center(Vecd(a + b)) - (mean_center(a) + mean_center(b)))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
}

TEST_CASE("attribute_stats conventions on fixtures") {
    SUBCASE("empty R set reports absent, not zero") {
        const auto fx = fixtures::build_fixture(fixtures::FixtureName::kDiv6, 0);
        FactEntry e = fx.entries[0];
        e.r_minus_a.clear();
        e.r_first_tokens.clear();
        const Trace<double> tr = traced_forward(fx.model, e.prompt_tokens);
        const auto stats =
            attribute_stats(fx.model, tr, e, fx.roles.at("div2_head"), false);
        CHECK(!stats.mean_top5_r_minus_a.has_value());
        CHECK(!stats.mean_s_minus_a.has_value());
    }
    SUBCASE("relation head does not privilege the correct attribute") {
        const auto fx =
            fixtures::build_fixture(fixtures::FixtureName::kRelationHead, 0);
        const auto& e = fx.entries[3];
        const Trace<double> tr = traced_forward(fx.model, e.prompt_tokens);
        const auto stats =
            attribute_stats(fx.model, tr, e, fx.roles.at("relation_head"), true);
        REQUIRE(stats.mean_top5_r_minus_a.has_value());
        CHECK(stats.dla_a ==
              doctest::Approx(*stats.mean_top5_r_minus_a).epsilon(1e-9));
        CHECK(stats.attn_relation > 0.99);
        CHECK(stats.per_group_dla_a.at(Group::kRelation) ==
              doctest::Approx(stats.dla_a).epsilon(1e-9));
    }
    SUBCASE("subject head strongly prefers the correct attribute") {
        const auto fx =
            fixtures::build_fixture(fixtures::FixtureName::kSubjectHead, 0);
        const auto& e = fx.entries[0];
        const Trace<double> tr = traced_forward(fx.model, e.prompt_tokens);
        const auto stats =
            attribute_stats(fx.model, tr, e, fx.roles.at("subject_head"), true);
        REQUIRE(stats.mean_top5_r_minus_a.has_value());
        CHECK(stats.dla_a > 3.0 * std::abs(*stats.mean_top5_r_minus_a));
        CHECK(stats.dla_a > 1.0);
        CHECK(stats.attn_subject > 0.99);
    }
}

TEST_CASE("relation head's top DLA tokens are the planted attribute set") {
    const auto fx = fixtures::build_fixture(fixtures::FixtureName::kRelationHead, 0);
    const auto& e = fx.entries[0];
    const Trace<double> tr = traced_forward(fx.model, e.prompt_tokens);
    const Vecd v =
        dla(fx.model, tr, fx.roles.at("relation_head"), e.end_pos()).values;
    std::vector<int> order(static_cast<std::size_t>(v.size()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return v[a] > v[b]; });
    const std::set<int> planted(fx.spec.planted_r.begin(), fx.spec.planted_r.end());
    for (int i = 0; i < 5; ++i) CHECK(planted.count(order[static_cast<std::size_t>(i)]) == 1);
}

TEST_CASE("mlp_total_dla definitions") {
    std::mt19937_64 rng(139);
    const ModelBundle<double> m = testsup::random_model(rng);
    const auto tokens = testsup::random_tokens(rng, m.config.vocab_size, 4);
    const Trace<double> tr = traced_forward(m, tokens);
    Vecd sum = Vecd::Zero(m.config.vocab_size);
    for (int l = 0; l < m.config.n_layers; ++l)
        sum += dla(m, tr, ComponentId::mlp(l), 3).values;
    CHECK((mlp_total_dla(m, tr, 3).values - sum).cwiseAbs().maxCoeff() == 0.0);

    SUBCASE("zero-MLP model: centered total is zero") {
        ModelBundle<double> z = m;
        for (auto& lw : z.layers) {
            lw.mlp.w_in.setZero(); lw.mlp.b_in.setZero();
            lw.mlp.w_out.setZero(); lw.mlp.b_out.setZero();
        }
        const Trace<double> tz = traced_forward(z, tokens);
        const Vecd centered = mean_center(mlp_total_dla(z, tz, 3).values);
        CHECK(centered.cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("composite fixture: MLP boosts exactly the relation attribute set") {
    const auto fx = fixtures::build_fixture(fixtures::FixtureName::kComposite, 0);
    const auto& e = fx.entries[0];  // relation r0
    const Trace<double> tr = traced_forward(fx.model, e.prompt_tokens);
    const Vecd centered =
        mean_center(mlp_total_dla(fx.model, tr, e.end_pos()).values);
    // planted_r holds r0's attribute set incl. the generic distractor token
    std::vector<std::pair<double, int>> ranked;
    for (int t = 0; t < fx.model.config.vocab_size; ++t)
        ranked.emplace_back(centered[t], t);
    std::sort(ranked.begin(), ranked.end(), std::greater<>());
    std::set<int> top;
    for (std::size_t i = 0; i < fx.spec.planted_r.size(); ++i)
        top.insert(ranked[i].second);
    for (int t : fx.spec.planted_r) CHECK(top.count(t) == 1);
}

}  // TEST_SUITE
