// Acceptance suite: end-to-end identities and fixture-oracle checks, one
// pass/fail line per criterion. Exits nonzero if any criterion fails.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <random>
#include <vector>

#include "recall/fixtures.hpp"
#include "recall/interventions.hpp"
#include "recall/taxonomy.hpp"
#include "test_support.hpp"

using namespace recall;
using fixtures::Fixture;
using fixtures::FixtureName;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& name, bool ok,
            const std::string& detail = "") {
    std::printf("[%s] C%-2d %s%s%s\n", ok ? "PASS" : "FAIL", criterion,
                name.c_str(), detail.empty() ? "" : " -- ", detail.c_str());
    if (!ok) ++g_failures;
}

TokenGroupSpans random_spans(std::mt19937_64& rng, int T) {
    if (T == 1) return TokenGroupSpans::end_only();
    // two random cuts inside [0, T-1]
    int a = static_cast<int>(rng() % static_cast<std::uint64_t>(T));
    int b = static_cast<int>(rng() % static_cast<std::uint64_t>(T));
    if (a > b) std::swap(a, b);
    a = std::min(a, T - 1);
    b = std::min(b, T - 1);
    TokenGroupSpans s;
    s.prefix = {0, a};
    s.subject = {a, b};
    s.relation = {b, T - 1};
    s.end_pos = T - 1;
    s.validate(T);
    return s;
}

// C1 + C2: completeness and source-sum identities over 100 seeded models.
void sweep_identities() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst_completeness = 0;
    double worst_source_sum = 0;
    std::mt19937_64 rng(20240601);
    for (int trial = 0; trial < 100; ++trial) {
        const ModelBundle<double> m = testsup::random_model(rng);
        const int T = 1 + static_cast<int>(rng() % 16);
        const auto tokens = testsup::random_tokens(rng, m.config.vocab_size, T);
        const Trace<double> tr = traced_forward(m, tokens);
        const TokenGroupSpans spans = random_spans(rng, T);
        const int end = T - 1;

        const Vecd sum = dla_sum_all(m, tr, end);
        worst_completeness =
            std::max(worst_completeness,
                     (sum - tr.logits.row(end).transpose()).cwiseAbs().maxCoeff());

        for (int l = 0; l < m.config.n_layers; ++l)
            for (int h = 0; h < m.config.n_heads; ++h) {
                const ComponentId head = ComponentId::head(l, h);
                const auto groups = dla_by_source_group(m, tr, head, end, spans);
                // Heads carry no share of the layer attention bias (it lives in
                // the pooled bias pseudo-component), so their bias DLA is zero.
                Vecd group_sum = Vecd::Zero(m.config.vocab_size);
                for (const auto& [g, d] : groups) group_sum += d.values;
                worst_source_sum = std::max(
                    worst_source_sum, (group_sum - dla(m, tr, head, end).values)
                                          .cwiseAbs()
                                          .maxCoeff());
            }
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    report(1, "decomposition completeness over 100 random models",
           worst_completeness <= 1e-6 && secs < 30.0,
           cat("max |sum - logits| = ", format_real(worst_completeness), ", ",
               format_real(secs), " s"));
    report(2, "per-head source-group sum + bias equals head DLA",
           worst_source_sum <= 1e-6,
           cat("max error = ", format_real(worst_source_sum)));
}

void lens_endpoint() {
    std::mt19937_64 rng(77);
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const ModelBundle<double> m = testsup::random_model(rng);
        const int T = 1 + static_cast<int>(rng() % 12);
        const auto tokens = testsup::random_tokens(rng, m.config.vocab_size, T);
        const Trace<double> tr = traced_forward(m, tokens);
        for (int t = 0; t < T; ++t)
            worst = std::max(worst, (logit_lens(m, tr, m.config.n_layers, t) -
                                     tr.logits.row(t).transpose())
                                        .cwiseAbs()
                                        .maxCoeff());
    }
    report(3, "logit lens at layer L equals forward logits", worst <= 1e-12,
           cat("max error = ", format_real(worst)));
}

void fixture_oracle() {
    bool ok = true;
    double worst = 0;
    std::string where;
    for (const auto name : fixtures::all_fixture_names()) {
        const Fixture fx = fixtures::build_fixture(name, 0);
        for (std::size_t i = 0; i < fx.entries.size(); ++i) {
            const auto& e = fx.entries[i];
            const Trace<double> tr = traced_forward(fx.model, e.prompt_tokens);
            for (const auto& rec : fx.expected[i].dla) {
                double got = 0;
                if (rec.source_group) {
                    got = dla_by_source_group(fx.model, tr, rec.component,
                                              e.end_pos(), e.spans)
                              .at(*rec.source_group)
                              .values[rec.token];
                } else {
                    got = dla(fx.model, tr, rec.component, e.end_pos())
                              .values[rec.token];
                }
                const double err = std::abs(got - rec.value);
                if (err > worst) {
                    worst = err;
                    where = cat(to_string(name), " entry ", i, " ",
                                rec.component.to_string());
                }
                if (err > 1e-6) ok = false;
            }
            if (fx.expected[i].logit_diff_true_false) {
                const double diff =
                    tr.logits(e.end_pos(), *fx.vocab.id("true")) -
                    tr.logits(e.end_pos(), *fx.vocab.id("false"));
                if (std::abs(diff - *fx.expected[i].logit_diff_true_false) > 1e-6)
                    ok = false;
            }
        }
    }
    report(4, "fixture oracle: closed-form DLA tables within 1e-6", ok,
           cat("max error = ", format_real(worst), " at ", where));
}

void classifier_sweep() {
    bool ok = true;
    std::string detail;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Fixture subj = fixtures::build_fixture(FixtureName::kSubjectHead, seed);
        const Fixture rel = fixtures::build_fixture(FixtureName::kRelationHead, seed);
        const Fixture comp = fixtures::build_fixture(FixtureName::kComposite, seed);
        auto label_of = [](const std::vector<HeadLabel>& labels, ComponentId id)
            -> std::optional<HeadType> {
            for (const auto& l : labels)
                if (l.head == id) return l.label;
            return std::nullopt;
        };
        const auto ls = classify_heads(subj.model, subj.entries);
        const auto lr = classify_heads(rel.model, rel.entries);
        std::vector<FactEntry> r0;
        for (const auto& e : comp.entries)
            if (e.relation_id == "r0") r0.push_back(e);
        const auto lc = classify_heads(comp.model, r0);
        const bool good =
            label_of(ls, subj.roles.at("subject_head")) == HeadType::kSubject &&
            label_of(lr, rel.roles.at("relation_head")) == HeadType::kRelation &&
            label_of(lc, comp.roles.at("mixed_head")) == HeadType::kMixed &&
            label_of(lc, comp.roles.at("subject_head")) == HeadType::kSubject &&
            label_of(lc, comp.roles.at("relation_head")) == HeadType::kRelation;
        if (!good) {
            ok = false;
            detail = cat("seed ", seed, " mislabeled");
        }
    }
    report(5, "head classifier correct on 10 fixture seeds", ok, detail);
}

void additivity_criterion() {
    bool ok = true;
    std::string detail;

    const Fixture d6 = fixtures::build_fixture(FixtureName::kDiv6, 0);
    const auto div2 = d6.roles.at("div2_head");
    const auto div3 = d6.roles.at("div3_head");
    for (const auto& e : d6.entries) {
        const int n = std::stoi(e.subject);
        if (n % 6 != 0) continue;
        const Trace<double> tr = traced_forward(d6.model, e.prompt_tokens);
        if (!detect_additivity(d6.model, tr, e, {div2, div3}).verdict) {
            ok = false;
            detail = cat("div6 verdict false on ", n);
        }
        if (detect_additivity(d6.model, tr, e, {div2, div2}).verdict) {
            ok = false;
            detail = cat("duplicate components accepted on ", n);
        }
        HookSet<double> hooks;
        hooks.zero_heads.push_back({div3.layer, div3.head_index});
        const Trace<double> ablated = traced_forward(d6.model, e.prompt_tokens, &hooks);
        const auto rep = detect_additivity(d6.model, ablated, e, {div2, div3});
        if (rep.verdict || rep.condition_positive) {
            ok = false;
            detail = cat("zeroed circuit accepted on ", n);
        }
    }

    const Fixture comp = fixtures::build_fixture(FixtureName::kComposite, 0);
    const std::vector<ComponentId> mechanisms = {
        comp.roles.at("subject_head"), comp.roles.at("relation_head"),
        comp.roles.at("mixed_head"), comp.roles.at("mlp")};
    if (comp.entries.size() != 20) {
        ok = false;
        detail = "composite bundle is not 20 entries";
    }
    for (const auto& e : comp.entries) {
        const Trace<double> tr = traced_forward(comp.model, e.prompt_tokens);
        Vecd sum = Vecd::Zero(comp.model.config.vocab_size);
        for (const auto& c : mechanisms) {
            const Vecd v = dla(comp.model, tr, c, e.end_pos()).values;
            if (rank_of<double>(v, e.a_first_token) == 0) {
                ok = false;
                detail = cat("mechanism ", c.to_string(), " alone ranks a first (",
                             e.subject, ",", e.relation_id, ")");
            }
            sum += v;
        }
        if (rank_of<double>(sum, e.a_first_token) != 0) {
            ok = false;
            detail = cat("summed mechanisms do not rank a first (", e.subject, ")");
        }
        if (!detect_additivity(comp.model, tr, e, mechanisms).verdict) {
            ok = false;
            detail = cat("composite verdict false (", e.subject, ")");
        }
    }
    report(6, "additivity detector: div6 verdicts and composite ranks", ok, detail);
}

void knockout_criterion() {
    const Fixture fx = fixtures::build_fixture(FixtureName::kPropagation, 0);
    const auto reader = fx.roles.at("reader_head");
    bool ok = true;
    std::string detail;
    for (const auto& e : fx.entries) {
        const Trace<double> clean = traced_forward(fx.model, e.prompt_tokens);
        const Trace<double> blocked =
            attention_knockout(fx.model, std::span<const int>(e.prompt_tokens),
                               e.spans, Group::kRelation, Group::kSubject);
        const int before =
            rank_of<double>(dla_by_source_group(fx.model, clean, reader,
                                                e.end_pos(), e.spans)
                                .at(Group::kRelation)
                                .values,
                            e.a_first_token);
        const int after =
            rank_of<double>(dla_by_source_group(fx.model, blocked, reader,
                                                e.end_pos(), e.spans)
                                .at(Group::kRelation)
                                .values,
                            e.a_first_token);
        if (!(after > before)) {
            ok = false;
            detail = cat(e.subject, ": rank ", before, " -> ", after);
        }
    }
    report(7, "knockout raises the answer's RELATION-group rank", ok, detail);
}

void patching_criterion() {
    const Fixture fx = fixtures::build_fixture(FixtureName::kRelationHead, 0);
    const auto head = fx.roles.at("relation_head");
    double worst = 0;
    for (std::size_t i = 0; i < fx.entries.size(); ++i)
        for (std::size_t j = 0; j < fx.entries.size(); ++j) {
            if (i == j) continue;
            const auto& target = fx.entries[i];
            const auto& source = fx.entries[j];
            const Trace<double> clean = traced_forward(fx.model, target.prompt_tokens);
            const Trace<double> patched = activation_patch(
                fx.model, std::span<const int>(target.prompt_tokens),
                std::span<const int>(source.prompt_tokens), {head},
                std::vector<int>{target.end_pos()}, &target.spans, &source.spans);
            worst = std::max(worst,
                             std::abs(eval_metrics(patched, target).logprob -
                                      eval_metrics(clean, target).logprob));
        }
    report(8, "patching the relation head between subjects is neutral",
           worst < 1e-6, cat("max |dlogprob| = ", format_real(worst)));
}

void edge_ablation_criterion() {
    bool ok = true;
    std::string detail;

    std::mt19937_64 rng(515);
    double worst_zero = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const ModelBundle<double> m = testsup::random_model(rng);
        const int T = 1 + static_cast<int>(rng() % 8);
        const auto tokens = testsup::random_tokens(rng, m.config.vocab_size, T);
        const Trace<double> tr = traced_forward(m, tokens);
        const Matd out = direct_path_ablation(m, tr, all_components(m.config));
        worst_zero = std::max(worst_zero, out.row(T - 1).cwiseAbs().maxCoeff());
    }
    if (worst_zero > 1e-6) {
        ok = false;
        detail = cat("residual logits after removing everything: ",
                     format_real(worst_zero));
    }

    const Fixture fx = fixtures::build_fixture(FixtureName::kSubjectHead, 0);
    for (const auto& e : fx.entries) {
        const Trace<double> tr = traced_forward(fx.model, e.prompt_tokens);
        const auto base = eval_metrics(tr, e);
        const Matd ablated =
            direct_path_ablation(fx.model, tr, {fx.roles.at("subject_head")});
        if (!(eval_metrics<double>(ablated, e).loss > base.loss)) {
            ok = false;
            detail = cat("loss did not increase for ", e.subject);
        }
    }
    report(9, "edge ablation: all-components zero, planted knockout hurts loss",
           ok, detail.empty() ? cat("max |logit| = ", format_real(worst_zero))
                              : detail);
}

void intervention_invariants() {
    bool ok = true;
    std::string detail;

    const Fixture fx = fixtures::build_fixture(FixtureName::kPropagation, 0);
    const auto& e = fx.entries[1];

    HookSet<double> once;
    once.attn_blocks.push_back({e.spans.positions(Group::kRelation),
                                e.spans.positions(Group::kSubject), std::nullopt,
                                true});
    HookSet<double> twice = once;
    twice.attn_blocks.push_back(once.attn_blocks[0]);
    const Trace<double> a = traced_forward(fx.model, e.prompt_tokens, &once);
    const Trace<double> b = traced_forward(fx.model, e.prompt_tokens, &twice);
    if ((a.logits - b.logits).cwiseAbs().maxCoeff() != 0.0) {
        ok = false;
        detail = "knockout not idempotent";
    }

    for (int l = 0; l < fx.model.config.n_layers && ok; ++l)
        for (int h = 0; h < fx.model.config.n_heads && ok; ++h) {
            const Matd& p = a.attn_prob(l, h);
            for (int d : e.spans.positions(Group::kRelation))
                for (int s : e.spans.positions(Group::kSubject))
                    if (p(d, s) != 0.0) {
                        ok = false;
                        detail = "blocked cell not exactly zero";
                    }
            for (int t = 0; t < e.spans.seq_len(); ++t) {
                double total = 0;
                for (int s = 0; s <= t; ++s) total += p(t, s);
                if (std::abs(total - 1.0) > 1e-12) {
                    ok = false;
                    detail = "knocked-out row does not renormalize";
                }
            }
        }

    const Trace<double> clean = traced_forward(fx.model, e.prompt_tokens);
    const Trace<double> noop = activation_patch(
        fx.model, std::span<const int>(e.prompt_tokens),
        std::span<const int>(e.prompt_tokens),
        {fx.roles.at("reader_head"), ComponentId::mlp(0), ComponentId::embed()});
    bool bits_equal = (clean.logits - noop.logits).cwiseAbs().maxCoeff() == 0.0;
    for (std::size_t i = 0; i < clean.resid.size() && bits_equal; ++i)
        bits_equal = (clean.resid[i] - noop.resid[i]).cwiseAbs().maxCoeff() == 0.0;
    if (!bits_equal) {
        ok = false;
        detail = "self-patch is not bit-identical";
    }

    report(10, "intervention invariants: idempotence, no-op patch, exact zeros",
           ok, detail);
}

}  // namespace

int main() {
    const auto t0 = std::chrono::steady_clock::now();
    sweep_identities();
    lens_endpoint();
    fixture_oracle();
    classifier_sweep();
    additivity_criterion();
    knockout_criterion();
    patching_criterion();
    edge_ablation_criterion();
    intervention_invariants();
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    std::printf("%d/10 criteria passed in %.2f s\n", 10 - g_failures, secs);
    return g_failures == 0 ? 0 : 1;
}
