#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "recall/attribution.hpp"

namespace recall {

enum class HeadType { kSubject, kRelation, kMixed };

inline std::string_view to_string(HeadType t) {
    switch (t) {
        case HeadType::kSubject: return "Subject";
        case HeadType::kRelation: return "Relation";
        case HeadType::kMixed: return "Mixed";
    }
    return "?";
}

// Subject iff subject_dla / relation_dla > 10, Relation iff the inverse
// ratio > 10, Mixed otherwise. Ratios are taken on signed values, so a head
// whose SUBJECT and RELATION attributions have opposite signs is always
// Mixed (both ratios negative); 0/0 gives NaN and also lands on Mixed.
inline HeadType head_type_from_ratio(double subject_dla, double relation_dla) {
    const double s_over_r = subject_dla / relation_dla;
    const double r_over_s = relation_dla / subject_dla;
    if (s_over_r > 10.0) return HeadType::kSubject;
    if (r_over_s > 10.0) return HeadType::kRelation;
    return HeadType::kMixed;
}

struct HeadLabel {
    ComponentId head;
    HeadType label = HeadType::kMixed;
    double subject_dla = 0;   // mean DLA(a) attributed to SUBJECT sources
    double relation_dla = 0;  // mean DLA(a) attributed to RELATION sources
    double ratio = 0;         // subject_dla / relation_dla (signed, may be inf)
    double attn_subject = 0;  // mean attention mass, reported but unused for labels
    double attn_relation = 0;
    double rank_metric = 0;   // mean |DLA(a)| used for the top-k ranking
};

// Which per-head quantity drives the top-k ranking.
enum class RankBasis { kCorrectAttribute, kTotalAbsDla };

// Labels the top_k heads (by mean |DLA on a| at END, or mean Σ|DLA| with
// kTotalAbsDla) over a dataset sharing one relation. Attention masses are
// reported but deliberately not used for labeling.
template <class S>
std::vector<HeadLabel> classify_heads(const ModelBundle<S>& m,
                                      const std::vector<FactEntry>& entries,
                                      int top_k = 10,
                                      RankBasis basis = RankBasis::kCorrectAttribute) {
    if (entries.empty())
        throw std::invalid_argument("classify_heads: empty dataset");
    for (const auto& e : entries)
        if (e.relation_id != entries.front().relation_id)
            throw std::invalid_argument(
                cat("classify_heads: mixed relations in dataset ('",
                    entries.front().relation_id, "' vs '", e.relation_id, "')"));

    const int L = m.config.n_layers, H = m.config.n_heads;
    const std::size_t n_heads = static_cast<std::size_t>(L * H);
    std::vector<HeadLabel> acc(n_heads);
    for (int l = 0; l < L; ++l)
        for (int h = 0; h < H; ++h)
            acc[static_cast<std::size_t>(l * H + h)].head = ComponentId::head(l, h);

    for (const auto& e : entries) {
        const Trace<S> tr = traced_forward(m, e.prompt_tokens);
        const int end = e.end_pos();
        for (auto& label : acc) {
            const auto stats = attribute_stats(m, tr, e, label.head, true);
            if (basis == RankBasis::kCorrectAttribute) {
                label.rank_metric += std::abs(stats.dla_a);
            } else {
                label.rank_metric +=
                    static_cast<double>(dla(m, tr, label.head, end)
                                            .values.cwiseAbs()
                                            .sum());
            }
            label.subject_dla += stats.per_group_dla_a.at(Group::kSubject);
            label.relation_dla += stats.per_group_dla_a.at(Group::kRelation);
            label.attn_subject += stats.attn_subject;
            label.attn_relation += stats.attn_relation;
        }
    }
    const double n = static_cast<double>(entries.size());
    for (auto& label : acc) {
        label.rank_metric /= n;
        label.subject_dla /= n;
        label.relation_dla /= n;
        label.attn_subject /= n;
        label.attn_relation /= n;
        label.ratio = label.subject_dla / label.relation_dla;
        label.label = head_type_from_ratio(label.subject_dla, label.relation_dla);
    }
    std::stable_sort(acc.begin(), acc.end(), [](const HeadLabel& a, const HeadLabel& b) {
        return a.rank_metric > b.rank_metric;
    });
    if (static_cast<int>(acc.size()) > top_k)
        acc.resize(static_cast<std::size_t>(top_k));
    return acc;
}

// Uses a head's OV circuit as a linear probe on the residual stream at
// probe_pos: as if the head attended there with probability one. The write
// is pushed through the frozen final LN and unembedding, softmaxed, and
// tokens above the confidence threshold are returned, most probable first.
template <class S>
std::vector<std::pair<int, double>> ov_probe(const ModelBundle<S>& m,
                                             const Trace<S>& tr, ComponentId head,
                                             int probe_pos,
                                             double confidence_threshold = 0.01) {
    if (head.kind != ComponentId::Kind::kHead)
        throw std::invalid_argument("ov_probe: component must be a head");
    if (probe_pos < 0 || probe_pos >= tr.seq_len())
        throw std::out_of_range(cat("ov_probe: position ", probe_pos));
    const auto& lw = m.layers[static_cast<std::size_t>(head.layer)];
    const auto& hw = lw.heads[static_cast<std::size_t>(head.head_index)];

    const Vec<S> x = tr.resid_at(head.layer).row(probe_pos).transpose();
    auto [normed, stats] =
        layer_norm<S>(x, lw.ln1.gamma, lw.ln1.beta, static_cast<S>(m.config.ln_eps));
    const Vec<S> write = (normed.transpose() * hw.wv * hw.wo).transpose();
    const Vec<S> logits = linearize_to_logits(m, tr, write, tr.seq_len() - 1);
    const Vec<S> probs = softmax<S>(logits);

    std::vector<std::pair<int, double>> out;
    for (int t = 0; t < m.config.vocab_size; ++t)
        if (static_cast<double>(probs[t]) > confidence_threshold)
            out.emplace_back(t, static_cast<double>(probs[t]));
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        return a.second > b.second;
    });
    return out;
}

// The three additivity conditions evaluated on mean-centered DLA vectors at
// END: (1) every listed component contributes positively to the correct
// token, (2) at least one pair of components has cosine similarity below the
// threshold (the outputs are not all the same distribution), (3) the correct
// token is the argmax of the summed attributions.
struct AdditivityReport {
    struct ComponentFinding {
        ComponentId component;
        bool positive_centered_dla_on_a = false;
        bool a_is_argmax = false;
        std::vector<std::pair<int, double>> fingerprint;  // top-5 tokens by value
    };
    std::vector<ComponentFinding> components;
    Matd pairwise_similarity;
    bool argmax_of_sum_is_a = false;
    std::vector<ComponentId> components_where_a_not_argmax;
    bool condition_positive = false;
    bool condition_diverse = false;
    bool condition_constructive = false;
    bool verdict = false;
};

namespace detail {

inline double cosine_similarity(const Vecd& a, const Vecd& b) {
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;  // zero vectors count as dissimilar
    return a.dot(b) / (na * nb);
}

// argmax with ties broken toward the lower token id
inline int argmax_token(const Vecd& v) {
    int best = 0;
    for (int i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

}  // namespace detail

template <class S>
AdditivityReport detect_additivity(const ModelBundle<S>& m, const Trace<S>& tr,
                                   const FactEntry& entry,
                                   const std::vector<ComponentId>& components,
                                   double similarity_threshold = 0.8) {
    if (components.size() < 2)
        throw std::invalid_argument("detect_additivity: need at least 2 components");
    const int end = entry.end_pos();
    const int a = entry.a_first_token;

    AdditivityReport rep;
    std::vector<Vecd> centered;
    centered.reserve(components.size());
    for (const auto& c : components) {
        const Vecd v =
            mean_center(dla(m, tr, c, end).values).template cast<double>();
        AdditivityReport::ComponentFinding f;
        f.component = c;
        f.positive_centered_dla_on_a = v[a] > 0.0;
        f.a_is_argmax = detail::argmax_token(v) == a;
        if (!f.a_is_argmax) rep.components_where_a_not_argmax.push_back(c);
        std::vector<int> order(static_cast<std::size_t>(v.size()));
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        std::stable_sort(order.begin(), order.end(),
                         [&](int x, int y) { return v[x] > v[y]; });
        for (int i = 0; i < std::min<int>(5, static_cast<int>(order.size())); ++i)
            f.fingerprint.emplace_back(order[static_cast<std::size_t>(i)],
                                       v[order[static_cast<std::size_t>(i)]]);
        rep.components.push_back(std::move(f));
        centered.push_back(v);
    }

    const int n = static_cast<int>(components.size());
    rep.pairwise_similarity = Matd::Zero(n, n);
    bool any_dissimilar = false;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double sim = detail::cosine_similarity(
                centered[static_cast<std::size_t>(i)],
                centered[static_cast<std::size_t>(j)]);
            rep.pairwise_similarity(i, j) = sim;
            if (i < j && sim < similarity_threshold) any_dissimilar = true;
        }
    }

    Vecd sum = Vecd::Zero(m.config.vocab_size);
    for (const auto& v : centered) sum += v;
    rep.argmax_of_sum_is_a = detail::argmax_token(sum) == a;

    rep.condition_positive = std::all_of(
        rep.components.begin(), rep.components.end(),
        [](const auto& f) { return f.positive_centered_dla_on_a; });
    rep.condition_diverse = any_dissimilar;
    rep.condition_constructive = rep.argmax_of_sum_is_a;
    rep.verdict = rep.condition_positive && rep.condition_diverse &&
                  rep.condition_constructive;
    return rep;
}

}  // namespace recall
