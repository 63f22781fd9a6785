#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <vector>

#include "recall/dataset.hpp"
#include "recall/trace.hpp"

namespace recall {

// Direct contribution of one component to the output logits at one
// destination position, through the frozen final LayerNorm.
template <class S>
struct DlaVector {
    ComponentId component;
    int dest_pos = 0;
    Vec<S> values;  // length V
    std::optional<Group> source_group;
};

// Frozen-LN linearization: the component vector is centered (the LN mean
// subtraction applied per component) and scaled by the trace's recorded
// inv_std, then multiplied by gamma and the unembedding. This map is linear,
// which is what makes summing component attributions reproduce the logits
// exactly: the full final LN distributes over the residual-stream sum, with
// final-LN beta and the unembedding bias landing in the bias
// pseudo-component.
template <class S>
Vec<S> linearize_to_logits(const ModelBundle<S>& m, const Trace<S>& tr,
                           const Vec<S>& component_vec, int dest_pos) {
    if (dest_pos < 0 || dest_pos >= tr.seq_len())
        throw std::out_of_range(cat("dla: dest position ", dest_pos));
    if (component_vec.size() != m.config.d_model)
        throw std::invalid_argument("dla: component vector has wrong width");
    const S inv_std = tr.final_ln_inv_std[dest_pos];
    const Vec<S> scaled = ((component_vec.array() - component_vec.mean()) * inv_std *
                           m.final_ln.gamma.array())
                              .matrix();
    return (scaled.transpose() * m.unembed).transpose();
}

// Residual checkpoint unembedded with the final LayerNorm parameters: what
// the model would predict if computation stopped after `layer`. At layer L
// this is the forward pass's own final step.
template <class S>
Vec<S> logit_lens(const ModelBundle<S>& m, const Trace<S>& tr, int layer, int pos) {
    if (pos < 0 || pos >= tr.seq_len())
        throw std::out_of_range(cat("logit_lens: position ", pos));
    const Vec<S> x = tr.resid_at(layer).row(pos).transpose();
    auto [y, stats] = layer_norm<S>(x, m.final_ln.gamma, m.final_ln.beta,
                                    static_cast<S>(m.config.ln_eps));
    // Same row-vector product as the forward pass's final step, bit for bit.
    Vec<S> out = (y.transpose() * m.unembed).transpose();
    if (m.unembed_bias) out += *m.unembed_bias;
    return out;
}

// The component's output vector at dest_pos as recorded in the trace. The
// bias pseudo-component collects every layer's attention output bias; heads
// carry none of it, so per-source head attributions stay free of constants.
template <class S>
Vec<S> component_vector(const Trace<S>& tr, ComponentId c, int dest_pos) {
    switch (c.kind) {
        case ComponentId::Kind::kHead:
            return tr.head_out(c.layer, c.head_index).row(dest_pos).transpose();
        case ComponentId::Kind::kMlp:
            return tr.mlp_out(c.layer).row(dest_pos).transpose();
        case ComponentId::Kind::kEmbed:
            return tr.resid_at(0).row(dest_pos).transpose();
        case ComponentId::Kind::kBias: {
            Vec<S> sum = Vec<S>::Zero(tr.config.d_model);
            for (const auto& b : tr.attn_bias)
                if (b.has_value()) sum += *b;
            return sum;
        }
    }
    throw std::invalid_argument("invalid component");
}

template <class S>
DlaVector<S> dla(const ModelBundle<S>& m, const Trace<S>& tr, ComponentId c,
                 int dest_pos) {
    DlaVector<S> out;
    out.component = c;
    out.dest_pos = dest_pos;
    out.values = linearize_to_logits(m, tr, component_vector(tr, c, dest_pos),
                                     dest_pos);
    if (c.kind == ComponentId::Kind::kBias) {
        out.values += (m.final_ln.beta.transpose() * m.unembed).transpose();
        if (m.unembed_bias) out.values += *m.unembed_bias;
    }
    return out;
}

// Every component of the decomposition, in a fixed order: embed, heads by
// (layer, head), MLPs by layer, bias.
inline std::vector<ComponentId> all_components(const ModelConfig& cfg) {
    std::vector<ComponentId> out;
    out.push_back(ComponentId::embed());
    for (int l = 0; l < cfg.n_layers; ++l)
        for (int h = 0; h < cfg.n_heads; ++h) out.push_back(ComponentId::head(l, h));
    for (int l = 0; l < cfg.n_layers; ++l) out.push_back(ComponentId::mlp(l));
    out.push_back(ComponentId::bias());
    return out;
}

// Σ over all components of their DLA - equals the logits row at dest_pos up
// to float error (the completeness identity).
template <class S>
Vec<S> dla_sum_all(const ModelBundle<S>& m, const Trace<S>& tr, int dest_pos) {
    Vec<S> sum = Vec<S>::Zero(m.config.vocab_size);
    for (const auto& c : all_components(m.config))
        sum += dla(m, tr, c, dest_pos).values;
    return sum;
}

// Splits a head's DLA into the contributions of each source-token group,
// exploiting that the head output is a sum over source positions. Values
// over all groups add up to the head's DLA exactly (same linear map).
template <class S>
std::map<Group, DlaVector<S>> dla_by_source_group(const ModelBundle<S>& m,
                                                  const Trace<S>& tr,
                                                  ComponentId head, int dest_pos,
                                                  const TokenGroupSpans& spans) {
    if (head.kind != ComponentId::Kind::kHead)
        throw std::invalid_argument("dla_by_source_group: component must be a head");
    spans.validate(tr.seq_len());
    const Mat<S>& srcs = tr.head_sources(head.layer, head.head_index, dest_pos);
    std::map<Group, DlaVector<S>> out;
    for (Group g : kAllGroups) {
        Vec<S> group_vec = Vec<S>::Zero(m.config.d_model);
        for (int p : spans.positions(g)) group_vec += srcs.row(p).transpose();
        DlaVector<S> d;
        d.component = head;
        d.dest_pos = dest_pos;
        d.source_group = g;
        d.values = linearize_to_logits(m, tr, group_vec, dest_pos);
        out.emplace(g, std::move(d));
    }
    return out;
}

template <class S>
Vec<S> mean_center(const Vec<S>& v) {
    return (v.array() - v.mean()).matrix();
}

template <class S>
DlaVector<S> mean_center(DlaVector<S> v) {
    v.values = mean_center(v.values);
    return v;
}

// DLA of all MLP layers summed, at one position.
template <class S>
DlaVector<S> mlp_total_dla(const ModelBundle<S>& m, const Trace<S>& tr,
                           int dest_pos) {
    DlaVector<S> out;
    out.component = ComponentId::mlp(-1);
    out.dest_pos = dest_pos;
    out.values = Vec<S>::Zero(m.config.vocab_size);
    for (int l = 0; l < m.config.n_layers; ++l)
        out.values += dla(m, tr, ComponentId::mlp(l), dest_pos).values;
    return out;
}

// Signed mean of the top-k values selected by largest magnitude.
template <class S>
std::optional<double> mean_of_top_abs(const Vec<S>& dla_values,
                                      const std::vector<int>& tokens, int k) {
    if (tokens.empty()) return std::nullopt;
    std::vector<double> vals;
    vals.reserve(tokens.size());
    for (int t : tokens) vals.push_back(static_cast<double>(dla_values[t]));
    std::sort(vals.begin(), vals.end(),
              [](double a, double b) { return std::abs(a) > std::abs(b); });
    const int n = std::min<int>(k, static_cast<int>(vals.size()));
    double sum = 0;
    for (int i = 0; i < n; ++i) sum += vals[i];
    return sum / n;
}

// A component's attribution statistics for one prompt, evaluated on the
// first tokens of a, R∖{a} and S∖{a}. Set means are reported as absent (not
// zero) when the corresponding set is empty. mean_top5_r_minus_a averages
// the five largest-magnitude R attributions; mean_s_minus_a is the plain
// mean over S∖{a}.
struct AttributeStats {
    double dla_a = 0;
    double dla_a_centered = 0;
    std::optional<double> mean_top5_r_minus_a;
    std::optional<double> mean_s_minus_a;
    std::map<Group, double> per_group_dla_a;  // present when split by source
    double attn_subject = 0;   // attention mass END -> SUBJECT (heads only)
    double attn_relation = 0;  // attention mass END -> RELATION (heads only)
};

template <class S>
AttributeStats attribute_stats(const ModelBundle<S>& m, const Trace<S>& tr,
                               const FactEntry& entry, ComponentId component,
                               bool split_by_source) {
    if (entry.a_first_token < 0 || entry.a_first_token >= m.config.vocab_size)
        throw std::invalid_argument("attribute token missing from vocab");
    const int end = entry.end_pos();
    const DlaVector<S> d = dla(m, tr, component, end);

    AttributeStats out;
    out.dla_a = static_cast<double>(d.values[entry.a_first_token]);
    out.dla_a_centered =
        static_cast<double>(mean_center(d.values)[entry.a_first_token]);
    out.mean_top5_r_minus_a = mean_of_top_abs(d.values, entry.r_first_tokens, 5);
    if (!entry.s_first_tokens.empty()) {
        double sum = 0;
        for (int t : entry.s_first_tokens) sum += static_cast<double>(d.values[t]);
        out.mean_s_minus_a = sum / static_cast<double>(entry.s_first_tokens.size());
    }

    if (component.kind == ComponentId::Kind::kHead) {
        const Mat<S>& probs = tr.attn_prob(component.layer, component.head_index);
        for (int p : entry.spans.positions(Group::kSubject))
            out.attn_subject += static_cast<double>(probs(end, p));
        for (int p : entry.spans.positions(Group::kRelation))
            out.attn_relation += static_cast<double>(probs(end, p));
        if (split_by_source) {
            auto groups = dla_by_source_group(m, tr, component, end, entry.spans);
            for (const auto& [g, gd] : groups)
                out.per_group_dla_a[g] =
                    static_cast<double>(gd.values[entry.a_first_token]);
        }
    }
    return out;
}

}  // namespace recall
