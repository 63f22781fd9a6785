#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <vector>

#include "recall/attribution.hpp"

namespace recall {

// A bundle of causal-experiment directives. The in-pass hooks run inside the
// traced forward pass; direct-path removals apply afterwards to the logits
// (the component keeps its indirect influence).
template <class S>
struct InterventionSet {
    HookSet<S> in_pass;
    std::vector<ComponentId> direct_path_remove;
};

template <class S>
struct InterventionResult {
    Trace<S> trace;   // post-hook trace; logits here are pre-removal
    Mat<S> logits;    // after direct-path removal at END
};

enum class KnockoutMode {
    kRenormalize,   // score -inf before softmax: remaining mass renormalizes
    kZeroNoRenorm,  // zero cells after softmax: rows may sum below 1
};

// Runs the whole intervention set: in-pass hooks during the traced pass,
// then the direct-path removals against the resulting logits.
template <class S>
InterventionResult<S> run_interventions(const ModelBundle<S>& m,
                                        std::span<const int> tokens,
                                        const InterventionSet<S>& set);

// Zero-ablates attention from dest positions to src positions in every head,
// over all layers unless a range is given. Throws if any destination row
// would be left without an unmasked source.
template <class S>
Trace<S> attention_knockout_positions(
    const ModelBundle<S>& m, std::span<const int> tokens,
    std::vector<int> dest_positions, std::vector<int> src_positions,
    std::optional<std::pair<int, int>> layer_range = std::nullopt,
    KnockoutMode mode = KnockoutMode::kRenormalize) {
    HookSet<S> hooks;
    if (!dest_positions.empty() && !src_positions.empty()) {
        typename HookSet<S>::AttnBlock block;
        block.dest_positions = std::move(dest_positions);
        block.src_positions = std::move(src_positions);
        block.layer_range = layer_range;
        block.renormalize = mode == KnockoutMode::kRenormalize;
        hooks.attn_blocks.push_back(std::move(block));
    }
    return traced_forward(m, tokens, &hooks);
}

template <class S>
Trace<S> attention_knockout(const ModelBundle<S>& m, std::span<const int> tokens,
                            const TokenGroupSpans& spans, Group dest_group,
                            Group src_group,
                            std::optional<std::pair<int, int>> layer_range = std::nullopt,
                            KnockoutMode mode = KnockoutMode::kRenormalize) {
    spans.validate(static_cast<int>(tokens.size()));
    return attention_knockout_positions(m, tokens, spans.positions(dest_group),
                                        spans.positions(src_group), layer_range,
                                        mode);
}

// Runs the source prompt, caches the listed component outputs at the given
// destination positions (all positions when none are given), then reruns the
// target prompt with those outputs substituted in-pass so downstream effects
// propagate. Prompts must have the same length, and the same span layout
// when spans are supplied.
template <class S>
Trace<S> activation_patch(const ModelBundle<S>& m,
                          std::span<const int> tokens_target,
                          std::span<const int> tokens_source,
                          const std::vector<ComponentId>& components,
                          std::optional<std::vector<int>> dest_positions = std::nullopt,
                          const TokenGroupSpans* spans_target = nullptr,
                          const TokenGroupSpans* spans_source = nullptr) {
    if (tokens_target.size() != tokens_source.size())
        throw std::invalid_argument("activation_patch: prompt lengths differ");
    if ((spans_target == nullptr) != (spans_source == nullptr))
        throw std::invalid_argument("activation_patch: supply both span layouts");
    if (spans_target != nullptr && !(*spans_target == *spans_source))
        throw std::invalid_argument("activation_patch: span layouts differ");
    const int T = static_cast<int>(tokens_target.size());

    std::vector<int> positions;
    if (dest_positions.has_value()) {
        positions = *dest_positions;
        for (int p : positions)
            if (p < 0 || p >= T)
                throw std::out_of_range(cat("activation_patch: position ", p));
    } else {
        positions.resize(static_cast<std::size_t>(T));
        for (int p = 0; p < T; ++p) positions[static_cast<std::size_t>(p)] = p;
    }

    const Trace<S> source = traced_forward(m, tokens_source);
    HookSet<S> hooks;
    for (const auto& c : components) {
        if (c.kind == ComponentId::Kind::kBias)
            throw std::invalid_argument("activation_patch: bias cannot be patched");
        for (int p : positions) {
            typename HookSet<S>::PatchRow row;
            row.component = c;
            row.position = p;
            row.value = component_vector(source, c, p);
            hooks.patches.push_back(std::move(row));
        }
    }
    return traced_forward(m, tokens_target, &hooks);
}

// Removes the listed components' direct contributions from the logits at the
// given positions (END only by default), leaving indirect paths intact.
// Subtractions run in list order, so composing two calls equals one call
// with the concatenated list, bit for bit.
template <class S>
Mat<S> direct_path_ablation(const ModelBundle<S>& m, const Trace<S>& tr,
                            const std::vector<ComponentId>& components,
                            std::optional<std::vector<int>> positions = std::nullopt) {
    std::set<ComponentId> seen;
    for (const auto& c : components)
        if (!seen.insert(c).second)
            throw std::invalid_argument(
                cat("duplicate component ", c.to_string(), " in ablation list"));
    std::vector<int> pos =
        positions.has_value() ? *positions : std::vector<int>{tr.seq_len() - 1};
    Mat<S> logits = tr.logits;
    for (int p : pos) {
        if (p < 0 || p >= tr.seq_len())
            throw std::out_of_range(cat("direct_path_ablation: position ", p));
        for (const auto& c : components)
            logits.row(p) -= dla(m, tr, c, p).values.transpose();
    }
    return logits;
}

template <class S>
InterventionResult<S> run_interventions(const ModelBundle<S>& m,
                                        std::span<const int> tokens,
                                        const InterventionSet<S>& set) {
    InterventionResult<S> out;
    out.trace = traced_forward(m, tokens, &set.in_pass);
    out.logits = set.direct_path_remove.empty()
                     ? out.trace.logits
                     : direct_path_ablation(m, out.trace, set.direct_path_remove);
    return out;
}

// Loss/rank/log-probability of the correct attribute at END, plus an
// optional logit difference between two designated tokens and the percent
// change in loss against a baseline report.
struct MetricReport {
    double loss = 0;     // cross-entropy of a's first token
    double logprob = 0;  // log p(a)
    int rank = 0;
    std::optional<double> logit_diff;
    std::optional<double> loss_percent_change;
};

template <class S>
MetricReport eval_metrics(const Vec<S>& logits_at_end, int a_token,
                          std::optional<std::pair<int, int>> diff_pair = std::nullopt,
                          const MetricReport* baseline = nullptr) {
    if (a_token < 0 || a_token >= logits_at_end.size())
        throw std::out_of_range("eval_metrics: attribute token outside vocab");
    const double mx = static_cast<double>(logits_at_end.maxCoeff());
    double lse = 0;
    for (Eigen::Index i = 0; i < logits_at_end.size(); ++i)
        lse += std::exp(static_cast<double>(logits_at_end[i]) - mx);
    lse = mx + std::log(lse);

    MetricReport r;
    r.logprob = static_cast<double>(logits_at_end[a_token]) - lse;
    r.loss = -r.logprob;
    r.rank = rank_of<S>(logits_at_end, a_token);
    if (diff_pair)
        r.logit_diff = static_cast<double>(logits_at_end[diff_pair->first]) -
                       static_cast<double>(logits_at_end[diff_pair->second]);
    if (baseline != nullptr && baseline->loss != 0.0)
        r.loss_percent_change = 100.0 * (r.loss - baseline->loss) / baseline->loss;
    return r;
}

template <class S>
MetricReport eval_metrics(const Trace<S>& tr, const FactEntry& entry,
                          std::optional<std::pair<int, int>> diff_pair = std::nullopt,
                          const MetricReport* baseline = nullptr) {
    const Vec<S> row = tr.logits.row(entry.end_pos()).transpose();
    return eval_metrics<S>(row, entry.a_first_token, diff_pair, baseline);
}

template <class S>
MetricReport eval_metrics(const Mat<S>& logits, const FactEntry& entry,
                          std::optional<std::pair<int, int>> diff_pair = std::nullopt,
                          const MetricReport* baseline = nullptr) {
    const Vec<S> row = logits.row(entry.end_pos()).transpose();
    return eval_metrics<S>(row, entry.a_first_token, diff_pair, baseline);
}

// Per-head mean output vectors at END over a dataset, for mean ablation.
// Indexed layer-major like the trace. Cache with save/load below.
template <class S>
std::vector<Vec<S>> head_means_at_end(const ModelBundle<S>& m,
                                      const std::vector<FactEntry>& entries) {
    if (entries.empty())
        throw std::invalid_argument("head_means_at_end: empty dataset");
    const std::size_t n = static_cast<std::size_t>(m.config.n_layers) *
                          static_cast<std::size_t>(m.config.n_heads);
    std::vector<Vec<S>> means(n, Vec<S>::Zero(m.config.d_model));
    for (const auto& e : entries) {
        const Trace<S> tr = traced_forward(m, e.prompt_tokens, nullptr,
                                           TraceDepth::kLeanEnd);
        for (int l = 0; l < m.config.n_layers; ++l)
            for (int h = 0; h < m.config.n_heads; ++h)
                means[tr.index(l, h)] +=
                    tr.head_out(l, h).row(e.end_pos()).transpose();
    }
    for (auto& v : means) v /= static_cast<S>(entries.size());
    return means;
}

void save_head_means(const std::vector<Vecd>& means, const ModelConfig& cfg,
                     const std::filesystem::path& manifest_path,
                     const std::filesystem::path& bin_path);
std::vector<Vecd> load_head_means(const ModelConfig& cfg,
                                  const std::filesystem::path& manifest_path,
                                  const std::filesystem::path& bin_path);

}  // namespace recall
