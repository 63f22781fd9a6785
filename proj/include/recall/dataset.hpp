#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "recall/model.hpp"
#include "recall/numerics.hpp"
#include "recall/types.hpp"

namespace recall {

// One factual tuple (s, r, a) with its tokenized prompt, token-group spans
// and counterfactual attribute sets. S∖{a} holds attributes valid for the
// subject under some other relation; R∖{a} attributes valid for the relation
// under some other subject; both are stored exclusive of a. Token ids are
// authoritative at runtime; the strings make the files auditable.
struct FactEntry {
    std::string subject;
    std::string relation_id;
    std::string relation_text;
    std::string attribute;
    std::string prompt;
    std::vector<int> prompt_tokens;
    TokenGroupSpans spans;
    std::vector<std::string> s_minus_a;
    std::vector<std::string> r_minus_a;

    // Resolved against the vocab at load time.
    int a_first_token = -1;
    std::vector<int> s_first_tokens;
    std::vector<int> r_first_tokens;

    int end_pos() const { return spans.end_pos; }
};

// First token of an attribute string. Tries the leading-space form first
// (vocabs that mark word starts with a space), then the bare string.
int attribute_first_token(const std::string& attribute, const Vocab& vocab);

// Validates spans, token ranges, set exclusivity and attribute tokens;
// resolves first-token ids. Errors carry the entry's subject/attribute.
FactEntry finalize_entry(FactEntry entry, const Vocab& vocab);

// JSON Lines, one FactEntry per line. See docs/dataset_format.md.
std::vector<FactEntry> load_dataset(const std::filesystem::path& path,
                                    const Vocab& vocab);
void save_dataset(const std::vector<FactEntry>& entries,
                  const std::filesystem::path& path);

struct RankFilterResult {
    std::vector<FactEntry> kept;
    std::vector<std::pair<FactEntry, int>> dropped;  // entry, rank
    std::map<int, int> rank_histogram;               // over all entries
};

// Keeps entries whose correct attribute ranks strictly below max_rank at END
// under the clean forward pass. max_rank = 0 keeps nothing.
template <class S>
RankFilterResult filter_by_rank(const ModelBundle<S>& model,
                                const std::vector<FactEntry>& entries,
                                int max_rank = 10) {
    RankFilterResult out;
    for (const auto& e : entries) {
        const Mat<S> logits = forward(model, e.prompt_tokens);
        const Vec<S> row = logits.row(e.end_pos()).transpose();
        const int rank = rank_of<S>(row, e.a_first_token);
        ++out.rank_histogram[rank];
        if (rank < max_rank) out.kept.push_back(e);
        else out.dropped.emplace_back(e, rank);
    }
    return out;
}

}  // namespace recall
