#pragma once

#include <compare>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "recall/common.hpp"

namespace recall {

// The four token-position groups a prompt is partitioned into.
enum class Group { kPrefix, kSubject, kRelation, kEnd };

inline std::string_view to_string(Group g) {
    switch (g) {
        case Group::kPrefix: return "prefix";
        case Group::kSubject: return "subject";
        case Group::kRelation: return "relation";
        case Group::kEnd: return "end";
    }
    return "?";
}

inline Group group_from_string(std::string_view s) {
    if (s == "prefix") return Group::kPrefix;
    if (s == "subject") return Group::kSubject;
    if (s == "relation") return Group::kRelation;
    if (s == "end") return Group::kEnd;
    throw std::invalid_argument(cat("unknown token group '", s, "'"));
}

inline constexpr Group kAllGroups[] = {Group::kPrefix, Group::kSubject,
                                       Group::kRelation, Group::kEnd};

// Half-open position range [begin, end). May be empty (begin == end).
struct PosRange {
    int begin = 0;
    int end = 0;

    int size() const { return end - begin; }
    bool empty() const { return begin >= end; }
    bool contains(int p) const { return p >= begin && p < end; }
};

// Partition of prompt positions into PREFIX / SUBJECT / RELATION / END.
// The three ranges are contiguous and ordered; END is always the single
// final position. PREFIX, SUBJECT and RELATION may be empty (a length-1
// prompt is END alone).
struct TokenGroupSpans {
    PosRange prefix;
    PosRange subject;
    PosRange relation;
    int end_pos = 0;

    int seq_len() const { return end_pos + 1; }

    // Throws if the spans do not form an ordered partition of 0..T-1.
    void validate(int seq_len) const {
        auto fail = [&](const std::string& why) {
            throw std::invalid_argument(cat("invalid token spans: ", why));
        };
        if (seq_len < 1) fail("sequence empty");
        if (prefix.begin != 0) fail("prefix must start at position 0");
        if (prefix.begin > prefix.end) fail("prefix range reversed");
        if (subject.begin != prefix.end) fail("subject must follow prefix");
        if (subject.begin > subject.end) fail("subject range reversed");
        if (relation.begin != subject.end) fail("relation must follow subject");
        if (relation.begin > relation.end) fail("relation range reversed");
        if (end_pos != relation.end) fail("end must follow relation");
        if (end_pos != seq_len - 1) fail("end must be the final position");
    }

    std::vector<int> positions(Group g) const {
        std::vector<int> out;
        const PosRange* r = nullptr;
        switch (g) {
            case Group::kPrefix: r = &prefix; break;
            case Group::kSubject: r = &subject; break;
            case Group::kRelation: r = &relation; break;
            case Group::kEnd: out.push_back(end_pos); return out;
        }
        for (int p = r->begin; p < r->end; ++p) out.push_back(p);
        return out;
    }

    Group group_of(int pos) const {
        if (prefix.contains(pos)) return Group::kPrefix;
        if (subject.contains(pos)) return Group::kSubject;
        if (relation.contains(pos)) return Group::kRelation;
        if (pos == end_pos) return Group::kEnd;
        throw std::out_of_range(cat("position ", pos, " outside spans"));
    }

    // Spans for a single-position prompt: everything empty except END.
    static TokenGroupSpans end_only() {
        TokenGroupSpans s;
        s.prefix = {0, 0};
        s.subject = {0, 0};
        s.relation = {0, 0};
        s.end_pos = 0;
        return s;
    }

    bool operator==(const TokenGroupSpans& o) const {
        return prefix.begin == o.prefix.begin && prefix.end == o.prefix.end &&
               subject.begin == o.subject.begin && subject.end == o.subject.end &&
               relation.begin == o.relation.begin && relation.end == o.relation.end &&
               end_pos == o.end_pos;
    }
};

// Identifies one additive contributor to the residual stream: a single
// attention head, one MLP layer, the token+position embedding, or the
// pooled bias pseudo-component (attention output biases, final LN beta,
// unembedding bias).
struct ComponentId {
    enum class Kind { kHead, kMlp, kEmbed, kBias };

    Kind kind = Kind::kEmbed;
    int layer = -1;
    int head_index = -1;

    static ComponentId head(int layer, int head) {
        return ComponentId{Kind::kHead, layer, head};
    }
    static ComponentId mlp(int layer) { return ComponentId{Kind::kMlp, layer, -1}; }
    static ComponentId embed() { return ComponentId{Kind::kEmbed, -1, -1}; }
    static ComponentId bias() { return ComponentId{Kind::kBias, -1, -1}; }

    friend auto operator<=>(const ComponentId&, const ComponentId&) = default;

    std::string to_string() const {
        switch (kind) {
            case Kind::kHead: return cat("L", layer, "H", head_index);
            case Kind::kMlp: return cat("mlp", layer);
            case Kind::kEmbed: return "embed";
            case Kind::kBias: return "bias";
        }
        return "?";
    }

    // Accepts the formats produced by to_string: "L2H7", "mlp3", "embed", "bias".
    static ComponentId parse(std::string_view s);
};

inline ComponentId ComponentId::parse(std::string_view s) {
    auto fail = [&] {
        throw std::invalid_argument(cat("cannot parse component '", s, "'"));
    };
    if (s == "embed") return embed();
    if (s == "bias") return bias();
    if (s.starts_with("mlp")) {
        try {
            return mlp(std::stoi(std::string(s.substr(3))));
        } catch (const std::exception&) {
            fail();
        }
    }
    if (s.starts_with("L")) {
        auto h = s.find('H');
        if (h == std::string_view::npos) fail();
        try {
            int layer = std::stoi(std::string(s.substr(1, h - 1)));
            int idx = std::stoi(std::string(s.substr(h + 1)));
            return head(layer, idx);
        } catch (const std::exception&) {
            fail();
        }
    }
    fail();
    return embed();  // unreachable
}

}  // namespace recall
