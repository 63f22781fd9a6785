#include "recall/dataset.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace recall {

using nlohmann::json;

int attribute_first_token(const std::string& attribute, const Vocab& vocab) {
    if (attribute.empty()) throw std::runtime_error("empty attribute string");
    for (const std::string& form : {" " + attribute, attribute}) {
        try {
            auto ids = tokenize(form, vocab);
            if (!ids.empty()) return ids.front();
        } catch (const std::runtime_error&) {
            // fall through to the next form
        }
    }
    throw std::runtime_error(
        cat("attribute '", attribute, "' has no first token in the vocab"));
}

FactEntry finalize_entry(FactEntry entry, const Vocab& vocab) {
    auto fail = [&](const std::string& why) {
        throw std::runtime_error(
            cat("entry (", entry.subject, ", ", entry.relation_id, ", ",
                entry.attribute, "): ", why));
    };
    const int T = static_cast<int>(entry.prompt_tokens.size());
    if (T == 0) fail("empty prompt");
    for (int id : entry.prompt_tokens)
        if (id < 0 || id >= vocab.size()) fail(cat("prompt token ", id, " out of range"));
    try {
        entry.spans.validate(T);
    } catch (const std::exception& e) {
        fail(e.what());
    }
    for (const auto& s : entry.s_minus_a)
        if (s == entry.attribute) fail("attribute appears in S∖{a}");
    for (const auto& r : entry.r_minus_a)
        if (r == entry.attribute) fail("attribute appears in R∖{a}");

    try {
        entry.a_first_token = attribute_first_token(entry.attribute, vocab);
        entry.s_first_tokens.clear();
        entry.r_first_tokens.clear();
        for (const auto& s : entry.s_minus_a)
            entry.s_first_tokens.push_back(attribute_first_token(s, vocab));
        for (const auto& r : entry.r_minus_a)
            entry.r_first_tokens.push_back(attribute_first_token(r, vocab));
    } catch (const std::exception& e) {
        fail(e.what());
    }
    return entry;
}

namespace {

json range_to_json(const PosRange& r) { return json::array({r.begin, r.end}); }

PosRange range_from_json(const json& j) {
    if (!j.is_array() || j.size() != 2)
        throw std::runtime_error("span range must be [begin, end)");
    return {j[0].get<int>(), j[1].get<int>()};
}

}  // namespace

std::vector<FactEntry> load_dataset(const std::filesystem::path& path,
                                    const Vocab& vocab) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error(cat("cannot open dataset ", path.string()));
    std::vector<FactEntry> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error(
                cat("dataset line ", line_no, ": malformed JSON: ", e.what()));
        }
        FactEntry e;
        try {
            e.subject = j.at("subject").get<std::string>();
            e.relation_id = j.at("relation_id").get<std::string>();
            e.relation_text = j.value("relation_text", "");
            e.attribute = j.at("attribute").get<std::string>();
            e.prompt = j.value("prompt", "");
            e.prompt_tokens = j.at("prompt_tokens").get<std::vector<int>>();
            const json& spans = j.at("spans");
            e.spans.prefix = range_from_json(spans.at("prefix"));
            e.spans.subject = range_from_json(spans.at("subject"));
            e.spans.relation = range_from_json(spans.at("relation"));
            e.spans.end_pos = spans.at("end").get<int>();
            e.s_minus_a = j.value("s_minus_a", std::vector<std::string>{});
            e.r_minus_a = j.value("r_minus_a", std::vector<std::string>{});
        } catch (const json::exception& ex) {
            throw std::runtime_error(
                cat("dataset line ", line_no, ": ", ex.what()));
        }
        try {
            out.push_back(finalize_entry(std::move(e), vocab));
        } catch (const std::exception& ex) {
            throw std::runtime_error(cat("dataset line ", line_no, ": ", ex.what()));
        }
    }
    log::info(cat("loaded dataset: ", out.size(), " entries from ",
                  path.filename().string()));
    return out;
}

void save_dataset(const std::vector<FactEntry>& entries,
                  const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error(cat("cannot write dataset ", path.string()));
    for (const auto& e : entries) {
        json j = {{"subject", e.subject},
                  {"relation_id", e.relation_id},
                  {"relation_text", e.relation_text},
                  {"attribute", e.attribute},
                  {"prompt", e.prompt},
                  {"prompt_tokens", e.prompt_tokens},
                  {"spans",
                   {{"prefix", range_to_json(e.spans.prefix)},
                    {"subject", range_to_json(e.spans.subject)},
                    {"relation", range_to_json(e.spans.relation)},
                    {"end", e.spans.end_pos}}},
                  {"s_minus_a", e.s_minus_a},
                  {"r_minus_a", e.r_minus_a}};
        f << j.dump() << "\n";
    }
}

}  // namespace recall
