#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "recall/attribution.hpp"

namespace recall::fixtures {

// Hand-constructed models with analytically known behavior. Planted
// directions are orthonormal zero-mean coordinate pairs (so every LayerNorm
// reduces to a pure rescale), attention targets are saturated via large
// pre-softmax score margins, and all LN gains are one. Expected attribution
// values are closed forms in the planted weights, evaluated with the trace's
// recorded attention probabilities and final-LN scale; the only neglected
// terms are attention leakage of order e^-25.
enum class FixtureName {
    kSubjectHead,   // one head reading the answer off the subject token
    kRelationHead,  // one head writing every relation attribute uniformly
    kPropagation,   // layer-0 head copies subject facts onto the relation
                    // position; a layer-1 head reads them from there
    kComposite,     // subject + relation + mixed heads + an MLP, tuned so no
                    // single mechanism puts the answer on top but the sum does
    kDiv6,          // two-class divisible-by-6 toy: +1 "true" per circuit
                    // (mod 2 and mod 3), +1.5 "false" from the unembed bias
};

std::string_view to_string(FixtureName name);
FixtureName fixture_name_from_string(std::string_view s);
std::vector<FixtureName> all_fixture_names();

// One closed-form assertion: the DLA of `component` on `token` at END
// (restricted to one source group when `source_group` is set).
struct ExpectedDla {
    ComponentId component;
    std::optional<Group> source_group;
    int token = -1;
    double value = 0;
};

struct EntryExpectations {
    std::vector<ExpectedDla> dla;
    std::optional<double> logit_diff_true_false;  // div6 only
};

struct FixtureSpec {
    FixtureName name = FixtureName::kSubjectHead;
    std::uint64_t seed = 0;
    ModelConfig dims;
    std::map<int, int> planted_facts;  // subject token -> attribute token
    std::vector<int> planted_r;        // attribute tokens written for the relation
};

struct Fixture {
    FixtureSpec spec;
    ModelBundle<double> model;
    Vocab vocab;
    std::vector<FactEntry> entries;
    std::vector<EntryExpectations> expected;   // parallel to entries
    std::map<std::string, ComponentId> roles;  // "subject_head", "mixed_head", ...
};

// Deterministic per (name, seed); the seed permutes which coordinate pairs
// host which planted direction, leaving all analytic values unchanged.
// A dims override below the documented minimum fails with "dims too small".
Fixture build_fixture(FixtureName name, std::uint64_t seed,
                      const ModelConfig* dims_override = nullptr);

// Writes config.json, weights.json/.bin, vocab.txt, dataset.jsonl and
// expected.json so fixtures double as integration-test assets.
void emit(const Fixture& fixture, const std::filesystem::path& dir);

}  // namespace recall::fixtures
