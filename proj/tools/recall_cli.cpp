// Command-line front end: batch analyses over a model + dataset, each
// subcommand writing CSV/JSON reports plus a run manifest into --out.

#include <CLI11.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <json.hpp>

#include "recall/fixtures.hpp"
#include "recall/interventions.hpp"
#include "recall/reports.hpp"
#include "recall/taxonomy.hpp"

using namespace recall;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
    std::string config_path;
    std::string weights_path;
    std::string vocab_path;
    std::string dataset_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    int jobs = 1;
    std::string relation;  // filter
    bool float32 = false;
    std::string ln_style;  // residual-style override
    int top_k = 10;
    double threshold = -1;  // command-specific default when negative
    bool by_source = false;
    bool lean = false;
    int index = 0;
    int max_rank = 10;
    std::string components = "all";
    std::string dest_group = "relation";
    std::string src_group = "subject";
    std::string report_group = "relation";
    int layer_from = -1;
    int layer_to = -1;
    bool no_renorm = false;
    int probe_layer = 0;
    int probe_head = 0;
    // fixtures emit
    std::string fixture_name = "subject_head";
};

void add_model_flags(CLI::App* cmd, Options& o) {
    cmd->add_option("--model", o.config_path, "model config JSON")->required();
    cmd->add_option("--weights", o.weights_path, "weights manifest JSON")
        ->required();
    cmd->add_option("--vocab", o.vocab_path, "vocab text file")->required();
}

void add_dataset_flags(CLI::App* cmd, Options& o) {
    cmd->add_option("--dataset", o.dataset_path, "dataset JSON Lines")->required();
    cmd->add_option("--relation", o.relation, "keep only this relation id");
}

void add_common_flags(CLI::App* cmd, Options& o) {
    cmd->add_option("--out", o.out_dir, "output directory")->required();
    cmd->add_option("--seed", o.seed, "seed recorded in the manifest");
    cmd->add_option("--jobs", o.jobs, "worker threads across prompts")
        ->check(CLI::Range(1, 256));
    cmd->add_flag("--float32", o.float32,
                  "run the pipeline in single precision (loosened tolerances)");
    cmd->add_option("--ln-style", o.ln_style,
                    "override residual style: parallel|sequential");
}

template <class Fn>
void parallel_over(std::size_t n, int jobs, Fn&& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    const int count = std::min<int>(jobs, static_cast<int>(n));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
    for (int w = 0; w < count; ++w)
        workers.emplace_back([&, w] {
            try {
                for (std::size_t i = next.fetch_add(1); i < n;
                     i = next.fetch_add(1))
                    fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    for (auto& t : workers) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::vector<ComponentId> parse_components(const std::string& spec,
                                          const ModelConfig& cfg) {
    if (spec == "all") return all_components(cfg);
    std::vector<ComponentId> out;
    std::size_t pos = 0;
    while (pos <= spec.size()) {
        const std::size_t comma = spec.find(',', pos);
        const std::string item =
            spec.substr(pos, comma == std::string::npos ? comma : comma - pos);
        if (!item.empty()) out.push_back(ComponentId::parse(item));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (out.empty()) throw std::invalid_argument("empty component list");
    return out;
}

RunManifest make_manifest(const std::string& command, const Options& o) {
    RunManifest m;
    m.command = command;
    m.seed = o.seed;
    m.params = {{"model", o.config_path},   {"weights", o.weights_path},
                {"vocab", o.vocab_path},    {"dataset", o.dataset_path},
                {"out", o.out_dir},         {"relation", o.relation},
                {"jobs", cat(o.jobs)},      {"float32", o.float32 ? "1" : "0"},
                {"ln_style", o.ln_style},   {"components", o.components},
                {"top_k", cat(o.top_k)},    {"threshold", format_real(o.threshold)},
                {"by_source", o.by_source ? "1" : "0"}};
    return m;
}

std::string opt_field(const std::optional<double>& v) {
    return v.has_value() ? format_real(*v) : "";
}

// Shared per-command state, instantiated in double or float.
template <class S>
struct Session {
    ModelBundle<S> model;
    Vocab vocab;
    std::vector<FactEntry> entries;

    static Session load(const Options& o, bool with_dataset) {
        Session s;
        LoadedModel<S> lm =
            load_model<S>(o.config_path, o.weights_path, o.vocab_path);
        s.model = std::move(lm.model);
        s.vocab = std::move(lm.vocab);
        if (!o.ln_style.empty())
            s.model.config.residual_style = residual_style_from_string(o.ln_style);
        if (with_dataset) {
            s.entries = load_dataset(o.dataset_path, s.vocab);
            if (!o.relation.empty()) {
                std::erase_if(s.entries, [&](const FactEntry& e) {
                    return e.relation_id != o.relation;
                });
            }
            if (s.entries.empty())
                throw std::runtime_error("dataset selection is empty");
        }
        return s;
    }
};

template <class S>
int cmd_trace(const Options& o) {
    auto s = Session<double>::load(o, true);  // trace dumps are always float64
    if (o.index < 0 || o.index >= static_cast<int>(s.entries.size()))
        throw std::out_of_range(cat("entry index ", o.index, " outside dataset"));
    const auto& e = s.entries[static_cast<std::size_t>(o.index)];
    const Trace<double> tr =
        traced_forward(s.model, e.prompt_tokens, nullptr,
                       o.lean ? TraceDepth::kLeanEnd : TraceDepth::kFull);
    dump_trace(tr, o.out_dir);
    write_run_manifest(make_manifest("trace", o),
                       fs::path(o.out_dir) / "manifest.json");
    return 0;
}

template <class S>
int cmd_lens(const Options& o) {
    auto s = Session<S>::load(o, true);
    fs::create_directories(o.out_dir);
    struct Row {
        int layer;
        double logit_a;
        int rank_a;
        int top_token;
        double top_logit;
    };
    std::vector<std::vector<Row>> rows(s.entries.size());
    parallel_over(s.entries.size(), o.jobs, [&](std::size_t i) {
        const auto& e = s.entries[i];
        const Trace<S> tr = traced_forward(s.model, e.prompt_tokens);
        for (int l = 0; l <= s.model.config.n_layers; ++l) {
            const Vec<S> lens = logit_lens(s.model, tr, l, e.end_pos());
            int top = 0;
            for (int t = 1; t < s.model.config.vocab_size; ++t)
                if (lens[t] > lens[top]) top = t;
            rows[i].push_back({l, static_cast<double>(lens[e.a_first_token]),
                               rank_of<S>(lens, e.a_first_token), top,
                               static_cast<double>(lens[top])});
        }
    });
    CsvWriter csv(fs::path(o.out_dir) / "lens.csv");
    csv.field("prompt").field("subject").field("relation").field("layer")
        .field("logit_a").field("rank_a").field("top_token").field("top_logit");
    csv.end_row();
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (const auto& r : rows[i]) {
            csv.field(i).field(s.entries[i].subject)
                .field(s.entries[i].relation_id).field(r.layer).field(r.logit_a)
                .field(r.rank_a).field(s.vocab.token(r.top_token))
                .field(r.top_logit);
            csv.end_row();
        }
    write_run_manifest(make_manifest("lens", o),
                       fs::path(o.out_dir) / "manifest.json");
    return 0;
}

template <class S>
int cmd_dla(const Options& o) {
    auto s = Session<S>::load(o, true);
    fs::create_directories(o.out_dir);
    const auto components = all_components(s.model.config);

    struct Row {
        ComponentId component;
        std::string group;
        AttributeStats stats;
    };
    std::vector<std::vector<Row>> rows(s.entries.size());
    parallel_over(s.entries.size(), o.jobs, [&](std::size_t i) {
        const auto& e = s.entries[i];
        const Trace<S> tr = traced_forward(s.model, e.prompt_tokens);
        for (const auto& c : components) {
            const bool is_head = c.kind == ComponentId::Kind::kHead;
            const auto stats =
                attribute_stats(s.model, tr, e, c, o.by_source && is_head);
            rows[i].push_back({c, "all", stats});
            if (o.by_source && is_head) {
                const auto groups =
                    dla_by_source_group(s.model, tr, c, e.end_pos(), e.spans);
                for (Group g : kAllGroups) {
                    const auto& d = groups.at(g);
                    AttributeStats gs;
                    gs.dla_a = static_cast<double>(d.values[e.a_first_token]);
                    gs.dla_a_centered = static_cast<double>(
                        mean_center(d.values)[e.a_first_token]);
                    gs.mean_top5_r_minus_a =
                        mean_of_top_abs(d.values, e.r_first_tokens, 5);
                    if (!e.s_first_tokens.empty()) {
                        double sum = 0;
                        for (int t : e.s_first_tokens)
                            sum += static_cast<double>(d.values[t]);
                        gs.mean_s_minus_a =
                            sum / static_cast<double>(e.s_first_tokens.size());
                    }
                    gs.attn_subject = stats.attn_subject;
                    gs.attn_relation = stats.attn_relation;
                    rows[i].push_back({c, std::string(to_string(g)), gs});
                }
            }
        }
    });

    CsvWriter csv(fs::path(o.out_dir) / "dla.csv");
    csv.field("prompt").field("subject").field("relation").field("layer")
        .field("head_or_mlp").field("group").field("dla_a")
        .field("dla_a_centered").field("mean_R").field("mean_S")
        .field("attn_to_subject").field("attn_to_relation");
    csv.end_row();
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (const auto& r : rows[i]) {
            const auto& c = r.component;
            csv.field(i).field(s.entries[i].subject)
                .field(s.entries[i].relation_id)
                .field(c.layer >= 0 ? cat(c.layer) : std::string(""))
                .field(c.kind == ComponentId::Kind::kHead ? cat("h", c.head_index)
                                                          : c.to_string())
                .field(r.group).field(r.stats.dla_a).field(r.stats.dla_a_centered)
                .field(opt_field(r.stats.mean_top5_r_minus_a))
                .field(opt_field(r.stats.mean_s_minus_a))
                .field(r.stats.attn_subject).field(r.stats.attn_relation);
            csv.end_row();
        }
    write_run_manifest(make_manifest("dla", o),
                       fs::path(o.out_dir) / "manifest.json");
    return 0;
}

template <class S>
int cmd_classify(const Options& o) {
    auto s = Session<S>::load(o, true);
    fs::create_directories(o.out_dir);
    const auto labels = classify_heads(s.model, s.entries, o.top_k);
    json out = json::array();
    for (const auto& l : labels)
        out.push_back({{"head", l.head.to_string()},
                       {"label", std::string(to_string(l.label))},
                       {"subject_dla", l.subject_dla},
                       {"relation_dla", l.relation_dla},
                       {"ratio", format_real(l.ratio)},
                       {"attn_subject", l.attn_subject},
                       {"attn_relation", l.attn_relation},
                       {"rank_metric", l.rank_metric}});
    std::ofstream f(fs::path(o.out_dir) / "labels.json");
    f << out.dump(2) << "\n";
    write_run_manifest(make_manifest("classify", o),
                       fs::path(o.out_dir) / "manifest.json");
    return 0;
}

template <class S>
int cmd_probe(const Options& o) {
    auto s = Session<S>::load(o, true);
    fs::create_directories(o.out_dir);
    const double threshold = o.threshold < 0 ? 0.01 : o.threshold;
    const ComponentId head = ComponentId::head(o.probe_layer, o.probe_head);

    std::vector<std::vector<std::pair<int, double>>> tables(s.entries.size());
    parallel_over(s.entries.size(), o.jobs, [&](std::size_t i) {
        const auto& e = s.entries[i];
        const Trace<S> tr = traced_forward(s.model, e.prompt_tokens);
        const int probe_pos =
            e.spans.subject.empty() ? e.end_pos() : e.spans.subject.end - 1;
        tables[i] = ov_probe(s.model, tr, head, probe_pos, threshold);
    });

    CsvWriter csv(fs::path(o.out_dir) / "probe.csv");
    csv.field("prompt").field("subject").field("head").field("rank")
        .field("token").field("probability");
    csv.end_row();
    for (std::size_t i = 0; i < tables.size(); ++i) {
        int rank = 0;
        for (const auto& [tok, p] : tables[i]) {
            csv.field(i).field(s.entries[i].subject).field(head.to_string())
                .field(rank++).field(s.vocab.token(tok)).field(p);
            csv.end_row();
        }
    }
    write_run_manifest(make_manifest("probe", o),
                       fs::path(o.out_dir) / "manifest.json");
    return 0;
}

template <class S>
int cmd_knockout(const Options& o) {
    auto s = Session<S>::load(o, true);
    fs::create_directories(o.out_dir);
    const Group dest = group_from_string(o.dest_group);
    const Group src = group_from_string(o.src_group);
    const Group readout = group_from_string(o.report_group);
    std::optional<std::pair<int, int>> layers;
    if (o.layer_from >= 0 || o.layer_to >= 0) {
        const int lo = std::max(o.layer_from, 0);
        const int hi = o.layer_to >= 0 ? o.layer_to : s.model.config.n_layers - 1;
        layers = std::make_pair(lo, hi);
    }
    const auto mode =
        o.no_renorm ? KnockoutMode::kZeroNoRenorm : KnockoutMode::kRenormalize;

    struct Row {
        int layer, head, rank_before, rank_after;
        double loss_before, loss_after;
    };
    std::vector<std::vector<Row>> rows(s.entries.size());
    parallel_over(s.entries.size(), o.jobs, [&](std::size_t i) {
        const auto& e = s.entries[i];
        const Trace<S> clean = traced_forward(s.model, e.prompt_tokens);
        const Trace<S> blocked = attention_knockout(
            s.model, std::span<const int>(e.prompt_tokens), e.spans, dest, src,
            layers, mode);
        const double loss_before = eval_metrics(clean, e).loss;
        const double loss_after = eval_metrics(blocked, e).loss;
        for (int l = 0; l < s.model.config.n_layers; ++l)
            for (int h = 0; h < s.model.config.n_heads; ++h) {
                const ComponentId head = ComponentId::head(l, h);
                const auto before = dla_by_source_group(s.model, clean, head,
                                                        e.end_pos(), e.spans)
                                        .at(readout);
                const auto after = dla_by_source_group(s.model, blocked, head,
                                                       e.end_pos(), e.spans)
                                       .at(readout);
                rows[i].push_back({l, h,
                                   rank_of<S>(before.values, e.a_first_token),
                                   rank_of<S>(after.values, e.a_first_token),
                                   loss_before, loss_after});
            }
    });

    CsvWriter csv(fs::path(o.out_dir) / "knockout.csv");
    csv.field("prompt").field("subject").field("layer").field("head")
        .field("rank_before").field("rank_after").field("delta")
        .field("model_loss_before").field("model_loss_after");
    csv.end_row();
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (const auto& r : rows[i]) {
            csv.field(i).field(s.entries[i].subject).field(r.layer).field(r.head)
                .field(r.rank_before).field(r.rank_after)
                .field(r.rank_after - r.rank_before).field(r.loss_before)
                .field(r.loss_after);
            csv.end_row();
        }
    write_run_manifest(make_manifest("knockout", o),
                       fs::path(o.out_dir) / "manifest.json");
    return 0;
}

template <class S>
int cmd_patch(const Options& o) {
    auto s = Session<S>::load(o, true);
    fs::create_directories(o.out_dir);
    const auto components = parse_components(o.components, s.model.config);

    // Pair each entry with the next one sharing its relation.
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < s.entries.size(); ++i) {
        for (std::size_t step = 1; step < s.entries.size(); ++step) {
            const std::size_t j = (i + step) % s.entries.size();
            if (s.entries[j].relation_id == s.entries[i].relation_id &&
                s.entries[j].subject != s.entries[i].subject) {
                pairs.emplace_back(i, j);
                break;
            }
        }
    }
    if (pairs.empty()) throw std::runtime_error("no patchable prompt pairs");

    struct Row {
        std::size_t target = 0, source = 0;
        MetricReport before, after;
    };
    std::vector<Row> rows(pairs.size());
    parallel_over(pairs.size(), o.jobs, [&](std::size_t k) {
        const auto [i, j] = pairs[k];
        const auto& target = s.entries[i];
        const auto& source = s.entries[j];
        const Trace<S> clean = traced_forward(s.model, target.prompt_tokens);
        const Trace<S> patched = activation_patch(
            s.model, std::span<const int>(target.prompt_tokens),
            std::span<const int>(source.prompt_tokens), components,
            std::vector<int>{target.end_pos()}, &target.spans, &source.spans);
        const auto diff_pair =
            std::make_pair(target.a_first_token, source.a_first_token);
        rows[k] = {i, j, eval_metrics(clean, target, diff_pair),
                   eval_metrics(patched, target, diff_pair)};
    });

    CsvWriter csv(fs::path(o.out_dir) / "patch.csv");
    csv.field("target").field("source").field("logprob_before")
        .field("logprob_after").field("logit_diff_before")
        .field("logit_diff_after").field("rank_before").field("rank_after");
    csv.end_row();
    for (const auto& r : rows) {
        csv.field(s.entries[r.target].subject).field(s.entries[r.source].subject)
            .field(r.before.logprob).field(r.after.logprob)
            .field(opt_field(r.before.logit_diff))
            .field(opt_field(r.after.logit_diff)).field(r.before.rank)
            .field(r.after.rank);
        csv.end_row();
    }
    write_run_manifest(make_manifest("patch", o),
                       fs::path(o.out_dir) / "manifest.json");
    return 0;
}

template <class S>
int cmd_edge_ablate(const Options& o) {
    auto s = Session<S>::load(o, true);
    fs::create_directories(o.out_dir);
    const auto components = parse_components(o.components, s.model.config);

    struct Row {
        MetricReport before, after;
        double max_abs_logit_after = 0;
    };
    std::vector<Row> rows(s.entries.size());
    parallel_over(s.entries.size(), o.jobs, [&](std::size_t i) {
        const auto& e = s.entries[i];
        const Trace<S> tr = traced_forward(s.model, e.prompt_tokens);
        const auto before = eval_metrics(tr, e);
        const Mat<S> ablated = direct_path_ablation(s.model, tr, components);
        const auto after = eval_metrics<S>(ablated, e, std::nullopt, &before);
        rows[i] = {before, after,
                   static_cast<double>(
                       ablated.row(e.end_pos()).cwiseAbs().maxCoeff())};
    });

    CsvWriter csv(fs::path(o.out_dir) / "edge_ablate.csv");
    csv.field("prompt").field("subject").field("relation").field("baseline_loss")
        .field("loss_after").field("percent_change").field("max_abs_logit_after");
    csv.end_row();
    struct Agg {
        double base = 0, after = 0;
        int count = 0;
    };
    std::map<std::string, Agg> agg;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        csv.field(i).field(s.entries[i].subject).field(s.entries[i].relation_id)
            .field(r.before.loss).field(r.after.loss)
            .field(opt_field(r.after.loss_percent_change))
            .field(r.max_abs_logit_after);
        csv.end_row();
        auto& slot = agg[s.entries[i].relation_id];
        slot.base += r.before.loss;
        slot.after += r.after.loss;
        slot.count += 1;
    }

    CsvWriter summary(fs::path(o.out_dir) / "edge_ablate_summary.csv");
    summary.field("relation").field("baseline_loss").field("loss_after")
        .field("percent_change");
    summary.end_row();
    for (const auto& [relation, acc] : agg) {
        const double base = acc.base / acc.count;
        const double after = acc.after / acc.count;
        summary.field(relation).field(base).field(after)
            .field(base != 0.0 ? format_real(100.0 * (after - base) / base)
                               : std::string(""));
        summary.end_row();
    }
    write_run_manifest(make_manifest("edge-ablate", o),
                       fs::path(o.out_dir) / "manifest.json");
    return 0;
}

template <class S>
int cmd_additivity(const Options& o) {
    auto s = Session<S>::load(o, true);
    fs::create_directories(o.out_dir);
    const auto components = parse_components(o.components, s.model.config);
    const double threshold = o.threshold < 0 ? 0.8 : o.threshold;

    std::vector<json> reports(s.entries.size());
    parallel_over(s.entries.size(), o.jobs, [&](std::size_t i) {
        const auto& e = s.entries[i];
        const Trace<S> tr = traced_forward(s.model, e.prompt_tokens);
        const auto rep = detect_additivity(s.model, tr, e, components, threshold);
        json comps = json::array();
        for (const auto& f : rep.components) {
            json fingerprint = json::array();
            for (const auto& [tok, v] : f.fingerprint)
                fingerprint.push_back({{"token", s.vocab.token(tok)}, {"dla", v}});
            comps.push_back(
                {{"component", f.component.to_string()},
                 {"positive_centered_dla_on_a", f.positive_centered_dla_on_a},
                 {"a_is_argmax", f.a_is_argmax},
                 {"fingerprint", std::move(fingerprint)}});
        }
        json sims = json::array();
        for (int r = 0; r < rep.pairwise_similarity.rows(); ++r) {
            json row = json::array();
            for (int c = 0; c < rep.pairwise_similarity.cols(); ++c)
                row.push_back(rep.pairwise_similarity(r, c));
            sims.push_back(std::move(row));
        }
        reports[i] = {{"subject", e.subject},
                      {"relation", e.relation_id},
                      {"attribute", e.attribute},
                      {"components", std::move(comps)},
                      {"pairwise_similarity", std::move(sims)},
                      {"argmax_of_sum_is_a", rep.argmax_of_sum_is_a},
                      {"condition_positive", rep.condition_positive},
                      {"condition_diverse", rep.condition_diverse},
                      {"condition_constructive", rep.condition_constructive},
                      {"verdict", rep.verdict}};
    });

    json out = json::array();
    for (auto& r : reports) out.push_back(std::move(r));
    std::ofstream f(fs::path(o.out_dir) / "additivity.json");
    f << out.dump(2) << "\n";
    write_run_manifest(make_manifest("additivity", o),
                       fs::path(o.out_dir) / "manifest.json");
    return 0;
}

template <class S>
int cmd_rank_filter(const Options& o) {
    auto s = Session<S>::load(o, true);
    fs::create_directories(o.out_dir);
    const auto result = filter_by_rank(s.model, s.entries, o.max_rank);

    CsvWriter csv(fs::path(o.out_dir) / "ranks.csv");
    csv.field("rank").field("count");
    csv.end_row();
    for (const auto& [rank, count] : result.rank_histogram) {
        csv.field(rank).field(count);
        csv.end_row();
    }
    save_dataset(result.kept, fs::path(o.out_dir) / "kept.jsonl");
    CsvWriter dropped(fs::path(o.out_dir) / "dropped.csv");
    dropped.field("subject").field("relation").field("attribute").field("rank");
    dropped.end_row();
    for (const auto& [e, rank] : result.dropped) {
        dropped.field(e.subject).field(e.relation_id).field(e.attribute)
            .field(rank);
        dropped.end_row();
    }
    write_run_manifest(make_manifest("rank-filter", o),
                       fs::path(o.out_dir) / "manifest.json");
    return 0;
}

int cmd_fixtures_emit(const Options& o) {
    const auto fx = fixtures::build_fixture(
        fixtures::fixture_name_from_string(o.fixture_name), o.seed);
    fixtures::emit(fx, o.out_dir);
    write_run_manifest(make_manifest(cat("fixtures emit ", o.fixture_name), o),
                       fs::path(o.out_dir) / "manifest.json");
    return 0;
}

template <class S>
int dispatch(const std::string& cmd, const Options& o) {
    if (cmd == "trace") return cmd_trace<S>(o);
    if (cmd == "lens") return cmd_lens<S>(o);
    if (cmd == "dla") return cmd_dla<S>(o);
    if (cmd == "classify") return cmd_classify<S>(o);
    if (cmd == "probe") return cmd_probe<S>(o);
    if (cmd == "knockout") return cmd_knockout<S>(o);
    if (cmd == "patch") return cmd_patch<S>(o);
    if (cmd == "edge-ablate") return cmd_edge_ablate<S>(o);
    if (cmd == "additivity") return cmd_additivity<S>(o);
    if (cmd == "rank-filter") return cmd_rank_filter<S>(o);
    throw std::logic_error("unknown command");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"factual-recall attribution toolkit"};
    app.require_subcommand(1);
    Options o;

    auto* fixtures_cmd = app.add_subcommand("fixtures", "fixture asset tools");
    fixtures_cmd->require_subcommand(1);
    auto* emit_cmd =
        fixtures_cmd->add_subcommand("emit", "write fixture model/dataset files");
    emit_cmd->add_option("--name", o.fixture_name,
                         "subject_head|relation_head|propagation|composite|div6")
        ->required();
    emit_cmd->add_option("--out", o.out_dir, "output directory")->required();
    emit_cmd->add_option("--seed", o.seed, "fixture seed");

    const std::vector<std::string> analysis_cmds = {
        "trace",    "lens",  "dla",         "classify",   "probe",
        "knockout", "patch", "edge-ablate", "additivity", "rank-filter"};
    std::map<std::string, CLI::App*> subs;
    for (const auto& name : analysis_cmds) {
        auto* cmd = app.add_subcommand(name, "");
        add_model_flags(cmd, o);
        add_dataset_flags(cmd, o);
        add_common_flags(cmd, o);
        subs[name] = cmd;
    }
    subs["trace"]->description("dump one prompt's full activation trace");
    subs["trace"]->add_option("--index", o.index, "dataset entry index");
    subs["trace"]->add_flag("--lean", o.lean, "per-source writes at END only");
    subs["lens"]->description("logit-lens table per layer at END");
    subs["dla"]->description("per-component direct logit attribution CSV");
    subs["dla"]->add_flag("--by-source", o.by_source,
                          "also split head DLA by source token group");
    subs["classify"]->description("label top heads Subject/Relation/Mixed");
    subs["classify"]->add_option("--top-k", o.top_k, "heads to label");
    subs["probe"]->description("OV-circuit probe tables at the subject token");
    subs["probe"]->add_option("--layer", o.probe_layer, "head layer")->required();
    subs["probe"]->add_option("--head", o.probe_head, "head index")->required();
    subs["probe"]->add_option("--threshold", o.threshold,
                              "confidence cutoff (default 0.01)");
    subs["knockout"]->description("attention knockout rank deltas");
    subs["knockout"]->add_option("--dest", o.dest_group, "destination group");
    subs["knockout"]->add_option("--src", o.src_group, "source group");
    subs["knockout"]->add_option("--report-group", o.report_group,
                                 "source group whose DLA rank is reported");
    subs["knockout"]->add_option("--layer-from", o.layer_from, "first layer");
    subs["knockout"]->add_option("--layer-to", o.layer_to, "last layer");
    subs["knockout"]->add_flag("--no-renorm", o.no_renorm,
                               "zero after softmax instead of masking before");
    subs["patch"]->description("activation patching between subject pairs");
    subs["patch"]->add_option("--components", o.components,
                              "comma list, e.g. L0H0,mlp1 (or 'all')");
    subs["edge-ablate"]->description("direct-path ablation loss changes");
    subs["edge-ablate"]->add_option("--components", o.components,
                                    "comma list or 'all'");
    subs["additivity"]->description("three-condition additive-motif report");
    subs["additivity"]
        ->add_option("--components", o.components, "comma list or 'all'")
        ->required();
    subs["additivity"]->add_option("--threshold", o.threshold,
                                   "cosine-similarity threshold (default 0.8)");
    subs["rank-filter"]->description("rank histogram and top-k filtering");
    subs["rank-filter"]->add_option("--max-rank", o.max_rank,
                                    "keep entries with rank below this");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (fixtures_cmd->parsed()) return cmd_fixtures_emit(o);
        for (const auto& name : analysis_cmds)
            if (subs[name]->parsed()) {
                log::info(cat("running ", name, o.float32 ? " (float32)" : ""));
                return o.float32 ? dispatch<float>(name, o)
                                 : dispatch<double>(name, o);
            }
        std::cerr << "error: no command given\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
