#include "recall/reports.hpp"

#include <json.hpp>

#include "recall/io.hpp"

namespace recall {

using nlohmann::json;

void write_run_manifest(const RunManifest& manifest,
                        const std::filesystem::path& path) {
    json j = {{"tool", std::string(kToolVersion)},
              {"command", manifest.command},
              {"seed", manifest.seed},
              {"params", manifest.params}};
    std::ofstream f(path);
    if (!f) throw std::runtime_error(cat("cannot write manifest ", path.string()));
    f << j.dump(2) << "\n";
}

CsvWriter::CsvWriter(const std::filesystem::path& path) : out_(path) {
    if (!out_) throw std::runtime_error(cat("cannot write ", path.string()));
}

CsvWriter& CsvWriter::field(std::string_view s) {
    if (row_started_) out_ << ",";
    row_started_ = true;
    const bool needs_quote =
        s.find_first_of(",\"\n") != std::string_view::npos;
    if (!needs_quote) {
        out_ << s;
        return *this;
    }
    out_ << '"';
    for (char c : s) {
        if (c == '"') out_ << '"';
        out_ << c;
    }
    out_ << '"';
    return *this;
}

void CsvWriter::end_row() {
    out_ << "\n";
    row_started_ = false;
}

void dump_trace(const Trace<double>& tr, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    TensorFileWriter w;
    std::vector<double> toks(tr.tokens.begin(), tr.tokens.end());
    const auto n_tokens = static_cast<std::int64_t>(toks.size());
    w.add_raw("tokens", {n_tokens}, std::move(toks));
    for (int l = 0; l <= tr.config.n_layers; ++l)
        w.add(cat("resid.", l), tr.resid_at(l));
    for (int l = 0; l < tr.config.n_layers; ++l) {
        for (int h = 0; h < tr.config.n_heads; ++h) {
            w.add(cat("attn.", l, ".", h), tr.attn_prob(l, h));
            w.add(cat("head_out.", l, ".", h), tr.head_out(l, h));
            if (tr.depth == TraceDepth::kFull) {
                for (int t = 0; t < tr.seq_len(); ++t)
                    w.add(cat("head_src.", l, ".", h, ".", t),
                          tr.head_sources(l, h, t));
            } else {
                w.add(cat("head_src.", l, ".", h, ".", tr.seq_len() - 1),
                      tr.head_sources(l, h, tr.seq_len() - 1));
            }
        }
        w.add(cat("mlp_out.", l), tr.mlp_out(l));
    }
    w.add("final_ln.mean", tr.final_ln_mean);
    w.add("final_ln.inv_std", tr.final_ln_inv_std);
    w.add("logits", tr.logits);
    w.write(dir / "trace.bin", dir / "trace.json");
}

}  // namespace recall
