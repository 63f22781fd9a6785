#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "recall/common.hpp"
#include "recall/trace.hpp"

namespace recall {

inline constexpr std::string_view kToolVersion = "recall 1.0.0";

// Written alongside every output file so a run can be reproduced exactly.
struct RunManifest {
    std::string command;
    std::map<std::string, std::string> params;
    std::uint64_t seed = 0;
};

void write_run_manifest(const RunManifest& manifest,
                        const std::filesystem::path& path);

// Minimal CSV writer with RFC-style quoting and fixed float formatting, so
// identical runs produce byte-identical files.
class CsvWriter {
  public:
    explicit CsvWriter(const std::filesystem::path& path);

    CsvWriter& field(std::string_view s);
    CsvWriter& field(double v) { return field(format_real(v)); }
    CsvWriter& field(int v) { return field(cat(v)); }
    CsvWriter& field(std::size_t v) { return field(cat(v)); }
    void end_row();

  private:
    std::ofstream out_;
    bool row_started_ = false;
};

// Dumps a trace into the standard tensor container (resid.<l>, attn.<l>.<h>,
// head_out.<l>.<h>, head_src.<l>.<h>.<dest> in full mode, mlp_out.<l>,
// final_ln.mean/inv_std, logits, tokens).
void dump_trace(const Trace<double>& tr, const std::filesystem::path& dir);

}  // namespace recall
