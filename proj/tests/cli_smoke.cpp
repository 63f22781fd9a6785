// End-to-end exercise of the CLI binary (path passed as argv[1]): emits
// fixture assets, runs every subcommand against them, and checks outputs,
// exit codes and byte-level determinism.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "recall/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int g_failures = 0;
std::string g_cli;

void check(bool ok, const std::string& what) {
    if (!ok) {
        ++g_failures;
        std::cerr << "FAIL: " << what << "\n";
    } else {
        std::cout << "ok: " << what << "\n";
    }
}

int run(const std::string& args) {
    const std::string cmd = g_cli + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: cli_smoke <path-to-recall_cli>\n";
        return 2;
    }
    g_cli = argv[1];
    const fs::path root = fs::temp_directory_path() / "recall_cli_smoke";
    fs::remove_all(root);
    fs::create_directories(root);

    check(run("") == 2, "no arguments exits 2");
    check(run("frobnicate") == 2, "unknown command exits 2");
    check(run("--help") == 0, "--help exits 0");

    const fs::path subj = root / "subject_head";
    const fs::path comp = root / "composite";
    const fs::path d6 = root / "div6";
    check(run("fixtures emit --name subject_head --seed 0 --out " +
              subj.string()) == 0,
          "fixtures emit subject_head");
    check(run("fixtures emit --name composite --seed 0 --out " + comp.string()) ==
              0,
          "fixtures emit composite");
    check(run("fixtures emit --name div6 --seed 0 --out " + d6.string()) == 0,
          "fixtures emit div6");
    for (const char* f : {"config.json", "weights.json", "weights.bin",
                          "vocab.txt", "dataset.jsonl", "expected.json",
                          "manifest.json"})
        check(fs::exists(subj / f), std::string("emitted ") + f);

    auto model_args = [](const fs::path& dir) {
        return " --model " + (dir / "config.json").string() + " --weights " +
               (dir / "weights.json").string() + " --vocab " +
               (dir / "vocab.txt").string() + " --dataset " +
               (dir / "dataset.jsonl").string();
    };

    check(run("classify" + model_args(subj) + " --out " +
              (root / "classify").string()) == 0,
          "classify runs");
    {
        std::ifstream f(root / "classify" / "labels.json");
        json labels;
        f >> labels;
        bool found = false;
        for (const auto& l : labels)
            if (l.at("head") == "L0H0" && l.at("label") == "Subject") found = true;
        check(found, "classify labels the planted head Subject");
        check(fs::exists(root / "classify" / "manifest.json"),
              "classify writes a manifest");
    }

    check(run("dla" + model_args(comp) + " --by-source --relation r0 --jobs 4 "
              "--out " + (root / "dla").string()) == 0,
          "dla --by-source runs");
    {
        const std::string first = slurp(root / "dla" / "dla.csv");
        check(first.find("prompt,subject,relation,layer,head_or_mlp,group,") == 0,
              "dla.csv header");
        check(run("dla" + model_args(comp) +
                  " --by-source --relation r0 --jobs 2 --out " +
                  (root / "dla2").string()) == 0,
              "dla rerun");
        check(slurp(root / "dla2" / "dla.csv") == first,
              "dla.csv is byte-identical across runs and job counts");
    }

    check(run("lens" + model_args(subj) + " --out " + (root / "lens").string()) ==
              0,
          "lens runs");
    check(run("probe" + model_args(subj) + " --layer 0 --head 0 --out " +
              (root / "probe").string()) == 0,
          "probe runs");
    {
        const std::string probe = slurp(root / "probe" / "probe.csv");
        check(probe.find("a0") != std::string::npos,
              "probe table contains a planted attribute");
    }

    const fs::path prop = root / "propagation";
    check(run("fixtures emit --name propagation --seed 0 --out " +
              prop.string()) == 0,
          "fixtures emit propagation");
    check(run("knockout" + model_args(prop) + " --dest relation --src subject "
              "--out " + (root / "knockout").string()) == 0,
          "knockout runs");

    check(run("patch" + model_args(root / "relation_head") + " --components "
              "L0H0 --out " + (root / "patch").string()) == 1,
          "patch on missing assets exits 1");
    check(run("fixtures emit --name relation_head --seed 0 --out " +
              (root / "relation_head").string()) == 0,
          "fixtures emit relation_head");
    check(run("patch" + model_args(root / "relation_head") + " --components "
              "L0H0 --out " + (root / "patch").string()) == 0,
          "patch runs");

    check(run("edge-ablate" + model_args(subj) + " --components all --out " +
              (root / "ablate").string()) == 0,
          "edge-ablate runs");
    {
        // with every component removed the END logits column collapses to ~0
        std::ifstream f(root / "ablate" / "edge_ablate.csv");
        std::string line;
        std::getline(f, line);  // header
        bool all_small = true;
        while (std::getline(f, line)) {
            const auto pos = line.rfind(',');
            const double v = std::abs(std::stod(line.substr(pos + 1)));
            all_small = all_small && v <= 1e-6;
        }
        check(all_small, "edge-ablate --components all zeroes the logits");
    }

    check(run("additivity" + model_args(d6) + " --components L0H0,L0H1 --out " +
              (root / "add").string()) == 0,
          "additivity runs");
    {
        std::ifstream f(root / "add" / "additivity.json");
        json reports;
        f >> reports;
        bool ok = true;
        for (const auto& r : reports) {
            const int n = std::stoi(r.at("subject").get<std::string>());
            if (r.at("verdict").get<bool>() != (n % 6 == 0)) ok = false;
        }
        check(ok, "additivity verdicts are true exactly on multiples of 6");
    }

    check(run("rank-filter" + model_args(comp) + " --out " +
              (root / "ranks").string()) == 0,
          "rank-filter runs");
    check(run("trace" + model_args(subj) + " --index 0 --out " +
              (root / "trace").string()) == 0,
          "trace runs");
    check(fs::exists(root / "trace" / "trace.bin"), "trace dump exists");
    try {
        const auto tf = recall::TensorFile::open(root / "trace" / "trace.json",
                                                 root / "trace" / "trace.bin");
        check(tf.has("logits") && tf.has("resid.0") && tf.has("attn.0.0") &&
                  tf.has("head_src.0.0.3"),
              "trace dump is a readable tensor container");
        check(tf.shape("logits") == std::vector<std::int64_t>({4, 112}),
              "dumped logits have the prompt's shape");
    } catch (const std::exception& e) {
        check(false, std::string("trace readback: ") + e.what());
    }

    check(run("dla" + model_args(subj) + " --float32 --out " +
              (root / "dla32").string()) == 0,
          "dla runs in float32 mode");
    check(run("dla" + model_args(subj) + " --ln-style sequential --out " +
              (root / "dlaseq").string()) == 0,
          "dla runs with the sequential residual style");

    std::printf("%s\n", g_failures == 0 ? "cli smoke: all checks passed"
                                        : "cli smoke: FAILURES");
    return g_failures == 0 ? 0 : 1;
}
