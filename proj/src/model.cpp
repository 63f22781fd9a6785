#include "recall/model.hpp"

#include <fstream>

#include <json.hpp>

namespace recall {

using nlohmann::json;

std::string_view to_string(ResidualStyle s) {
    return s == ResidualStyle::kParallel ? "parallel" : "sequential";
}

ResidualStyle residual_style_from_string(std::string_view s) {
    if (s == "parallel") return ResidualStyle::kParallel;
    if (s == "sequential") return ResidualStyle::kSequential;
    throw std::invalid_argument(cat("unknown residual style '", s, "'"));
}

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0) throw std::runtime_error(cat("config: ", name, " must be positive"));
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_model, "d_model");
    positive(d_head, "d_head");
    positive(d_mlp, "d_mlp");
    positive(vocab_size, "vocab_size");
    positive(max_seq, "max_seq");
    if (!(ln_eps > 0)) throw std::runtime_error("config: ln_eps must be positive");
}

ModelConfig ModelConfig::from_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error(cat("cannot open config ", path.string()));
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error(cat("config parse error: ", e.what()));
    }
    ModelConfig cfg;
    try {
        cfg.n_layers = j.at("n_layers").get<int>();
        cfg.n_heads = j.at("n_heads").get<int>();
        cfg.d_model = j.at("d_model").get<int>();
        cfg.d_head = j.at("d_head").get<int>();
        cfg.d_mlp = j.at("d_mlp").get<int>();
        cfg.vocab_size = j.at("vocab_size").get<int>();
        cfg.max_seq = j.at("max_seq").get<int>();
        cfg.ln_eps = j.value("ln_eps", 1e-5);
        cfg.residual_style =
            residual_style_from_string(j.value("residual_style", "parallel"));
    } catch (const json::exception& e) {
        throw std::runtime_error(cat("config field error: ", e.what()));
    }
    cfg.validate();
    return cfg;
}

void ModelConfig::to_json_file(const std::filesystem::path& path) const {
    json j = {{"n_layers", n_layers}, {"n_heads", n_heads},
              {"d_model", d_model},   {"d_head", d_head},
              {"d_mlp", d_mlp},       {"vocab_size", vocab_size},
              {"max_seq", max_seq},   {"ln_eps", ln_eps},
              {"residual_style", std::string(to_string(residual_style))}};
    std::ofstream f(path);
    if (!f) throw std::runtime_error(cat("cannot write config ", path.string()));
    f << j.dump(2) << "\n";
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
        const auto& tok = tokens_[i];
        if (tok.empty())
            throw std::runtime_error(cat("vocab: empty token at id ", i));
        if (!ids_.emplace(tok, i).second)
            throw std::runtime_error(cat("vocab: duplicate token '", tok, "'"));
        max_token_len_ = std::max(max_token_len_, tok.size());
    }
}

Vocab Vocab::from_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error(cat("cannot open vocab ", path.string()));
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(f, line)) tokens.push_back(line);
    return Vocab(std::move(tokens));
}

void Vocab::to_file(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error(cat("cannot write vocab ", path.string()));
    for (const auto& tok : tokens_) f << tok << "\n";
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size())
        throw std::out_of_range(cat("vocab: id ", id, " outside 0..", size() - 1));
    return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocab::id(std::string_view token) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
}

std::vector<int> tokenize(std::string_view text, const Vocab& vocab) {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t longest =
            std::min(vocab.max_token_len(), text.size() - pos);
        bool matched = false;
        for (std::size_t len = longest; len >= 1; --len) {
            if (auto id = vocab.id(text.substr(pos, len))) {
                out.push_back(*id);
                pos += len;
                matched = true;
                break;
            }
        }
        if (!matched)
            throw std::runtime_error(
                cat("untokenizable input at byte ", pos, ": '",
                    text.substr(pos, std::min<std::size_t>(8, text.size() - pos)),
                    "'"));
    }
    return out;
}

namespace {

std::string head_name(int l, int h, const char* which) {
    return cat("layers.", l, ".heads.", h, ".", which);
}

}  // namespace

ModelBundle<double> load_weights(const ModelConfig& cfg,
                                 const std::filesystem::path& manifest_path,
                                 const std::filesystem::path& bin_path) {
    const TensorFile tf = TensorFile::open(manifest_path, bin_path);
    ModelBundle<double> m;
    m.config = cfg;
    m.token_embed = tf.matrix("token_embed");
    m.pos_embed = tf.matrix("pos_embed");
    m.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& lw = m.layers[static_cast<std::size_t>(l)];
        lw.ln1.gamma = tf.vector(cat("layers.", l, ".ln1.gamma"));
        lw.ln1.beta = tf.vector(cat("layers.", l, ".ln1.beta"));
        lw.ln2.gamma = tf.vector(cat("layers.", l, ".ln2.gamma"));
        lw.ln2.beta = tf.vector(cat("layers.", l, ".ln2.beta"));
        for (int h = 0; h < cfg.n_heads; ++h)
            lw.heads.push_back({tf.matrix(head_name(l, h, "wq")),
                                tf.matrix(head_name(l, h, "wk")),
                                tf.matrix(head_name(l, h, "wv")),
                                tf.matrix(head_name(l, h, "wo"))});
        if (tf.has(cat("layers.", l, ".attn_bias")))
            lw.attn_bias = tf.vector(cat("layers.", l, ".attn_bias"));
        lw.mlp.w_in = tf.matrix(cat("layers.", l, ".mlp.w_in"));
        lw.mlp.b_in = tf.vector(cat("layers.", l, ".mlp.b_in"));
        lw.mlp.w_out = tf.matrix(cat("layers.", l, ".mlp.w_out"));
        lw.mlp.b_out = tf.vector(cat("layers.", l, ".mlp.b_out"));
    }
    m.final_ln.gamma = tf.vector("final_ln.gamma");
    m.final_ln.beta = tf.vector("final_ln.beta");
    m.unembed = tf.matrix("unembed");
    if (tf.has("unembed_bias")) m.unembed_bias = tf.vector("unembed_bias");
    m.validate();
    log::info(cat("loaded model: L=", cfg.n_layers, " H=", cfg.n_heads,
                  " d_model=", cfg.d_model, " V=", cfg.vocab_size, " (",
                  to_string(cfg.residual_style), ")"));
    return m;
}

void save_weights(const ModelBundle<double>& m,
                  const std::filesystem::path& manifest_path,
                  const std::filesystem::path& bin_path) {
    TensorFileWriter w;
    w.add("token_embed", m.token_embed);
    w.add("pos_embed", m.pos_embed);
    for (int l = 0; l < m.config.n_layers; ++l) {
        const auto& lw = m.layers[static_cast<std::size_t>(l)];
        w.add(cat("layers.", l, ".ln1.gamma"), lw.ln1.gamma);
        w.add(cat("layers.", l, ".ln1.beta"), lw.ln1.beta);
        w.add(cat("layers.", l, ".ln2.gamma"), lw.ln2.gamma);
        w.add(cat("layers.", l, ".ln2.beta"), lw.ln2.beta);
        for (int h = 0; h < m.config.n_heads; ++h) {
            w.add(head_name(l, h, "wq"), lw.heads[static_cast<std::size_t>(h)].wq);
            w.add(head_name(l, h, "wk"), lw.heads[static_cast<std::size_t>(h)].wk);
            w.add(head_name(l, h, "wv"), lw.heads[static_cast<std::size_t>(h)].wv);
            w.add(head_name(l, h, "wo"), lw.heads[static_cast<std::size_t>(h)].wo);
        }
        if (lw.attn_bias) w.add(cat("layers.", l, ".attn_bias"), *lw.attn_bias);
        w.add(cat("layers.", l, ".mlp.w_in"), lw.mlp.w_in);
        w.add(cat("layers.", l, ".mlp.b_in"), lw.mlp.b_in);
        w.add(cat("layers.", l, ".mlp.w_out"), lw.mlp.w_out);
        w.add(cat("layers.", l, ".mlp.b_out"), lw.mlp.b_out);
    }
    w.add("final_ln.gamma", m.final_ln.gamma);
    w.add("final_ln.beta", m.final_ln.beta);
    w.add("unembed", m.unembed);
    if (m.unembed_bias) w.add("unembed_bias", *m.unembed_bias);
    w.write(bin_path, manifest_path);
}

void save_model(const ModelBundle<double>& m, const Vocab& vocab,
                const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    m.config.to_json_file(dir / "config.json");
    save_weights(m, dir / "weights.json", dir / "weights.bin");
    vocab.to_file(dir / "vocab.txt");
}

}  // namespace recall
