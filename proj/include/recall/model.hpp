#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "recall/io.hpp"
#include "recall/numerics.hpp"
#include "recall/types.hpp"

namespace recall {

// Where each sublayer reads from. Parallel: attention and MLP both read the
// layer input z^{l-1}. Sequential: the MLP reads the post-attention stream.
enum class ResidualStyle { kParallel, kSequential };

std::string_view to_string(ResidualStyle s);
ResidualStyle residual_style_from_string(std::string_view s);

struct ModelConfig {
    int n_layers = 0;
    int n_heads = 0;
    int d_model = 0;
    int d_head = 0;
    int d_mlp = 0;
    int vocab_size = 0;
    int max_seq = 0;
    double ln_eps = 1e-5;
    ResidualStyle residual_style = ResidualStyle::kParallel;

    void validate() const;

    static ModelConfig from_json_file(const std::filesystem::path& path);
    void to_json_file(const std::filesystem::path& path) const;
};

// Token table: dense ids 0..V-1, strings unique. Stored one token per line
// (line number = id); tokens may contain spaces, including leading ones.
class Vocab {
  public:
    Vocab() = default;
    explicit Vocab(std::vector<std::string> tokens);

    static Vocab from_file(const std::filesystem::path& path);
    void to_file(const std::filesystem::path& path) const;

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& token(int id) const;
    std::optional<int> id(std::string_view token) const;
    std::size_t max_token_len() const { return max_token_len_; }

  private:
    std::vector<std::string> tokens_;
    std::map<std::string, int, std::less<>> ids_;
    std::size_t max_token_len_ = 0;
};

// Greedy longest-match tokenization, left to right. Throws on any character
// position where no vocab entry matches.
std::vector<int> tokenize(std::string_view text, const Vocab& vocab);

template <class S>
struct LayerNormParams {
    Vec<S> gamma;
    Vec<S> beta;
};

template <class S>
struct HeadWeights {
    Mat<S> wq, wk, wv;  // d_model × d_head
    Mat<S> wo;          // d_head × d_model
};

template <class S>
struct MlpWeights {
    Mat<S> w_in;   // d_model × d_mlp
    Vec<S> b_in;   // d_mlp
    Mat<S> w_out;  // d_mlp × d_model
    Vec<S> b_out;  // d_model
};

template <class S>
struct LayerWeights {
    LayerNormParams<S> ln1;  // attention sublayer pre-LN
    LayerNormParams<S> ln2;  // MLP sublayer pre-LN
    std::vector<HeadWeights<S>> heads;
    std::optional<Vec<S>> attn_bias;  // shared attention output bias, one per layer
    MlpWeights<S> mlp;
};

// A decoder-only transformer: learned token + absolute position embeddings,
// pre-LN sublayers, per-head Q/K/V/O projections, two-layer GELU MLPs, final
// LayerNorm and an untied unembedding. Immutable after load; any number of
// concurrent forward passes may share one bundle.
template <class S>
struct ModelBundle {
    ModelConfig config;
    Mat<S> token_embed;  // V × d_model
    Mat<S> pos_embed;    // max_seq × d_model
    std::vector<LayerWeights<S>> layers;
    LayerNormParams<S> final_ln;
    Mat<S> unembed;  // d_model × V
    std::optional<Vec<S>> unembed_bias;  // V

    // Checks every tensor's shape against the config and rejects non-finite
    // values; errors name the offending tensor.
    void validate() const;

    template <class T>
    ModelBundle<T> cast() const;
};

using ModelBundled = ModelBundle<double>;

template <class S>
struct LoadedModel {
    ModelBundle<S> model;
    Vocab vocab;
};

// ---------------------------------------------------------------------------
// implementation
// ---------------------------------------------------------------------------

namespace detail {

inline void check_shape(bool ok, std::string_view tensor) {
    if (!ok) throw std::runtime_error(cat("dimension mismatch for tensor ", tensor));
}

template <class S>
void check_tensor(const Mat<S>& m, Eigen::Index rows, Eigen::Index cols,
                  const std::string& name) {
    check_shape(m.rows() == rows && m.cols() == cols, name);
    require_finite<S>(m, name);
}

template <class S>
void check_tensor_vec(const Vec<S>& v, Eigen::Index n, const std::string& name) {
    check_shape(v.size() == n, name);
    require_finite_vec(v, name);
}

}  // namespace detail

template <class S>
void ModelBundle<S>::validate() const {
    config.validate();
    const auto d = config.d_model;
    detail::check_tensor(token_embed, config.vocab_size, d, "token_embed");
    detail::check_tensor(pos_embed, config.max_seq, d, "pos_embed");
    if (static_cast<int>(layers.size()) != config.n_layers)
        throw std::runtime_error("layer count does not match config");
    for (int l = 0; l < config.n_layers; ++l) {
        const auto& lw = layers[l];
        const std::string p = cat("layers.", l, ".");
        detail::check_tensor_vec(lw.ln1.gamma, d, p + "ln1.gamma");
        detail::check_tensor_vec(lw.ln1.beta, d, p + "ln1.beta");
        detail::check_tensor_vec(lw.ln2.gamma, d, p + "ln2.gamma");
        detail::check_tensor_vec(lw.ln2.beta, d, p + "ln2.beta");
        if (static_cast<int>(lw.heads.size()) != config.n_heads)
            throw std::runtime_error(cat("head count mismatch in layer ", l));
        for (int h = 0; h < config.n_heads; ++h) {
            const std::string q = cat(p, "heads.", h, ".");
            detail::check_tensor(lw.heads[h].wq, d, config.d_head, q + "wq");
            detail::check_tensor(lw.heads[h].wk, d, config.d_head, q + "wk");
            detail::check_tensor(lw.heads[h].wv, d, config.d_head, q + "wv");
            detail::check_tensor(lw.heads[h].wo, config.d_head, d, q + "wo");
        }
        if (lw.attn_bias)
            detail::check_tensor_vec(*lw.attn_bias, d, p + "attn_bias");
        detail::check_tensor(lw.mlp.w_in, d, config.d_mlp, p + "mlp.w_in");
        detail::check_tensor_vec(lw.mlp.b_in, config.d_mlp, p + "mlp.b_in");
        detail::check_tensor(lw.mlp.w_out, config.d_mlp, d, p + "mlp.w_out");
        detail::check_tensor_vec(lw.mlp.b_out, d, p + "mlp.b_out");
    }
    detail::check_tensor_vec(final_ln.gamma, d, "final_ln.gamma");
    detail::check_tensor_vec(final_ln.beta, d, "final_ln.beta");
    detail::check_tensor(unembed, d, config.vocab_size, "unembed");
    if (unembed_bias)
        detail::check_tensor_vec(*unembed_bias, config.vocab_size, "unembed_bias");
}

template <class S>
template <class T>
ModelBundle<T> ModelBundle<S>::cast() const {
    ModelBundle<T> out;
    out.config = config;
    out.token_embed = token_embed.template cast<T>();
    out.pos_embed = pos_embed.template cast<T>();
    out.layers.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& src = layers[l];
        auto& dst = out.layers[l];
        dst.ln1 = {src.ln1.gamma.template cast<T>(), src.ln1.beta.template cast<T>()};
        dst.ln2 = {src.ln2.gamma.template cast<T>(), src.ln2.beta.template cast<T>()};
        for (const auto& hw : src.heads)
            dst.heads.push_back({hw.wq.template cast<T>(), hw.wk.template cast<T>(),
                                 hw.wv.template cast<T>(), hw.wo.template cast<T>()});
        if (src.attn_bias) dst.attn_bias = src.attn_bias->template cast<T>();
        dst.mlp = {src.mlp.w_in.template cast<T>(), src.mlp.b_in.template cast<T>(),
                   src.mlp.w_out.template cast<T>(), src.mlp.b_out.template cast<T>()};
    }
    out.final_ln = {final_ln.gamma.template cast<T>(),
                    final_ln.beta.template cast<T>()};
    out.unembed = unembed.template cast<T>();
    if (unembed_bias) out.unembed_bias = unembed_bias->template cast<T>();
    return out;
}

namespace detail {

// Row-wise LayerNorm over a T×d activation block.
template <class S>
Mat<S> ln_rows(const Mat<S>& x, const LayerNormParams<S>& p, S eps,
               Vec<S>* means = nullptr, Vec<S>* inv_stds = nullptr) {
    Mat<S> out(x.rows(), x.cols());
    if (means) means->resize(x.rows());
    if (inv_stds) inv_stds->resize(x.rows());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        auto [row, stats] =
            layer_norm<S>(x.row(t).transpose(), p.gamma, p.beta, eps);
        out.row(t) = row.transpose();
        if (means) (*means)[t] = stats.mean;
        if (inv_stds) (*inv_stds)[t] = stats.inv_std;
    }
    return out;
}

// Extra attention-mask cells on top of the causal mask.
struct AttnBlockMask {
    Mat<bool> blocked;        // T×T, true = forbid (dest, src)
    bool renormalize = true;  // false: zero cells after an unmasked softmax
};

// Observer protocol for run_pass. The same arithmetic path serves the plain
// forward pass (NullObserver) and the recording/intervening traced pass, so
// their outputs are bit-identical by construction.
template <class S>
struct NullObserver {
    const AttnBlockMask* attn_mask(int /*layer*/) const { return nullptr; }
    void on_z0(Mat<S>& /*z0*/) {}
    void on_head(int /*l*/, int /*h*/, const Mat<S>& /*probs*/,
                 const Mat<S>& /*src_write*/, Mat<S>& /*head_out*/) {}
    void on_attn_bias(int /*l*/, const Vec<S>* /*bias*/) {}
    void on_mlp(int /*l*/, Mat<S>& /*mlp_out*/) {}
    void on_resid(int /*l_plus_1*/, const Mat<S>& /*z*/) {}
    void on_final(const Vec<S>& /*means*/, const Vec<S>& /*inv_stds*/,
                  const Mat<S>& /*logits*/) {}
};

// One full pass. Per head, the context at destination t is accumulated as an
// ascending-source sum of probs(t,s) * src_write.row(s); keeping this order
// everywhere is what makes the per-source trace decomposition reproduce the
// head output exactly.
template <class S, class Obs>
Mat<S> run_pass(const ModelBundle<S>& m, std::span<const int> tokens, Obs& obs) {
    const auto& cfg = m.config;
    const int T = static_cast<int>(tokens.size());
    if (T == 0) throw std::invalid_argument("forward: empty token sequence");
    if (T > cfg.max_seq)
        throw std::invalid_argument(
            cat("forward: sequence length ", T, " exceeds max_seq ", cfg.max_seq));
    for (int t = 0; t < T; ++t)
        if (tokens[t] < 0 || tokens[t] >= cfg.vocab_size)
            throw std::out_of_range(cat("forward: token id ", tokens[t],
                                        " outside vocab of ", cfg.vocab_size));

    const S eps = static_cast<S>(cfg.ln_eps);
    const S scale = S(1) / std::sqrt(static_cast<S>(cfg.d_head));

    Mat<S> z(T, cfg.d_model);
    for (int t = 0; t < T; ++t)
        z.row(t) = m.token_embed.row(tokens[t]) + m.pos_embed.row(t);
    obs.on_z0(z);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = m.layers[l];
        const Mat<S> x_att = ln_rows<S>(z, lw.ln1, eps);
        const AttnBlockMask* block = obs.attn_mask(l);

        Mat<S> attn_total = Mat<S>::Zero(T, cfg.d_model);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const auto& hw = lw.heads[h];
            const Mat<S> q = x_att * hw.wq;
            const Mat<S> k = x_att * hw.wk;
            const Mat<S> v = x_att * hw.wv;
            Mat<S> scores = q * k.transpose() * scale;

            Mat<S> probs = Mat<S>::Zero(T, T);
            for (int t = 0; t < T; ++t) {
                BoolVec mask = BoolVec::Constant(T, false);
                for (int s = 0; s <= t; ++s) mask[s] = true;
                if (block != nullptr && block->renormalize)
                    for (int s = 0; s <= t; ++s)
                        if (block->blocked(t, s)) mask[s] = false;
                Vec<S> row = softmax<S>(scores.row(t).transpose(), &mask);
                if (block != nullptr && !block->renormalize)
                    for (int s = 0; s <= t; ++s)
                        if (block->blocked(t, s)) row[s] = S(0);
                probs.row(t) = row.transpose();
            }

            const Mat<S> src_write = v * hw.wo;  // row s: source s's write vector
            Mat<S> head_out = Mat<S>::Zero(T, cfg.d_model);
            for (int t = 0; t < T; ++t)
                for (int s = 0; s <= t; ++s)
                    head_out.row(t) += probs(t, s) * src_write.row(s);

            obs.on_head(l, h, probs, src_write, head_out);
            attn_total += head_out;
        }
        if (lw.attn_bias) attn_total.rowwise() += lw.attn_bias->transpose();
        obs.on_attn_bias(l, lw.attn_bias ? &*lw.attn_bias : nullptr);

        if (cfg.residual_style == ResidualStyle::kParallel) {
            const Mat<S> x_mlp = ln_rows<S>(z, lw.ln2, eps);
            Mat<S> h = x_mlp * lw.mlp.w_in;
            h.rowwise() += lw.mlp.b_in.transpose();
            h = h.unaryExpr([](S v_) { return gelu(v_); });
            Mat<S> mlp_out = h * lw.mlp.w_out;
            mlp_out.rowwise() += lw.mlp.b_out.transpose();
            obs.on_mlp(l, mlp_out);
            z = z + attn_total + mlp_out;
        } else {
            const Mat<S> z_mid = z + attn_total;
            const Mat<S> x_mlp = ln_rows<S>(z_mid, lw.ln2, eps);
            Mat<S> h = x_mlp * lw.mlp.w_in;
            h.rowwise() += lw.mlp.b_in.transpose();
            h = h.unaryExpr([](S v_) { return gelu(v_); });
            Mat<S> mlp_out = h * lw.mlp.w_out;
            mlp_out.rowwise() += lw.mlp.b_out.transpose();
            obs.on_mlp(l, mlp_out);
            z = z_mid + mlp_out;
        }
        obs.on_resid(l + 1, z);
    }

    Vec<S> means, inv_stds;
    const Mat<S> y = ln_rows<S>(z, m.final_ln, eps, &means, &inv_stds);
    // Row-wise unembedding keeps this the same arithmetic as a single-row
    // logit-lens readout, so the two agree bit for bit.
    Mat<S> logits(T, cfg.vocab_size);
    for (int t = 0; t < T; ++t) logits.row(t) = y.row(t) * m.unembed;
    if (m.unembed_bias) logits.rowwise() += m.unembed_bias->transpose();
    obs.on_final(means, inv_stds, logits);
    return logits;
}

}  // namespace detail

// Plain forward pass: logits for every position, T×V.
template <class S>
Mat<S> forward(const ModelBundle<S>& m, std::span<const int> tokens) {
    detail::NullObserver<S> obs;
    return detail::run_pass(m, tokens, obs);
}

template <class S>
Mat<S> forward(const ModelBundle<S>& m, const std::vector<int>& tokens) {
    return forward(m, std::span<const int>(tokens));
}

// File layout used by load/save: config JSON, weights as a tensor container
// (payload + manifest), vocab text. Weights are stored float64 regardless of
// the in-memory scalar.
ModelBundle<double> load_weights(const ModelConfig& cfg,
                                 const std::filesystem::path& manifest_path,
                                 const std::filesystem::path& bin_path);
void save_weights(const ModelBundle<double>& m,
                  const std::filesystem::path& manifest_path,
                  const std::filesystem::path& bin_path);

template <class S = double>
LoadedModel<S> load_model(const std::filesystem::path& config_path,
                          const std::filesystem::path& weights_manifest_path,
                          const std::filesystem::path& vocab_path) {
    const ModelConfig cfg = ModelConfig::from_json_file(config_path);
    // Payload lives next to the manifest with a .bin extension.
    std::filesystem::path bin = weights_manifest_path;
    bin.replace_extension(".bin");
    ModelBundle<double> m = load_weights(cfg, weights_manifest_path, bin);
    Vocab vocab = Vocab::from_file(vocab_path);
    if (vocab.size() != cfg.vocab_size)
        throw std::runtime_error(cat("vocab has ", vocab.size(), " tokens but config says ",
                                     cfg.vocab_size));
    if constexpr (std::is_same_v<S, double>) {
        return {std::move(m), std::move(vocab)};
    } else {
        return {m.template cast<S>(), std::move(vocab)};
    }
}

// Writes config.json, weights.json + weights.bin, vocab.txt into `dir`.
void save_model(const ModelBundle<double>& m, const Vocab& vocab,
                const std::filesystem::path& dir);

}  // namespace recall
