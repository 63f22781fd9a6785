#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "recall/model.hpp"
#include "recall/types.hpp"

namespace recall {

// How much per-source structure a trace keeps. Full storage is
// O(L·H·T²·d_model) - about 100 MB at 64-bit for L=6, H=8, T=32, d=128,
// trivial at the scales used here. Lean mode keeps per-source writes only
// for the final destination position.
enum class TraceDepth { kFull, kLeanEnd };

// In-pass intervention directives applied during a traced forward pass.
// Component patches replace an output vector before it enters the residual
// stream, so downstream effects propagate. For a replaced head output the
// recorded per-source decomposition attributes the whole replacement vector
// to the destination position itself (a patched output has no source split).
template <class S>
struct HookSet {
    struct ZeroHead {
        int layer = 0, head = 0;
    };
    struct MeanHead {
        int layer = 0, head = 0;
        Vec<S> value;                              // d_model
        std::optional<std::vector<int>> positions;  // default: every position
    };
    struct PatchRow {
        ComponentId component;  // head, mlp or embed
        int position = 0;
        Vec<S> value;  // d_model
    };
    struct AttnBlock {
        std::vector<int> dest_positions;
        std::vector<int> src_positions;
        std::optional<std::pair<int, int>> layer_range;  // inclusive; default all
        bool renormalize = true;  // false: zero after softmax, rows sum < 1
    };

    std::vector<ZeroHead> zero_heads;
    std::vector<MeanHead> mean_heads;
    std::vector<PatchRow> patches;
    std::vector<AttnBlock> attn_blocks;

    bool empty() const {
        return zero_heads.empty() && mean_heads.empty() && patches.empty() &&
               attn_blocks.empty();
    }

    void validate(const ModelConfig& cfg, int seq_len) const;
};

// Complete record of one forward pass: residual checkpoints z^0..z^L,
// attention probabilities, per-head outputs decomposed by source position,
// MLP outputs, frozen final-LayerNorm statistics and logits. Immutable once
// built; safe to share across threads.
template <class S>
struct Trace {
    ModelConfig config;
    std::vector<int> tokens;
    TraceDepth depth = TraceDepth::kFull;

    std::vector<Mat<S>> resid;                    // L+1 checkpoints, each T×d
    std::vector<Mat<S>> attn;                     // L·H matrices, each T×T
    std::vector<std::vector<Mat<S>>> head_src;    // [L·H][dest] -> T×d src writes
    std::vector<Mat<S>> head_outputs;             // L·H matrices, each T×d
    std::vector<std::optional<Vec<S>>> attn_bias; // copy of each layer's bias
    std::vector<Mat<S>> mlp_outputs;              // L matrices, each T×d
    Vec<S> final_ln_mean;                         // per position
    Vec<S> final_ln_inv_std;                      // per position
    Mat<S> logits;                                // T×V

    int seq_len() const { return static_cast<int>(tokens.size()); }

    const Mat<S>& resid_at(int layer) const {
        if (layer < 0 || layer > config.n_layers)
            throw std::out_of_range(cat("trace: residual layer ", layer));
        return resid[static_cast<std::size_t>(layer)];
    }
    const Mat<S>& attn_prob(int layer, int head) const {
        return attn[index(layer, head)];
    }
    const Mat<S>& head_out(int layer, int head) const {
        return head_outputs[index(layer, head)];
    }
    // Per-source writes into destination `dest`: row s holds the term
    // attn_prob(dest, s) * LN(z_s) W_V W_O; rows above the diagonal are zero.
    const Mat<S>& head_sources(int layer, int head, int dest) const {
        const auto& slices = head_src[index(layer, head)];
        if (dest < 0 || dest >= seq_len())
            throw std::out_of_range(cat("trace: dest position ", dest));
        if (depth == TraceDepth::kLeanEnd) {
            if (dest != seq_len() - 1)
                throw std::logic_error(
                    "trace: per-source writes for non-final positions were not "
                    "recorded (lean trace)");
            return slices[0];
        }
        return slices[static_cast<std::size_t>(dest)];
    }
    const Mat<S>& mlp_out(int layer) const {
        if (layer < 0 || layer >= config.n_layers)
            throw std::out_of_range(cat("trace: mlp layer ", layer));
        return mlp_outputs[static_cast<std::size_t>(layer)];
    }

    std::size_t index(int layer, int head) const {
        if (layer < 0 || layer >= config.n_layers || head < 0 ||
            head >= config.n_heads)
            throw std::out_of_range(
                cat("trace: head (", layer, ",", head, ") out of range"));
        return static_cast<std::size_t>(layer) *
                   static_cast<std::size_t>(config.n_heads) +
               static_cast<std::size_t>(head);
    }
};

template <class S>
void HookSet<S>::validate(const ModelConfig& cfg, int seq_len) const {
    auto check_head = [&](int l, int h) {
        if (l < 0 || l >= cfg.n_layers || h < 0 || h >= cfg.n_heads)
            throw std::invalid_argument(
                cat("hook targets invalid head (", l, ",", h, ")"));
    };
    auto check_pos = [&](int p) {
        if (p < 0 || p >= seq_len)
            throw std::invalid_argument(cat("hook targets invalid position ", p));
    };
    for (const auto& zh : zero_heads) check_head(zh.layer, zh.head);
    for (const auto& mh : mean_heads) {
        check_head(mh.layer, mh.head);
        if (mh.value.size() != cfg.d_model)
            throw std::invalid_argument("mean_head replacement has wrong width");
        if (mh.positions)
            for (int p : *mh.positions) check_pos(p);
    }
    for (const auto& p : patches) {
        check_pos(p.position);
        if (p.value.size() != cfg.d_model)
            throw std::invalid_argument("patch vector has wrong width");
        switch (p.component.kind) {
            case ComponentId::Kind::kHead:
                check_head(p.component.layer, p.component.head_index);
                break;
            case ComponentId::Kind::kMlp:
                if (p.component.layer < 0 || p.component.layer >= cfg.n_layers)
                    throw std::invalid_argument(
                        cat("hook targets invalid mlp layer ", p.component.layer));
                break;
            case ComponentId::Kind::kEmbed:
                break;
            case ComponentId::Kind::kBias:
                throw std::invalid_argument("bias pseudo-component cannot be patched");
        }
    }
    for (const auto& b : attn_blocks) {
        for (int p : b.dest_positions) check_pos(p);
        for (int p : b.src_positions) check_pos(p);
        if (b.layer_range) {
            auto [lo, hi] = *b.layer_range;
            if (lo < 0 || hi >= cfg.n_layers || lo > hi)
                throw std::invalid_argument("attn_block layer range invalid");
        }
        // A destination row must keep at least one unmasked source.
        if (b.renormalize) {
            std::vector<bool> blocked_src(static_cast<std::size_t>(seq_len), false);
            for (int s : b.src_positions) blocked_src[static_cast<std::size_t>(s)] = true;
            for (int d : b.dest_positions) {
                bool any = false;
                for (int s = 0; s <= d && !any; ++s)
                    if (!blocked_src[static_cast<std::size_t>(s)]) any = true;
                if (!any)
                    throw std::invalid_argument(
                        cat("attention knockout leaves position ", d,
                            " with empty support"));
            }
        }
    }
}

namespace detail {

template <class S>
class TraceObserver {
  public:
    TraceObserver(const ModelBundle<S>& m, int seq_len, const HookSet<S>* hooks,
                  TraceDepth depth, Trace<S>& out)
        : model_(m), T_(seq_len), hooks_(hooks), out_(out) {
        const auto& cfg = m.config;
        out_.config = cfg;
        out_.depth = depth;
        out_.resid.resize(static_cast<std::size_t>(cfg.n_layers) + 1);
        out_.attn.resize(heads_total());
        out_.head_src.resize(heads_total());
        out_.head_outputs.resize(heads_total());
        out_.attn_bias.resize(static_cast<std::size_t>(cfg.n_layers));
        out_.mlp_outputs.resize(static_cast<std::size_t>(cfg.n_layers));
        if (hooks_ != nullptr) build_masks();
    }

    const AttnBlockMask* attn_mask(int layer) const {
        if (masks_.empty()) return nullptr;
        const auto& m = masks_[static_cast<std::size_t>(layer)];
        return m.has_value() ? &*m : nullptr;
    }

    void on_z0(Mat<S>& z0) {
        if (hooks_ != nullptr)
            for (const auto& p : hooks_->patches)
                if (p.component.kind == ComponentId::Kind::kEmbed)
                    z0.row(p.position) = p.value.transpose();
        out_.resid[0] = z0;
    }

    void on_head(int l, int h, const Mat<S>& probs, const Mat<S>& src_write,
                 Mat<S>& head_out) {
        std::vector<int> replaced = apply_head_hooks(l, h, head_out);
        const std::size_t idx = out_.index(l, h);
        out_.attn[idx] = probs;
        out_.head_outputs[idx] = head_out;

        auto& slices = out_.head_src[idx];
        const bool lean = out_.depth == TraceDepth::kLeanEnd;
        slices.resize(lean ? 1 : static_cast<std::size_t>(T_));
        for (int t = lean ? T_ - 1 : 0; t < T_; ++t) {
            Mat<S> slice = Mat<S>::Zero(T_, model_.config.d_model);
            if (std::find(replaced.begin(), replaced.end(), t) != replaced.end()) {
                slice.row(t) = head_out.row(t);  // replacement owns the whole write
            } else {
                for (int s = 0; s <= t; ++s)
                    slice.row(s) = probs(t, s) * src_write.row(s);
            }
            slices[lean ? 0 : static_cast<std::size_t>(t)] = std::move(slice);
        }
    }

    void on_attn_bias(int l, const Vec<S>* bias) {
        if (bias != nullptr) out_.attn_bias[static_cast<std::size_t>(l)] = *bias;
    }

    void on_mlp(int l, Mat<S>& mlp_out) {
        if (hooks_ != nullptr)
            for (const auto& p : hooks_->patches)
                if (p.component.kind == ComponentId::Kind::kMlp &&
                    p.component.layer == l)
                    mlp_out.row(p.position) = p.value.transpose();
        out_.mlp_outputs[static_cast<std::size_t>(l)] = mlp_out;
    }

    void on_resid(int l_plus_1, const Mat<S>& z) {
        out_.resid[static_cast<std::size_t>(l_plus_1)] = z;
    }

    void on_final(const Vec<S>& means, const Vec<S>& inv_stds, const Mat<S>& logits) {
        out_.final_ln_mean = means;
        out_.final_ln_inv_std = inv_stds;
        out_.logits = logits;
    }

  private:
    std::size_t heads_total() const {
        return static_cast<std::size_t>(model_.config.n_layers) *
               static_cast<std::size_t>(model_.config.n_heads);
    }

    void build_masks() {
        if (hooks_->attn_blocks.empty()) return;
        masks_.resize(static_cast<std::size_t>(model_.config.n_layers));
        for (const auto& b : hooks_->attn_blocks) {
            int lo = 0, hi = model_.config.n_layers - 1;
            if (b.layer_range) std::tie(lo, hi) = *b.layer_range;
            for (int l = lo; l <= hi; ++l) {
                auto& m = masks_[static_cast<std::size_t>(l)];
                if (!m.has_value()) {
                    m.emplace();
                    m->blocked = Mat<bool>::Constant(T_, T_, false);
                    m->renormalize = b.renormalize;
                }
                if (m->renormalize != b.renormalize)
                    throw std::invalid_argument(
                        "conflicting knockout renormalization modes in one layer");
                for (int d : b.dest_positions)
                    for (int s : b.src_positions) m->blocked(d, s) = true;
            }
        }
    }

    // Returns the destination rows whose output vector was replaced.
    std::vector<int> apply_head_hooks(int l, int h, Mat<S>& head_out) {
        std::vector<int> replaced;
        if (hooks_ == nullptr) return replaced;
        for (const auto& zh : hooks_->zero_heads)
            if (zh.layer == l && zh.head == h) {
                head_out.setZero();
                for (int t = 0; t < T_; ++t) replaced.push_back(t);
            }
        for (const auto& mh : hooks_->mean_heads)
            if (mh.layer == l && mh.head == h) {
                if (mh.positions) {
                    for (int t : *mh.positions) {
                        head_out.row(t) = mh.value.transpose();
                        replaced.push_back(t);
                    }
                } else {
                    for (int t = 0; t < T_; ++t) {
                        head_out.row(t) = mh.value.transpose();
                        replaced.push_back(t);
                    }
                }
            }
        for (const auto& p : hooks_->patches)
            if (p.component.kind == ComponentId::Kind::kHead &&
                p.component.layer == l && p.component.head_index == h) {
                head_out.row(p.position) = p.value.transpose();
                replaced.push_back(p.position);
            }
        return replaced;
    }

    const ModelBundle<S>& model_;
    int T_;
    const HookSet<S>* hooks_;
    Trace<S>& out_;
    std::vector<std::optional<AttnBlockMask>> masks_;
};

}  // namespace detail

// Forward pass with full activation capture. With empty hooks the logits are
// bit-identical to forward(): both run the same kernel.
template <class S>
Trace<S> traced_forward(const ModelBundle<S>& m, std::span<const int> tokens,
                        const std::type_identity_t<HookSet<S>>* hooks = nullptr,
                        TraceDepth depth = TraceDepth::kFull) {
    if (hooks != nullptr) {
        if (hooks->empty()) hooks = nullptr;
        else hooks->validate(m.config, static_cast<int>(tokens.size()));
    }
    Trace<S> tr;
    tr.tokens.assign(tokens.begin(), tokens.end());
    detail::TraceObserver<S> obs(m, static_cast<int>(tokens.size()), hooks, depth, tr);
    detail::run_pass(m, tokens, obs);
    return tr;
}

template <class S>
Trace<S> traced_forward(const ModelBundle<S>& m, const std::vector<int>& tokens,
                        const std::type_identity_t<HookSet<S>>* hooks = nullptr,
                        TraceDepth depth = TraceDepth::kFull) {
    return traced_forward(m, std::span<const int>(tokens), hooks, depth);
}

// Max absolute error of the residual recurrence recomputed from the recorded
// pieces: resid[l+1] vs resid[l] + Σ_h head_out + attn_bias + mlp_out.
template <class S>
S reconstruction_error(const Trace<S>& tr) {
    S worst = S(0);
    for (int l = 0; l < tr.config.n_layers; ++l) {
        Mat<S> expect = tr.resid_at(l);
        for (int h = 0; h < tr.config.n_heads; ++h) expect += tr.head_out(l, h);
        const auto& bias = tr.attn_bias[static_cast<std::size_t>(l)];
        if (bias.has_value()) expect.rowwise() += bias->transpose();
        expect += tr.mlp_out(l);
        worst = std::max(worst, (tr.resid_at(l + 1) - expect).cwiseAbs().maxCoeff());
    }
    return worst;
}

}  // namespace recall
