#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string_view>
#include <utility>

#include "recall/common.hpp"

namespace recall {

// Dense row-major activation/weight matrix. Row-major so that per-position
// rows (residual vectors, logit rows) are contiguous.
template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matd = Mat<double>;
using Vecd = Vec<double>;
using Matf = Mat<float>;
using Vecf = Vec<float>;

using BoolVec = Eigen::Array<bool, Eigen::Dynamic, 1>;

template <class S>
void require_finite(const Eigen::Ref<const Mat<S>>& m, std::string_view name) {
    if (!m.allFinite())
        throw std::runtime_error(cat("non-finite value in ", name));
}

template <class S>
void require_finite_vec(const Vec<S>& v, std::string_view name) {
    if (!v.allFinite())
        throw std::runtime_error(cat("non-finite value in ", name));
}

// Numerically stabilized softmax. Entries with mask[i] == false are treated
// as score -inf: they come back exactly 0 and take no part in the
// normalization. Throws if every entry is masked.
template <class S>
Vec<S> softmax(const Vec<S>& scores, const BoolVec* mask = nullptr) {
    const Eigen::Index n = scores.size();
    if (n == 0) throw std::invalid_argument("softmax: empty input");
    if (mask != nullptr && mask->size() != n)
        throw std::invalid_argument("softmax: mask size mismatch");

    S max_score = std::numeric_limits<S>::lowest();
    bool any = false;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (mask != nullptr && !(*mask)[i]) continue;
        any = true;
        max_score = std::max(max_score, scores[i]);
    }
    if (!any) throw std::invalid_argument("softmax: empty support");

    Vec<S> out = Vec<S>::Zero(n);
    S total = S(0);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (mask != nullptr && !(*mask)[i]) continue;
        out[i] = std::exp(scores[i] - max_score);
        total += out[i];
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        if (mask != nullptr && !(*mask)[i]) continue;
        out[i] /= total;
    }
    return out;
}

template <class S>
struct LnStats {
    S mean = S(0);
    S inv_std = S(1);
};

// LayerNorm over one vector: (x - mean) * inv_std ⊙ gamma + beta with
// inv_std = 1/sqrt(var + eps), population variance. The statistics are
// returned so callers can reuse them as frozen scaling factors.
template <class S>
std::pair<Vec<S>, LnStats<S>> layer_norm(const Vec<S>& x, const Vec<S>& gamma,
                                         const Vec<S>& beta, S eps) {
    const Eigen::Index n = x.size();
    if (n == 0) throw std::invalid_argument("layer_norm: empty input");
    if (gamma.size() != n || beta.size() != n)
        throw std::invalid_argument("layer_norm: parameter dimension mismatch");
    if (!(eps > S(0))) throw std::invalid_argument("layer_norm: eps must be positive");

    LnStats<S> stats;
    stats.mean = x.mean();
    const S var = (x.array() - stats.mean).square().sum() / S(n);
    stats.inv_std = S(1) / std::sqrt(var + eps);
    Vec<S> out =
        (((x.array() - stats.mean) * stats.inv_std) * gamma.array() + beta.array())
            .matrix();
    return {std::move(out), stats};
}

// tanh-approximation GELU (the erf-exact variant is deliberately not offered).
template <class S>
S gelu(S x) {
    const S k = S(0.7978845608028653558798921198687637369517);  // sqrt(2/pi)
    return S(0.5) * x * (S(1) + std::tanh(k * (x + S(0.044715) * x * x * x)));
}

template <class S>
Vec<S> gelu(const Vec<S>& x) {
    return x.unaryExpr([](S v) { return gelu(v); });
}

// 0-based rank of `token` in `logits`: the number of tokens with strictly
// greater logit, plus the number of equal-logit tokens with a lower id.
// The tie rule makes ranks a permutation of 0..V-1 for any input.
template <class S>
int rank_of(const Vec<S>& logits, int token) {
    if (token < 0 || token >= logits.size())
        throw std::out_of_range(cat("rank_of: token ", token, " outside vocab of ",
                                    logits.size()));
    const S v = logits[token];
    int rank = 0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        if (logits[i] > v) ++rank;
        else if (logits[i] == v && i < token) ++rank;
    }
    return rank;
}

}  // namespace recall
