#pragma once

#include <cmath>
#include <string>

#include "dmatch/density.hpp"
#include "dmatch/tensor.hpp"

namespace dmatch {

enum class DivergenceKind { None, Jsd, MmdConstant, MmdBandwidth };

inline const char* divergence_kind_name(DivergenceKind k) {
    switch (k) {
        case DivergenceKind::None: return "none";
        case DivergenceKind::Jsd: return "jsd";
        case DivergenceKind::MmdConstant: return "mmd-c";
        case DivergenceKind::MmdBandwidth: return "mmd-b";
    }
    return "?";
}

inline DivergenceKind parse_divergence_kind(const std::string& s) {
    if (s == "none") return DivergenceKind::None;
    if (s == "jsd") return DivergenceKind::Jsd;
    if (s == "mmd-c") return DivergenceKind::MmdConstant;
    if (s == "mmd-b") return DivergenceKind::MmdBandwidth;
    throw ShapeError("unknown divergence kind: " + s);
}

struct DivergenceConfig {
    DivergenceKind kind = DivergenceKind::Jsd;
    double lambda = 0.01;
    double mmd_constant_sigma = 1.0;  // MMD-C only
};

// Finite-support distribution; probabilities live in the graph so that
// divergences stay differentiable down to the features that produced them.
class DiscreteDist {
public:
    explicit DiscreteDist(Tensor probs) : probs_(std::move(probs)) {
        if (probs_.rank() != 1 || probs_.numel() < 1) {
            throw ShapeError("DiscreteDist: probabilities must be a non-empty vector");
        }
        double total = 0.0;
        for (double p : probs_.data()) {
            if (!(p >= 0.0)) throw NumericError("DiscreteDist: negative or NaN probability");
            total += p;
        }
        if (std::abs(total - 1.0) > 1e-9) {
            throw NumericError("DiscreteDist: probabilities sum to " + std::to_string(total));
        }
    }

    const Tensor& probs() const { return probs_; }
    std::size_t size() const { return probs_.numel(); }

private:
    Tensor probs_;
};

// Stable softmax of a vector of scores (differentiable, shift-invariant).
inline Tensor softmax(const Tensor& scores) {
    if (scores.rank() != 1) throw ShapeError("softmax: need a vector");
    return vexp(sub(scores, logsumexp(scores)));
}

// Evaluate the KDE at S shared support points and softmax-normalize into a
// finite-support stand-in for the continuous density.
inline DiscreteDist kde_to_discrete(const KdeModel& model, const Tensor& eval_points) {
    if (eval_points.rank() != 2 || eval_points.shape()[0] < 2) {
        throw ShapeError("kde_to_discrete: need at least 2 eval points");
    }
    return DiscreteDist(softmax(model.log_density(eval_points)));
}

// KL divergence in nats with the 0*log(0/q) = 0 convention. q_i = 0 where
// p_i > 0 means the divergence is infinite and is reported as an error
// (softmax-produced distributions can never trigger it).
inline Tensor kl(const DiscreteDist& p, const DiscreteDist& q) {
    if (p.size() != q.size()) throw ShapeError("kl: support size mismatch");
    const Tensor& pt = p.probs();
    const Tensor& qt = q.probs();
    Tensor out = detail::result_node("kl", {}, {&pt, &qt});
    const auto pd = pt.data();
    const auto qd = qt.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < pd.size(); ++i) {
        if (pd[i] > 0.0) {
            if (qd[i] == 0.0) {
                throw NumericError("kl: divergence infinite (q=0 where p>0 at index " +
                                   std::to_string(i) + ")");
            }
            acc += pd[i] * std::log(pd[i] / qd[i]);
        }
    }
    out.node()->data[0] = acc;
    if (out.requires_grad()) {
        auto pn = pt.node();
        auto qn = qt.node();
        out.node()->backprop = [pn, qn](detail::TensorNode& self) {
            const double g = self.grad[0];
            if (pn->requires_grad) pn->ensure_grad();
            if (qn->requires_grad) qn->ensure_grad();
            for (std::size_t i = 0; i < pn->data.size(); ++i) {
                if (pn->data[i] > 0.0) {
                    if (pn->requires_grad) {
                        pn->grad[i] += g * (std::log(pn->data[i] / qn->data[i]) + 1.0);
                    }
                    if (qn->requires_grad) qn->grad[i] -= g * pn->data[i] / qn->data[i];
                }
            }
        };
    }
    return out;
}

// JSD[p,q] = (KL[p,M] + KL[q,M]) / 2 with M = (p+q)/2; symmetric by
// construction and bounded by [0, ln 2].
inline Tensor jsd(const DiscreteDist& p, const DiscreteDist& q) {
    if (p.size() != q.size()) throw ShapeError("jsd: support size mismatch");
    DiscreteDist m(mul(add(p.probs(), q.probs()), 0.5));
    return mul(add(kl(p, m), kl(q, m)), 0.5);
}

// Biased (V-statistic) squared MMD with a Gaussian kernel of width sigma.
inline Tensor mmd2(const Tensor& x, const Tensor& y, double sigma) {
    if (!(sigma > 0.0)) throw NumericError("mmd2: sigma must be positive");
    if (x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[1]) {
        throw ShapeError("mmd2: need [n,d] and [m,d] with matching d");
    }
    const double scale = -1.0 / (2.0 * sigma * sigma);
    auto kxx = mean(vexp(mul(pairwise_sqdist(x, x), scale)));
    auto kyy = mean(vexp(mul(pairwise_sqdist(y, y), scale)));
    auto kxy = mean(vexp(mul(pairwise_sqdist(x, y), scale)));
    return sub(add(kxx, kyy), mul(kxy, 2.0));
}

namespace detail {

// One-hot [B,C,H,W] constant from integer labels [B,H,W]; validates ids.
inline Tensor one_hot_labels(const Tensor& labels, std::size_t num_classes) {
    if (labels.rank() != 3) throw ShapeError("labels must be [B,H,W]");
    const std::size_t B = labels.shape()[0], H = labels.shape()[1], W = labels.shape()[2];
    Tensor onehot = Tensor::zeros({B, num_classes, H, W});
    auto dst = onehot.node()->data.data();
    const auto src = labels.data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t p = 0; p < H * W; ++p) {
            const double v = src[b * H * W + p];
            if (v != std::floor(v) || v < 0.0 || v >= static_cast<double>(num_classes)) {
                throw ShapeError("label id " + std::to_string(v) + " out of range for " +
                                 std::to_string(num_classes) + " classes");
            }
            dst[(b * num_classes + static_cast<std::size_t>(v)) * H * W + p] = 1.0;
        }
    }
    return onehot;
}

}  // namespace detail

// Mean per-pixel cross-entropy via log-softmax over the channel axis.
inline Tensor segmentation_loss(const Tensor& logits, const Tensor& labels) {
    if (logits.rank() != 4) throw ShapeError("segmentation_loss: logits must be [B,C,H,W]");
    const std::size_t C = logits.shape()[1];
    if (labels.rank() != 3 || labels.shape()[0] != logits.shape()[0] ||
        labels.shape()[1] != logits.shape()[2] || labels.shape()[2] != logits.shape()[3]) {
        throw ShapeError("segmentation_loss: labels must be [B,H,W] matching logits");
    }
    auto onehot = detail::one_hot_labels(labels, C);
    auto lse = logsumexp(logits, {1});                    // [B,H,W]
    auto true_logit = sum(mul(logits, onehot), {1});      // [B,H,W]
    return mean(sub(lse, true_logit));
}

// Soft Dice loss (1 - mean per-class soft Dice); selectable alternative to
// cross-entropy for sensitivity checks.
inline Tensor dice_loss(const Tensor& logits, const Tensor& labels, double eps = 1e-6) {
    if (logits.rank() != 4) throw ShapeError("dice_loss: logits must be [B,C,H,W]");
    const std::size_t C = logits.shape()[1];
    auto onehot = detail::one_hot_labels(labels, C);
    auto probs = softmax_channels(logits);
    auto inter = sum(mul(probs, onehot), {0, 2, 3});  // [C]
    auto psum = sum(probs, {0, 2, 3});
    auto tsum = sum(onehot, {0, 2, 3});
    auto dice = vdiv(add(mul(inter, 2.0), eps), add(add(psum, tsum), eps));
    return sub(1.0, mean(dice));
}

// L = L_seg + lambda * divergence; NONE ignores the divergence term.
inline Tensor combined_loss(const Tensor& seg, const Tensor& div, const DivergenceConfig& cfg) {
    if (!std::isfinite(seg.item())) throw NumericError("combined_loss: non-finite segmentation term");
    if (cfg.kind == DivergenceKind::None) return seg;
    if (!std::isfinite(cfg.lambda)) throw NumericError("combined_loss: non-finite lambda");
    if (cfg.lambda == 0.0) return seg;
    if (!std::isfinite(div.item())) throw NumericError("combined_loss: non-finite divergence term");
    return add(seg, mul(div, cfg.lambda));
}

}  // namespace dmatch
