#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "dmatch/tensor.hpp"

namespace dmatch {

enum class BandwidthMode { MeanNnDistance, MeanNnSquared };

inline const char* bandwidth_mode_name(BandwidthMode m) {
    return m == BandwidthMode::MeanNnDistance ? "mean-nn-distance" : "mean-nn-squared";
}

inline BandwidthMode parse_bandwidth_mode(const std::string& s) {
    if (s == "mean-nn-distance") return BandwidthMode::MeanNnDistance;
    if (s == "mean-nn-squared") return BandwidthMode::MeanNnSquared;
    throw ShapeError("unknown bandwidth mode: " + s);
}

struct DegenerateBandwidth : NumericError {
    using NumericError::NumericError;
};

inline double bandwidth_floor(std::size_t dim) {
    return 1e-6 * std::sqrt(static_cast<double>(dim));
}

// Mean nearest-neighbor distance over sample rows [N,d] (or mean squared
// distance). Nearest neighbor is the closest *other* row under Euclidean
// distance, ties broken by lowest index. Degenerate banks (sigma would be 0)
// are rejected; callers that must keep running fall back to bandwidth_floor.
inline double estimate_bandwidth(const Tensor& samples,
                                 BandwidthMode mode = BandwidthMode::MeanNnDistance) {
    if (samples.rank() != 2) throw ShapeError("estimate_bandwidth: samples must be [N,d]");
    const std::size_t n = samples.shape()[0], d = samples.shape()[1];
    if (n < 2) throw ShapeError("estimate_bandwidth: need at least 2 samples");
    const double* rows = samples.data().data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double sq = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = rows[i * d + k] - rows[j * d + k];
                sq += diff * diff;
            }
            if (sq < best) best = sq;
        }
        acc += mode == BandwidthMode::MeanNnDistance ? std::sqrt(best) : best;
    }
    const double sigma = acc / static_cast<double>(n);
    if (sigma == 0.0) {
        throw DegenerateBandwidth("estimate_bandwidth: all nearest-neighbor distances are zero");
    }
    return std::max(sigma, bandwidth_floor(d));
}

// Gaussian KDE over flattened feature rows. The kernel is the fully
// normalized d-dimensional isotropic Gaussian, evaluated in log space;
// sigma is a constant with respect to the graph.
class KdeModel {
public:
    KdeModel(Tensor samples, double sigma) : samples_(std::move(samples)), sigma_(sigma) {
        if (samples_.rank() != 2) throw ShapeError("build_kde: samples must be [N,d]");
        if (samples_.shape()[0] < 2) throw ShapeError("build_kde: need at least 2 samples");
        if (!(sigma > 0.0) || !std::isfinite(sigma)) {
            throw NumericError("build_kde: bandwidth must be finite and positive");
        }
        for (double v : samples_.data()) {
            if (!std::isfinite(v)) throw NumericError("build_kde: non-finite sample value");
        }
        dim_ = samples_.shape()[1];
        log_norm_ = -static_cast<double>(dim_) * std::log(sigma_) -
                    0.5 * static_cast<double>(dim_) * std::log(2.0 * std::numbers::pi);
    }

    const Tensor& samples() const { return samples_; }
    std::size_t count() const { return samples_.shape()[0]; }
    std::size_t dim() const { return dim_; }
    double sigma() const { return sigma_; }
    double log_norm() const { return log_norm_; }

    // log p(q) for query rows [M,d] -> [M]. Differentiable w.r.t. queries and
    // samples whenever those tensors carry gradients.
    Tensor log_density(const Tensor& queries) const {
        if (queries.rank() != 2 || queries.shape()[1] != dim_) {
            throw ShapeError("log_density: queries must be [M," + std::to_string(dim_) + "], got " +
                             shape_str(queries.shape()));
        }
        auto sq = pairwise_sqdist(queries, samples_);
        auto logits = mul(sq, -1.0 / (2.0 * sigma_ * sigma_));
        auto lse = logsumexp(logits, {1});
        return add(lse, log_norm_ - std::log(static_cast<double>(count())));
    }

private:
    Tensor samples_;
    double sigma_;
    std::size_t dim_ = 0;
    double log_norm_ = 0.0;
};

inline KdeModel build_kde(Tensor samples, double sigma) { return KdeModel(std::move(samples), sigma); }

}  // namespace dmatch
