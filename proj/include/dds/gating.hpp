#pragma once

// Instance-wise feature gating: hard concrete gate, its noise-scaled
// stochastic relaxation, top-M binary mask construction and the dynamic-M
// budget schedule. All gate outputs live in [0, 1]; the binary mask is a
// gradient constant (straight-through), so parameter gradients reach the
// selector only through the soft scores.

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dds/tensor.hpp"

namespace dds {

enum class GateMode { train, eval };

struct GateConfig {
    double beta = 2.0 / 3.0;   // temperature
    double zeta = 1.0;         // stretch upper bound
    double gamma = 0.0;        // stretch lower bound
    double delta = 1.0;        // pre-activation shift
    double kappa = 0.1;        // noise scale (0.1 train / 0 eval)
    double epsilon = 0.1;      // dynamic-M probability
    std::size_t m = 1;         // feature budget
    GateMode mode = GateMode::train;

    void validate() const {
        if (!(beta > 0.0)) throw ConfigError("gate: beta must be > 0, got " + std::to_string(beta));
        if (kappa < 0.0 || kappa > 1.0)
            throw ConfigError("gate: kappa must lie in [0, 1], got " + std::to_string(kappa));
        if (epsilon < 0.0 || epsilon > 1.0)
            throw ConfigError("gate: epsilon must lie in [0, 1], got " + std::to_string(epsilon));
        if (m < 1) throw ConfigError("gate: m must be >= 1");
    }

    GateConfig for_eval() const {
        GateConfig c = *this;
        c.kappa = 0.0;
        c.mode = GateMode::eval;
        return c;
    }
};

namespace detail {

// stretch-and-clamp envelope shared by both gate paths so that the kappa = 0
// stochastic gate is bitwise identical to the hard gate
inline Tensor gate_envelope(const Tensor& sig, const GateConfig& cfg) {
    double span = cfg.zeta - cfg.gamma;
    if (span == 1.0 && cfg.gamma == 0.0) return clamp01(sig);
    return clamp01(add(mul(sig, Tensor::scalar(span)), Tensor::scalar(cfg.gamma)));
}

}  // namespace detail

// tau(x) = min(1, max(0, sigmoid(x / beta) * (zeta - gamma) + gamma))
inline Tensor hard_concrete(const Tensor& x, const GateConfig& cfg) {
    cfg.validate();
    return detail::gate_envelope(sigmoid(mul(x, Tensor::scalar(1.0 / cfg.beta))), cfg);
}

// Stochastic relaxation with explicit uniform draws (one per element, open
// interval). The logistic noise enters as an untracked constant, so the
// gradient flows through x only.
inline Tensor stochastic_gate(const Tensor& x, const GateConfig& cfg, const Tensor& u) {
    cfg.validate();
    if (u.shape() != x.shape())
        throw ShapeError("stochastic_gate: noise shape " + shape_str(u.shape()) + " does not match " +
                         shape_str(x.shape()));
    std::vector<double> noise(u.size());
    auto ud = u.data();
    for (std::size_t i = 0; i < noise.size(); ++i) {
        double uv = ud[i];
        if (uv <= 0.0 || uv >= 1.0)
            throw NumericError("stochastic_gate: uniform draw outside the open interval (0, 1)");
        noise[i] = cfg.kappa * (std::log(uv) - std::log(1.0 - uv));
    }
    Tensor shifted = add(x, Tensor(x.shape(), std::move(noise)));
    return detail::gate_envelope(sigmoid(mul(shifted, Tensor::scalar(1.0 / cfg.beta))), cfg);
}

inline Tensor stochastic_gate(const Tensor& x, const GateConfig& cfg, Rng& rng) {
    std::vector<double> u(x.size());
    for (double& v : u) v = rng.uniform01_open();
    return stochastic_gate(x, cfg, Tensor(x.shape(), std::move(u)));
}

// ---------------------------------------------------------------------------
// Top-M mask. Exactly min(m, F) ones per row, placed on the largest scores;
// ties break toward the lower feature index. Selection uses an O(F) partial
// partition over a strict (score desc, index asc) order.
// ---------------------------------------------------------------------------
inline Tensor topm_mask(const Tensor& scores, const std::vector<std::size_t>& effective_m) {
    const Shape& s = scores.shape();
    if (s.size() != 2) throw ShapeError("topm_mask: expected [B x F] scores, got " + shape_str(s));
    std::size_t B = s[0], F = s[1];
    if (effective_m.size() != B) throw ShapeError("topm_mask: effective_m length does not match batch");

    std::vector<double> mask(B * F, 0.0);
    auto sd = scores.data();
    std::vector<std::size_t> idx(F);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t m = effective_m[b];
        if (m < 1 || m > F)
            throw ConfigError("topm_mask: effective m " + std::to_string(m) + " outside [1, " +
                              std::to_string(F) + "]");
        const double* row = &sd[b * F];
        double* mrow = &mask[b * F];
        if (m == F) {
            std::fill(mrow, mrow + F, 1.0);
            continue;
        }
        std::iota(idx.begin(), idx.end(), 0);
        auto before = [row](std::size_t i, std::size_t j) {
            return row[i] > row[j] || (row[i] == row[j] && i < j);
        };
        std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(), before);
        for (std::size_t k = 0; k < m; ++k) mrow[idx[k]] = 1.0;
    }
    return Tensor({B, F}, std::move(mask));  // constant: no gradient through selection
}

// Dynamic budget: per instance, keep M with probability 1 - eps, otherwise
// temporarily lift the budget to all F features. Eval always M.
inline std::vector<std::size_t> dynamic_m(std::size_t batch_size, std::size_t feature_count,
                                          const GateConfig& cfg, Rng& rng) {
    cfg.validate();
    if (cfg.m > feature_count)
        throw ConfigError("dynamic_m: budget " + std::to_string(cfg.m) + " exceeds feature count " +
                          std::to_string(feature_count));
    std::vector<std::size_t> out(batch_size, cfg.m);
    if (cfg.mode == GateMode::eval) return out;
    for (std::size_t i = 0; i < batch_size; ++i) {
        double p = rng.uniform01_open();
        out[i] = p > cfg.epsilon ? cfg.m : feature_count;
    }
    return out;
}

// masked input: mask (.) scores (.) x, elementwise
inline Tensor apply_gate(const Tensor& x, const Tensor& scores, const Tensor& mask) {
    if (x.shape() != scores.shape() || x.shape() != mask.shape())
        throw ShapeError("apply_gate: shape mismatch among " + shape_str(x.shape()) + ", " +
                         shape_str(scores.shape()) + ", " + shape_str(mask.shape()));
    return mul(mul(scores, mask), x);
}

// Soft scores plus the binary mask actually applied to one batch.
struct SelectionMask {
    Tensor scores;                         // [B x F] in [0, 1]
    Tensor gamma_mask;                     // [B x F] binary, constant
    std::vector<std::size_t> effective_m;  // per-instance budget used

    std::size_t ones_in_row(std::size_t b) const {
        std::size_t F = gamma_mask.shape()[1];
        std::size_t n = 0;
        for (std::size_t j = 0; j < F; ++j)
            if (gamma_mask[b * F + j] == 1.0) ++n;
        return n;
    }
};

}  // namespace dds
