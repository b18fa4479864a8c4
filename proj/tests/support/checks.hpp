#pragma once

// Shared oracle helpers for the test suites. Everything here is written
// independently of the library code paths it checks: finite differences for
// gradients, plain double-precision loops for reference values.

#include <cmath>
#include <functional>
#include <vector>

#include "certlab/rng.hpp"
#include "certlab/tensor.hpp"

namespace certlab::testing {

struct FdReport {
    double max_rel_error = 0.0;
    int checked = 0;
    int skipped = 0;
    int failed = 0;
    bool ok() const { return checked > 0 && failed == 0; }
};

// Central-difference check of d(fn)/d(param) for every tensor in `params`
// against the gradients produced by backward(). Samples up to `coords`
// coordinates across all parameters; a coordinate passes when
// |fd - grad| <= max(abs_floor, rel_tol * max(|fd|, |grad|)).
//
// Kink avoidance: when a coordinate fails, its second difference
// f(+h) - 2 f(0) + f(-h) is examined. For a smooth function that quantity is
// O(h^2) while the first difference is O(h); a ratio far above h therefore
// means the coordinate straddles a nondifferentiable point (relu/min/max
// switching), where central differences are meaningless, and the coordinate
// is skipped rather than failed. Genuine gradient bugs at smooth points keep
// failing.
inline FdReport finite_difference_check(std::vector<Tensor> params,
                                        const std::function<Tensor()>& fn,
                                        int coords,
                                        uint64_t seed = 1234,
                                        double h = 1e-3,
                                        double rel_tol = 1e-2,
                                        double abs_floor = 1e-4) {
    for (auto& p : params) p.zero_grad();
    Tensor loss = fn();
    backward(loss);

    std::vector<std::vector<float>> grads;
    grads.reserve(params.size());
    for (auto& p : params) {
        auto g = p.grad();
        grads.emplace_back(g.begin(), g.end());
        if (grads.back().empty())
            grads.back().assign(static_cast<size_t>(p.size()), 0.0f);
    }

    int64_t total = 0;
    for (auto& p : params) total += p.size();

    Rng rng(seed);
    FdReport report;
    int n = static_cast<int>(std::min<int64_t>(coords, total));
    for (int t = 0; t < n; ++t) {
        int64_t flat = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(total)));
        size_t pi = 0;
        while (flat >= params[pi].size()) {
            flat -= params[pi].size();
            ++pi;
        }
        float* slot = params[pi].mutable_data() + flat;
        float saved = *slot;
        double up, down, mid;
        {
            NoGradGuard ng;
            *slot = static_cast<float>(saved + h);
            up = fn().item();
            *slot = static_cast<float>(saved - h);
            down = fn().item();
            *slot = saved;
            mid = fn().item();
        }

        double fd = (up - down) / (2.0 * h);
        double an = grads[pi][static_cast<size_t>(flat)];
        double err = std::fabs(fd - an);
        double tol = std::max(abs_floor, rel_tol * std::max(std::fabs(fd), std::fabs(an)));
        if (err > tol) {
            double second = std::fabs(up - 2.0 * mid + down);
            double first = std::fabs(up - down);
            if (second > 0.05 * std::max(first, 1e-9)) {
                report.skipped += 1;
                continue;
            }
            report.failed += 1;
        }
        report.checked += 1;
        double denom = std::max({std::fabs(fd), std::fabs(an), 1e-12});
        report.max_rel_error = std::max(report.max_rel_error, err / denom);
    }
    return report;
}

inline Tensor random_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f,
                            bool requires_grad = false) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    std::vector<float> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.next_float(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Owning copy of a tensor's values; use whenever the tensor is a temporary
// (Tensor::values() is a view into storage the tensor keeps alive).
inline std::vector<float> to_vec(const Tensor& t) {
    auto v = t.values();
    return std::vector<float>(v.begin(), v.end());
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

} // namespace certlab::testing
