#pragma once

#include <span>
#include <vector>

#include "certlab/data.hpp"
#include "certlab/model.hpp"
#include "certlab/tensor.hpp"

namespace certlab {

// Axis-aligned input region: per-sample elementwise lower/upper, [B, in].
struct Box {
    Tensor lower;
    Tensor upper;

    // The l-infinity ball of radius eps around each row of `centers`,
    // intersected with the valid pixel range [0,1].
    static Box around(const Tensor& centers, double eps);

    int64_t batch() const { return lower.shape()[0]; }
};

// How unstable ReLUs are relaxed during backward substitution. Both modes
// use the chord from (l,0) to (u,u) as the upper line and pick the lower
// line slope adaptively (1 when u >= |l|, else 0); they are listed
// separately because they are configured separately by callers.
enum class RelaxationMode { crown_adaptive, deeppoly };

// Which bound computation backs a certification query.
//  ibp        - interval propagation only
//  crown_ibp  - backward linear bounds over interval intermediate bounds
//  crown_full - backward linear bounds over backward-computed intermediates
enum class BoundMethod { ibp, crown_ibp, crown_full };

// Where intermediate (per-layer pre-activation) bounds come from during
// backward substitution.
enum class Intermediates { ibp, full_backward };

// Pre-activation interval bounds per affine layer; lower[k]/upper[k] are
// [B, width of layer k].
struct LayerBounds {
    std::vector<Tensor> lower;
    std::vector<Tensor> upper;
};

// Per-logit linear bounds A_low x + c_low <= o(x) <= A_up x + c_up valid on
// a box, plus concretized per-logit intervals. Coefficient rows are grouped
// by sample: row s*classes + j bounds logit j of sample s.
struct LogitBounds {
    Tensor lower_coef; // [B*classes, in]
    Tensor lower_const; // [B*classes]
    Tensor upper_coef;
    Tensor upper_const;
    Tensor lower; // [B, classes], tightest of backward and interval bounds
    Tensor upper;
};

// Lower bounds on the class-separation margins o_y - o_i for each i != y
// (ascending i, skipping y): [B, classes-1]. Positive margins certify.
struct MarginBounds {
    Tensor lower;
    std::vector<int32_t> labels;
};

// Interval propagation through the network: affine layers map (mid, radius)
// to (W mid + b, |W| radius); ReLU clips the interval ends. Differentiable
// in the model parameters.
LayerBounds ibp_bounds(const Model& model, const Box& box);

// Backward linear bound propagation for every logit. Differentiable in the
// model parameters when intermediates come from interval propagation. The
// concretized intervals are intersected with the interval-propagation
// logit bounds, so they never come out looser.
LogitBounds crown_bounds(const Model& model, const Box& box,
                         RelaxationMode mode = RelaxationMode::crown_adaptive,
                         Intermediates intermediates = Intermediates::full_backward);

// Margin lower bounds for the given labels. The class-difference rows are
// folded into the final affine layer before bounding (last-layer elision).
// For crown methods the result is intersected with the interval-propagation
// margin, so crown_full >= crown_ibp >= ibp holds elementwise by
// construction. Differentiable for ibp and crown_ibp.
MarginBounds margin_lower_bounds(const Model& model, const Box& box,
                                 const std::vector<int32_t>& labels,
                                 BoundMethod method,
                                 RelaxationMode mode = RelaxationMode::crown_adaptive);

struct CertificationResult {
    int32_t predicted = -1;
    bool certified = false;
};

// Certifies robustness of the *predicted* class (argmax of the clean
// logits, ties to the lowest index and never certified): every margin lower
// bound over the eps-box must be strictly positive.
CertificationResult certify(const Model& model, std::span<const float> image,
                            double eps, BoundMethod method,
                            RelaxationMode mode = RelaxationMode::crown_adaptive);
std::vector<CertificationResult> certify_batch(
    const Model& model, const Tensor& images, double eps, BoundMethod method,
    RelaxationMode mode = RelaxationMode::crown_adaptive);

// Fraction of `data` whose prediction is certified at radius eps. Label
// independent. Throws on an empty dataset.
double certified_robustness(const Model& model, const Dataset& data, double eps,
                            BoundMethod method,
                            RelaxationMode mode = RelaxationMode::crown_adaptive,
                            int64_t batch_size = 128);

} // namespace certlab
