#include "certlab/bounds.hpp"

#include <cmath>

#include "certlab/errors.hpp"

namespace certlab {

namespace {

// ReLU relaxation lines for one layer, [B, n] each. Mask tensors are built
// from the bound *values* and enter the graph as constants: gradients flow
// through the line slopes/offsets (functions of l and u) but never through
// the stable/unstable classification or the adaptive slope switch.
struct Relaxation {
    Tensor slope_lo; // constant: 0/1 per neuron
    Tensor slope_up;
    Tensor offset_up;
};

Relaxation make_relaxation(const Tensor& l, const Tensor& u, RelaxationMode mode) {
    (void)mode; // both modes share the adaptive lower-slope rule
    auto lv = l.values();
    auto uv = u.values();
    size_t n = lv.size();
    std::vector<float> active(n), unstable(n), stable(n), adaptive(n);
    for (size_t i = 0; i < n; ++i) {
        bool act = lv[i] >= 0.0f;
        bool inact = !act && uv[i] <= 0.0f;
        active[i] = act ? 1.0f : 0.0f;
        unstable[i] = !act && !inact ? 1.0f : 0.0f;
        stable[i] = act || inact ? 1.0f : 0.0f;
        // Lower line x (slope 1) when the interval leans positive, else 0.
        adaptive[i] = uv[i] >= -lv[i] ? 1.0f : 0.0f;
    }
    Tensor act_t = Tensor::from_data(l.shape(), std::move(active));
    Tensor unst_t = Tensor::from_data(l.shape(), std::move(unstable));
    Tensor stab_t = Tensor::from_data(l.shape(), std::move(stable));

    // Chord slope u/(u-l) for unstable neurons; the +stable term keeps the
    // denominator away from zero where the mask will zero the result anyway.
    Tensor denom = add(sub(u, l), stab_t);
    Tensor chord = div(u, denom);
    Tensor slope_up = add(act_t, mul(unst_t, chord));
    Tensor offset_up = mul(unst_t, mul(chord, scale(l, -1.0f)));

    std::vector<float> lo_slope(n);
    for (size_t i = 0; i < n; ++i) {
        bool act = lv[i] >= 0.0f;
        bool inact = !act && uv[i] <= 0.0f;
        lo_slope[i] = act ? 1.0f : (inact ? 0.0f : adaptive[i]);
    }
    Tensor slope_lo = Tensor::from_data(l.shape(), std::move(lo_slope));
    return {slope_lo, slope_up, offset_up};
}

// A linear expression over some layer's activations, one row per bounded
// quantity, grouped by sample: coef is [B*R, n], offset is [B*R].
struct LinExpr {
    Tensor coef;
    Tensor offset;
    int64_t rows_per_sample;
};

// Substitutes z = relu(h) into the expression, producing an expression over
// h that lower-bounds (or upper-bounds) the original on the relaxation's
// validity region: positive coefficients keep the bound's own line, negative
// ones take the opposite line, and only the upper line carries an intercept.
LinExpr through_relu(const LinExpr& e, const Relaxation& r, bool upper) {
    int64_t rps = e.rows_per_sample;
    Tensor zero = Tensor::zeros(r.offset_up.shape());
    if (upper) {
        return {signed_mix(e.coef, r.slope_up, r.slope_lo, rps),
                add(e.offset, signed_dot(e.coef, r.offset_up, zero, rps)), rps};
    }
    return {signed_mix(e.coef, r.slope_lo, r.slope_up, rps),
            add(e.offset, signed_dot(e.coef, zero, r.offset_up, rps)), rps};
}

// Substitutes h = W z + b, producing an expression over z. The bias fold
// coef . b runs as a one-column matrix product to stay on the fast path.
LinExpr through_affine(const LinExpr& e, const Tensor& weight, const Tensor& bias) {
    Tensor fold = reshape(matmul(e.coef, reshape(bias, {bias.shape()[0], 1})),
                          {e.coef.shape()[0]});
    return {matmul(e.coef, weight), add(e.offset, fold), e.rows_per_sample};
}

// Extreme value of the expression over elementwise bounds [lo, hi] on its
// variables ([B, n] each), as [B*R].
Tensor concretize(const LinExpr& e, const Tensor& lo, const Tensor& hi, bool upper) {
    Tensor picked = upper ? signed_dot(e.coef, hi, lo, e.rows_per_sample)
                          : signed_dot(e.coef, lo, hi, e.rows_per_sample);
    return add(e.offset, picked);
}

void check_box(const Model& model, const Box& box) {
    if (box.lower.rank() != 2 || box.lower.shape() != box.upper.shape())
        throw ShapeError("bounds: box lower/upper must be matching matrices");
    if (box.lower.shape()[1] != model.input_dim())
        throw ShapeError("bounds: box width does not match model input");
    auto lv = box.lower.values();
    auto uv = box.upper.values();
    for (size_t i = 0; i < lv.size(); ++i)
        if (!(lv[i] <= uv[i]))
            throw NumericError("bounds: box has lower > upper");
}

// Post-ReLU interval of affine layer k's pre-activation bounds.
std::pair<Tensor, Tensor> relu_interval(const Tensor& l, const Tensor& u) {
    return {relu(l), relu(u)};
}

// Backward substitution from an expression over the *output* of affine
// layer `start` down to the input, using `pre` for ReLU relaxations.
Tensor backward_bound(const Model& model, const Box& box, LinExpr e, int64_t start,
                      const LayerBounds& pre, RelaxationMode mode, bool upper) {
    for (int64_t k = start; k >= 1; --k) {
        Relaxation r = make_relaxation(pre.lower[static_cast<size_t>(k - 1)],
                                       pre.upper[static_cast<size_t>(k - 1)], mode);
        e = through_relu(e, r, upper);
        e = through_affine(e, model.weight(k - 1), model.bias(k - 1));
    }
    return concretize(e, box.lower, box.upper, upper);
}

// Expression rows for the final affine layer with class-difference folding:
// row (s, i) is W[y_s] - W[i] over the penultimate activations.
LinExpr margin_expr(const Model& model, const std::vector<int32_t>& labels) {
    int64_t last = model.num_affine() - 1;
    Tensor coef = class_difference_rows(model.weight(last), labels);
    Tensor offset = class_difference_rows(model.bias(last), labels);
    return {coef, offset, model.output_dim() - 1};
}

// Expression rows for the raw logits of the final affine layer.
LinExpr logit_expr(const Model& model, int64_t batch) {
    int64_t last = model.num_affine() - 1;
    Tensor coef = tile_rows(model.weight(last), batch);
    Tensor offset = reshape(
        tile_rows(reshape(model.bias(last), {model.output_dim(), 1}), batch),
        {batch * model.output_dim()});
    return {coef, offset, model.output_dim()};
}

// Intermediate pre-activation bounds via backward substitution per layer,
// each intersected with the interval-propagation bounds (the tighter of the
// two is kept, which also guarantees the full-backward intermediates are
// nested inside the interval ones).
LayerBounds full_backward_bounds(const Model& model, const Box& box,
                                 const LayerBounds& ibp, RelaxationMode mode) {
    int64_t batch = box.batch();
    LayerBounds out;
    out.lower.push_back(ibp.lower[0]); // first pre-activation: affine of the
    out.upper.push_back(ibp.upper[0]); // box, where intervals are exact
    for (int64_t k = 1; k < model.num_affine(); ++k) {
        int64_t width = model.weight(k).shape()[0];
        Tensor coef = tile_rows(model.weight(k), batch);
        Tensor offset = reshape(
            tile_rows(reshape(model.bias(k), {width, 1}), batch), {batch * width});
        LinExpr e{coef, offset, width};
        Tensor lo = backward_bound(model, box, e, k, out, mode, false);
        Tensor hi = backward_bound(model, box, e, k, out, mode, true);
        lo = reshape(lo, {batch, width});
        hi = reshape(hi, {batch, width});
        out.lower.push_back(max_elem(lo, ibp.lower[static_cast<size_t>(k)]));
        out.upper.push_back(min_elem(hi, ibp.upper[static_cast<size_t>(k)]));
    }
    return out;
}

} // namespace

Box Box::around(const Tensor& centers, double eps) {
    if (centers.rank() != 2)
        throw ShapeError("Box::around: centers must be [batch, width]");
    if (!(eps >= 0.0)) throw ConfigError("Box::around: eps must be nonnegative");
    float e = static_cast<float>(eps);
    return {clamp(add_scalar(centers, -e), 0.0f, 1.0f),
            clamp(add_scalar(centers, e), 0.0f, 1.0f)};
}

LayerBounds ibp_bounds(const Model& model, const Box& box) {
    check_box(model, box);
    LayerBounds out;
    Tensor mid = scale(add(box.lower, box.upper), 0.5f);
    Tensor rad = scale(sub(box.upper, box.lower), 0.5f);
    for (int64_t k = 0; k < model.num_affine(); ++k) {
        Tensor mu = linear(mid, model.weight(k), model.bias(k));
        Tensor r = matmul(rad, transpose(abs(model.weight(k))));
        Tensor l = sub(mu, r);
        Tensor u = add(mu, r);
        out.lower.push_back(l);
        out.upper.push_back(u);
        if (k + 1 < model.num_affine()) {
            auto [pl, pu] = relu_interval(l, u);
            mid = scale(add(pl, pu), 0.5f);
            rad = scale(sub(pu, pl), 0.5f);
        }
    }
    return out;
}

LogitBounds crown_bounds(const Model& model, const Box& box, RelaxationMode mode,
                         Intermediates intermediates) {
    check_box(model, box);
    int64_t batch = box.batch();
    LayerBounds ibp = ibp_bounds(model, box);
    const LayerBounds pre = intermediates == Intermediates::full_backward
                                ? full_backward_bounds(model, box, ibp, mode)
                                : ibp;
    int64_t last = model.num_affine() - 1;

    // Walk the substitution once per direction, keeping the final input-space
    // expression for the result.
    auto run = [&](bool upper) {
        LinExpr e = logit_expr(model, batch);
        for (int64_t k = last; k >= 1; --k) {
            Relaxation r = make_relaxation(pre.lower[static_cast<size_t>(k - 1)],
                                           pre.upper[static_cast<size_t>(k - 1)], mode);
            e = through_relu(e, r, upper);
            e = through_affine(e, model.weight(k - 1), model.bias(k - 1));
        }
        Tensor value = concretize(e, box.lower, box.upper, upper);
        return std::pair<LinExpr, Tensor>(e, value);
    };
    auto [elo, vlo] = run(false);
    auto [ehi, vhi] = run(true);

    LogitBounds out;
    out.lower_coef = elo.coef;
    out.lower_const = elo.offset;
    out.upper_coef = ehi.coef;
    out.upper_const = ehi.offset;
    out.lower = max_elem(reshape(vlo, {batch, model.output_dim()}), ibp.lower.back());
    out.upper = min_elem(reshape(vhi, {batch, model.output_dim()}), ibp.upper.back());
    return out;
}

MarginBounds margin_lower_bounds(const Model& model, const Box& box,
                                 const std::vector<int32_t>& labels,
                                 BoundMethod method, RelaxationMode mode) {
    check_box(model, box);
    int64_t batch = box.batch();
    if (static_cast<int64_t>(labels.size()) != batch)
        throw ShapeError("margin_lower_bounds: need one label per sample");
    int64_t classes = model.output_dim();
    int64_t rows = classes - 1;
    LayerBounds ibp = ibp_bounds(model, box);
    int64_t last = model.num_affine() - 1;

    // Interval margin via last-layer elision: concretize the folded
    // class-difference rows over the penultimate post-ReLU interval (or the
    // input box when the network is a single affine layer).
    LinExpr me = margin_expr(model, labels);
    Tensor m_ibp;
    if (last == 0) {
        m_ibp = concretize(me, box.lower, box.upper, false);
    } else {
        auto [pl, pu] = relu_interval(ibp.lower[static_cast<size_t>(last - 1)],
                                      ibp.upper[static_cast<size_t>(last - 1)]);
        m_ibp = concretize(me, pl, pu, false);
    }
    m_ibp = reshape(m_ibp, {batch, rows});
    if (method == BoundMethod::ibp) return {m_ibp, labels};

    auto backward_margin = [&](const LayerBounds& pre) {
        Tensor m = backward_bound(model, box, margin_expr(model, labels), last, pre,
                                  mode, false);
        return reshape(m, {batch, rows});
    };

    // Tightest-of meets make the method ordering hold by construction.
    Tensor m_crown_ibp = max_elem(backward_margin(ibp), m_ibp);
    if (method == BoundMethod::crown_ibp) return {m_crown_ibp, labels};

    LayerBounds full = full_backward_bounds(model, box, ibp, mode);
    Tensor m_full = max_elem(backward_margin(full), m_crown_ibp);
    return {m_full, labels};
}

std::vector<CertificationResult> certify_batch(const Model& model,
                                               const Tensor& images, double eps,
                                               BoundMethod method,
                                               RelaxationMode mode) {
    NoGradGuard ng;
    int64_t batch = images.shape()[0];
    int64_t classes = model.output_dim();
    Tensor logits = model.logits(images);
    auto lg = logits.values();
    std::vector<int32_t> preds(static_cast<size_t>(batch));
    std::vector<bool> tied(static_cast<size_t>(batch), false);
    for (int64_t s = 0; s < batch; ++s) {
        int32_t best = 0;
        for (int64_t j = 1; j < classes; ++j)
            if (lg[static_cast<size_t>(s * classes + j)] >
                lg[static_cast<size_t>(s * classes + best)])
                best = static_cast<int32_t>(j);
        for (int64_t j = 0; j < classes; ++j)
            if (j != best && lg[static_cast<size_t>(s * classes + j)] ==
                                 lg[static_cast<size_t>(s * classes + best)])
                tied[static_cast<size_t>(s)] = true;
        preds[static_cast<size_t>(s)] = best;
    }
    Box box = Box::around(images, eps);
    MarginBounds margins = margin_lower_bounds(model, box, preds, method, mode);
    int64_t rows = classes - 1;
    std::vector<CertificationResult> out(static_cast<size_t>(batch));
    auto mv = margins.lower.values();
    for (int64_t s = 0; s < batch; ++s) {
        bool ok = !tied[static_cast<size_t>(s)];
        for (int64_t i = 0; i < rows; ++i)
            ok = ok && mv[static_cast<size_t>(s * rows + i)] > 0.0f;
        out[static_cast<size_t>(s)] = {preds[static_cast<size_t>(s)], ok};
    }
    return out;
}

CertificationResult certify(const Model& model, std::span<const float> image,
                            double eps, BoundMethod method, RelaxationMode mode) {
    if (static_cast<int64_t>(image.size()) != model.input_dim())
        throw ShapeError("certify: image size does not match model input");
    Tensor x = Tensor::from_data({1, model.input_dim()},
                                 std::vector<float>(image.begin(), image.end()));
    return certify_batch(model, x, eps, method, mode)[0];
}

double certified_robustness(const Model& model, const Dataset& data, double eps,
                            BoundMethod method, RelaxationMode mode,
                            int64_t batch_size) {
    if (data.size() == 0)
        throw ConfigError("certified_robustness: dataset is empty");
    if (batch_size <= 0)
        throw ConfigError("certified_robustness: batch size must be positive");
    int64_t certified = 0;
    for (int64_t start = 0; start < data.size(); start += batch_size) {
        int64_t end = std::min(data.size(), start + batch_size);
        std::vector<int32_t> idx(static_cast<size_t>(end - start));
        for (int64_t i = start; i < end; ++i)
            idx[static_cast<size_t>(i - start)] = static_cast<int32_t>(i);
        Tensor images = gather_images(data, idx);
        for (const auto& r : certify_batch(model, images, eps, method, mode))
            certified += r.certified ? 1 : 0;
    }
    return static_cast<double>(certified) / static_cast<double>(data.size());
}

} // namespace certlab
