#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "certlab/bounds.hpp"
#include "certlab/data.hpp"
#include "certlab/errors.hpp"
#include "certlab/model.hpp"
#include "certlab/rng.hpp"
#include "certlab/tensor.hpp"
#include "support/checks.hpp"

using namespace certlab;
using certlab::testing::finite_difference_check;
using certlab::testing::random_tensor;
using certlab::testing::to_vec;

namespace {

// Scalar chain x -> affine(w0,b0) -> relu -> affine(w1,b1); isolates one
// relaxation when the affines are identities.
Model scalar_chain(float w0, float b0, float w1, float b1) {
    std::vector<Tensor> ws{Tensor::from_data({1, 1}, {w0}),
                           Tensor::from_data({1, 1}, {w1})};
    std::vector<Tensor> bs{Tensor::from_data({1}, {b0}), Tensor::from_data({1}, {b1})};
    return Model::from_params(std::move(ws), std::move(bs));
}

Box scalar_box(float lo, float hi) {
    return {Tensor::from_data({1, 1}, {lo}), Tensor::from_data({1, 1}, {hi})};
}

// Uniform sample inside a box, one draw per coordinate.
Tensor sample_in(const Box& box, Rng& rng) {
    auto lv = box.lower.values();
    auto uv = box.upper.values();
    std::vector<float> x(lv.size());
    for (size_t i = 0; i < x.size(); ++i) x[i] = rng.next_float(lv[i], uv[i]);
    return Tensor::from_data(box.lower.shape(), std::move(x));
}

// Margins o_y - o_i (ascending i, skipping y) straight from the logits.
std::vector<double> forward_margins(const Model& model, const Tensor& x,
                                    const std::vector<int32_t>& labels) {
    NoGradGuard ng;
    std::vector<float> lg = to_vec(model.logits(x));
    int64_t classes = model.output_dim();
    std::vector<double> out;
    for (size_t s = 0; s < labels.size(); ++s) {
        int32_t y = labels[s];
        for (int64_t i = 0; i < classes; ++i) {
            if (i == y) continue;
            out.push_back(static_cast<double>(lg[s * classes + y]) -
                          static_cast<double>(lg[s * classes + i]));
        }
    }
    return out;
}

} // namespace

TEST_SUITE_BEGIN("bounds");

TEST_CASE("unstable relaxation lines match the centered example") {
    // Identity chain so the relaxation of the single hidden interval shows
    // up directly in the input-space linear bounds.
    Model m = scalar_chain(1, 0, 1, 0);

    SUBCASE("symmetric interval: chord 0.5 with offset 0.5, lower line x") {
        LogitBounds lb = crown_bounds(m, scalar_box(-1, 1));
        CHECK(lb.upper_coef.values()[0] == doctest::Approx(0.5));
        CHECK(lb.upper_const.values()[0] == doctest::Approx(0.5));
        CHECK(lb.lower_coef.values()[0] == doctest::Approx(1.0));
        CHECK(lb.lower_const.values()[0] == doctest::Approx(0.0));
        // Concretized interval meets the interval-propagation result, which
        // knows the output of a ReLU cannot be negative.
        CHECK(lb.lower.values()[0] == doctest::Approx(0.0));
        CHECK(lb.upper.values()[0] == doctest::Approx(1.0));
    }
    SUBCASE("leaning negative: lower line drops to zero") {
        LogitBounds lb = crown_bounds(m, scalar_box(-2, 1));
        CHECK(lb.upper_coef.values()[0] == doctest::Approx(1.0 / 3.0));
        CHECK(lb.upper_const.values()[0] == doctest::Approx(2.0 / 3.0));
        CHECK(lb.lower_coef.values()[0] == doctest::Approx(0.0));
        CHECK(lb.lower_const.values()[0] == doctest::Approx(0.0));
    }
    SUBCASE("leaning positive: lower line stays at x") {
        LogitBounds lb = crown_bounds(m, scalar_box(-1, 2));
        CHECK(lb.upper_coef.values()[0] == doctest::Approx(2.0 / 3.0));
        CHECK(lb.upper_const.values()[0] == doctest::Approx(2.0 / 3.0));
        CHECK(lb.lower_coef.values()[0] == doctest::Approx(1.0));
    }
    SUBCASE("stable neurons pass through exactly") {
        LogitBounds act = crown_bounds(m, scalar_box(0.5f, 1));
        CHECK(act.lower.values()[0] == doctest::Approx(0.5));
        CHECK(act.upper.values()[0] == doctest::Approx(1.0));
        CHECK(act.lower_coef.values()[0] == doctest::Approx(1.0));
        CHECK(act.upper_coef.values()[0] == doctest::Approx(1.0));
        LogitBounds inact = crown_bounds(m, scalar_box(-2, -1));
        CHECK(inact.lower.values()[0] == doctest::Approx(0.0));
        CHECK(inact.upper.values()[0] == doctest::Approx(0.0));
    }
}

TEST_CASE("interval propagation matches a hand-computed two-layer example") {
    std::vector<Tensor> ws{Tensor::from_data({2, 2}, {1, -1, 2, 1}),
                           Tensor::from_data({1, 2}, {1, 1})};
    std::vector<Tensor> bs{Tensor::from_data({2}, {0.5f, -1}),
                           Tensor::from_data({1}, {0})};
    Model m = Model::from_params(std::move(ws), std::move(bs));
    Box box{Tensor::from_data({1, 2}, {0, 0}), Tensor::from_data({1, 2}, {1, 1})};

    LayerBounds lb = ibp_bounds(m, box);
    REQUIRE(lb.lower.size() == 2);
    CHECK(lb.lower[0].values()[0] == doctest::Approx(-0.5));
    CHECK(lb.upper[0].values()[0] == doctest::Approx(1.5));
    CHECK(lb.lower[0].values()[1] == doctest::Approx(-1.0));
    CHECK(lb.upper[0].values()[1] == doctest::Approx(2.0));
    // Post-ReLU [0,1.5] and [0,2] feed the sum: [0, 3.5].
    CHECK(lb.lower[1].values()[0] == doctest::Approx(0.0));
    CHECK(lb.upper[1].values()[0] == doctest::Approx(3.5));
}

TEST_CASE("backward margins never fall below the interval margins") {
    // Mirrored pair z = (relu(x), relu(-x)) on x in [-0.5, 0.5]: the raw
    // backward substitution for the margin z1 - z2 concretizes to -1.0 while
    // interval propagation with final-layer folding gives the true -0.5.
    std::vector<Tensor> ws{Tensor::from_data({2, 1}, {1, -1}),
                           Tensor::from_data({2, 2}, {1, 0, 0, 1})};
    std::vector<Tensor> bs{Tensor::from_data({2}, {0, 0}), Tensor::from_data({2}, {0, 0})};
    Model m = Model::from_params(std::move(ws), std::move(bs));
    Box box = scalar_box(-0.5f, 0.5f);
    std::vector<int32_t> labels{0};

    MarginBounds ibp = margin_lower_bounds(m, box, labels, BoundMethod::ibp);
    MarginBounds cibp = margin_lower_bounds(m, box, labels, BoundMethod::crown_ibp);
    MarginBounds cfull = margin_lower_bounds(m, box, labels, BoundMethod::crown_full);
    CHECK(ibp.lower.values()[0] == doctest::Approx(-0.5));
    CHECK(cibp.lower.values()[0] == doctest::Approx(-0.5));
    CHECK(cfull.lower.values()[0] == doctest::Approx(-0.5));
}

TEST_CASE("bounds contain sampled network outputs") {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        Model m = Model::mlp({6, 10, 10, 4}, seed);
        Rng rng(seed * 97 + 5);
        Tensor centers = random_tensor({3, 6}, rng, 0.2f, 0.8f);
        for (double eps : {0.05, 0.5}) {
            Box box = Box::around(centers, eps);
            LayerBounds ib = ibp_bounds(m, box);
            LogitBounds full = crown_bounds(m, box, RelaxationMode::crown_adaptive,
                                            Intermediates::full_backward);
            LogitBounds coarse = crown_bounds(m, box, RelaxationMode::crown_adaptive,
                                              Intermediates::ibp);
            std::vector<int32_t> labels{0, 1, 2};
            MarginBounds m_i = margin_lower_bounds(m, box, labels, BoundMethod::ibp);
            MarginBounds m_c = margin_lower_bounds(m, box, labels, BoundMethod::crown_ibp);
            MarginBounds m_f = margin_lower_bounds(m, box, labels, BoundMethod::crown_full);

            const double slack = 1e-4;
            double worst = 0.0; // most violated inequality, should stay <= slack
            auto update = [&](double violation) { worst = std::max(worst, violation); };

            for (int t = 0; t < 300; ++t) {
                Tensor x = sample_in(box, rng);
                NoGradGuard ng;
                // Every intermediate pre-activation stays inside its interval.
                Tensor cur = x;
                for (int64_t k = 0; k < m.num_affine(); ++k) {
                    Tensor h = linear(cur, m.weight(k), m.bias(k));
                    auto hv = h.values();
                    auto lo = ib.lower[static_cast<size_t>(k)].values();
                    auto hi = ib.upper[static_cast<size_t>(k)].values();
                    for (size_t i = 0; i < hv.size(); ++i) {
                        update(lo[i] - hv[i]);
                        update(hv[i] - hi[i]);
                    }
                    if (k + 1 < m.num_affine()) cur = relu(h);
                }
                // Logit intervals and the underlying linear forms.
                std::vector<float> lg = to_vec(m.logits(x));
                auto xv = x.values();
                for (const LogitBounds* lb : {&full, &coarse}) {
                    auto lo = lb->lower.values();
                    auto hi = lb->upper.values();
                    auto lc = lb->lower_coef.values();
                    auto lk = lb->lower_const.values();
                    auto uc = lb->upper_coef.values();
                    auto uk = lb->upper_const.values();
                    int64_t in = m.input_dim(), classes = m.output_dim();
                    for (int64_t s = 0; s < 3; ++s) {
                        for (int64_t j = 0; j < classes; ++j) {
                            size_t q = static_cast<size_t>(s * classes + j);
                            update(lo[q] - lg[q]);
                            update(lg[q] - hi[q]);
                            double dn = lk[q], up = uk[q];
                            for (int64_t c = 0; c < in; ++c) {
                                dn += static_cast<double>(lc[q * in + c]) * xv[s * in + c];
                                up += static_cast<double>(uc[q * in + c]) * xv[s * in + c];
                            }
                            update(dn - lg[q]);
                            update(lg[q] - up);
                        }
                    }
                }
                // Margin lower bounds stay below the observed margins.
                std::vector<double> fm = forward_margins(m, x, labels);
                for (const MarginBounds* mb : {&m_i, &m_c, &m_f}) {
                    auto mv = mb->lower.values();
                    for (size_t q = 0; q < fm.size(); ++q) update(mv[q] - fm[q]);
                }
            }
            CHECK_MESSAGE(worst <= slack, "seed ", seed, " eps ", eps,
                          " worst violation ", worst);
        }
    }
}

TEST_CASE("margin methods tighten in order") {
    int strict_c = 0, strict_f = 0;
    for (uint64_t seed : {4ull, 5ull, 6ull}) {
        Model m = Model::mlp({8, 12, 12, 5}, seed);
        Rng rng(seed + 40);
        Tensor centers = random_tensor({4, 8}, rng, 0.1f, 0.9f);
        Box box = Box::around(centers, 0.1);
        std::vector<int32_t> labels{0, 1, 2, 3};
        auto mi = to_vec(margin_lower_bounds(m, box, labels, BoundMethod::ibp).lower);
        auto mc = to_vec(margin_lower_bounds(m, box, labels, BoundMethod::crown_ibp).lower);
        auto mf = to_vec(margin_lower_bounds(m, box, labels, BoundMethod::crown_full).lower);
        for (size_t i = 0; i < mi.size(); ++i) {
            CHECK(mc[i] >= mi[i]);
            CHECK(mf[i] >= mc[i]);
            strict_c += mc[i] > mi[i] ? 1 : 0;
            strict_f += mf[i] > mc[i] ? 1 : 0;
        }
    }
    // The ordering must not be vacuous: backward substitution actually
    // tightens something on generic networks at this radius.
    CHECK(strict_c > 0);
    CHECK(strict_f > 0);
}

TEST_CASE("both relaxation modes produce identical bounds") {
    Model m = Model::mlp({6, 9, 9, 4}, 12);
    Rng rng(77);
    Tensor centers = random_tensor({3, 6}, rng, 0.1f, 0.9f);
    Box box = Box::around(centers, 0.15);
    std::vector<int32_t> labels{3, 0, 2};
    for (BoundMethod method : {BoundMethod::crown_ibp, BoundMethod::crown_full}) {
        auto a = to_vec(
            margin_lower_bounds(m, box, labels, method, RelaxationMode::crown_adaptive).lower);
        auto d = to_vec(
            margin_lower_bounds(m, box, labels, method, RelaxationMode::deeppoly).lower);
        REQUIRE(a.size() == d.size());
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == d[i]);
    }
}

TEST_CASE("single affine layer margins are corner-exact") {
    Model m = Model::mlp({5, 3}, 3);
    Rng rng(31);
    Tensor centers = random_tensor({2, 5}, rng, 0.2f, 0.8f);
    Box box = Box::around(centers, 0.13);
    std::vector<int32_t> labels{1, 2};
    auto lo = box.lower.values();
    auto hi = box.upper.values();
    auto w = m.weight(0).values();
    auto b = m.bias(0).values();

    for (BoundMethod method :
         {BoundMethod::ibp, BoundMethod::crown_ibp, BoundMethod::crown_full}) {
        auto mv = to_vec(margin_lower_bounds(m, box, labels, method).lower);
        size_t q = 0;
        for (size_t s = 0; s < labels.size(); ++s) {
            int32_t y = labels[s];
            for (int32_t i = 0; i < 3; ++i) {
                if (i == y) continue;
                double best = static_cast<double>(b[y]) - b[i];
                for (int64_t c = 0; c < 5; ++c) {
                    double coef = static_cast<double>(w[y * 5 + c]) - w[i * 5 + c];
                    best += coef * (coef >= 0 ? lo[s * 5 + c] : hi[s * 5 + c]);
                }
                CHECK(mv[q] == doctest::Approx(best).epsilon(1e-5));
                ++q;
            }
        }
    }
}

TEST_CASE("backward bounds are exact when every neuron is active") {
    Model m = Model::mlp({4, 6, 3}, 8);
    // Shift the hidden biases far positive: |W x| < 2 on the unit box, so
    // every hidden pre-activation is safely above zero and the network is
    // affine on the whole input range.
    {
        float* b = m.bias(0).mutable_data();
        for (int64_t i = 0; i < m.bias(0).size(); ++i) b[i] += 10.0f;
    }
    Rng rng(19);
    Tensor centers = random_tensor({2, 4}, rng, 0.3f, 0.7f);
    Box box = Box::around(centers, 0.05);
    std::vector<int32_t> labels{0, 2};

    // Effective affine map in double precision.
    auto w0 = m.weight(0).values();
    auto b0 = m.bias(0).values();
    auto w1 = m.weight(1).values();
    auto b1 = m.bias(1).values();
    std::vector<double> weff(3 * 4, 0.0), beff(3, 0.0);
    for (int64_t o = 0; o < 3; ++o) {
        beff[o] = b1[o];
        for (int64_t h = 0; h < 6; ++h) {
            beff[o] += static_cast<double>(w1[o * 6 + h]) * b0[h];
            for (int64_t c = 0; c < 4; ++c)
                weff[o * 4 + c] += static_cast<double>(w1[o * 6 + h]) * w0[h * 4 + c];
        }
    }
    auto lo = box.lower.values();
    auto hi = box.upper.values();
    auto mv = to_vec(margin_lower_bounds(m, box, labels, BoundMethod::crown_full).lower);
    size_t q = 0;
    for (size_t s = 0; s < labels.size(); ++s) {
        int32_t y = labels[s];
        for (int32_t i = 0; i < 3; ++i) {
            if (i == y) continue;
            double best = beff[y] - beff[i];
            for (int64_t c = 0; c < 4; ++c) {
                double coef = weff[y * 4 + c] - weff[i * 4 + c];
                best += coef * (coef >= 0 ? lo[s * 4 + c] : hi[s * 4 + c]);
            }
            CHECK(mv[q] == doctest::Approx(best).epsilon(1e-4));
            ++q;
        }
    }
}

TEST_CASE("interval margins shrink as the radius grows") {
    Model m = Model::mlp({6, 8, 8, 4}, 15);
    Rng rng(51);
    Tensor centers = random_tensor({3, 6}, rng, 0.1f, 0.9f);
    std::vector<int32_t> labels{1, 2, 0};
    std::vector<double> radii{0.0, 0.02, 0.05, 0.1, 0.3};
    std::vector<float> prev;
    for (double eps : radii) {
        auto mv = to_vec(margin_lower_bounds(m, Box::around(centers, eps), labels,
                                             BoundMethod::ibp)
                             .lower);
        if (!prev.empty())
            for (size_t i = 0; i < mv.size(); ++i) CHECK(mv[i] <= prev[i] + 1e-6f);
        prev.assign(mv.begin(), mv.end());
    }
}

TEST_CASE("zero radius reproduces the forward pass") {
    Model m = Model::mlp({6, 8, 8, 4}, 11);
    Rng rng(23);
    Tensor centers = random_tensor({4, 6}, rng, 0.05f, 0.95f);
    Box box = Box::around(centers, 0.0);
    std::vector<int32_t> labels{0, 3, 1, 2};
    std::vector<double> fm = forward_margins(m, centers, labels);

    for (BoundMethod method :
         {BoundMethod::ibp, BoundMethod::crown_ibp, BoundMethod::crown_full}) {
        auto mv = to_vec(margin_lower_bounds(m, box, labels, method).lower);
        for (size_t q = 0; q < fm.size(); ++q)
            CHECK(mv[q] == doctest::Approx(fm[q]).epsilon(1e-4));
    }
    LogitBounds lb = crown_bounds(m, box);
    std::vector<float> lg = to_vec(m.logits(centers));
    auto lo = lb.lower.values();
    auto hi = lb.upper.values();
    for (size_t i = 0; i < lg.size(); ++i) {
        CHECK(lo[i] == doctest::Approx(lg[i]).epsilon(1e-4));
        CHECK(hi[i] == doctest::Approx(lg[i]).epsilon(1e-4));
    }
}

TEST_CASE("certification demands every margin strictly positive") {
    std::vector<Tensor> ws{Tensor::from_data({2, 2}, {1, 0, 0, 1})};
    std::vector<Tensor> bs{Tensor::from_data({2}, {0, 0})};
    Model m = Model::from_params(std::move(ws), std::move(bs));
    std::vector<float> image{0.8f, 0.2f};

    CertificationResult inside = certify(m, image, 0.25, BoundMethod::ibp);
    CHECK(inside.predicted == 0);
    CHECK(inside.certified);
    // Radius 0.3 puts both coordinates exactly at 0.5: the margin bound is
    // exactly zero, which must not certify.
    CertificationResult edge = certify(m, image, 0.3, BoundMethod::ibp);
    CHECK(edge.predicted == 0);
    CHECK_FALSE(edge.certified);
    CertificationResult outside = certify(m, image, 0.35, BoundMethod::ibp);
    CHECK_FALSE(outside.certified);
}

TEST_CASE("tied clean logits are never certified") {
    std::vector<Tensor> ws{Tensor::from_data({2, 3}, std::vector<float>(6, 0.0f))};
    std::vector<Tensor> bs{Tensor::from_data({2}, {0, 0})};
    Model m = Model::from_params(std::move(ws), std::move(bs));
    std::vector<float> image{0.5f, 0.5f, 0.5f};
    for (BoundMethod method : {BoundMethod::ibp, BoundMethod::crown_full}) {
        CertificationResult r = certify(m, image, 0.0, method);
        CHECK(r.predicted == 0);
        CHECK_FALSE(r.certified);
    }
}

TEST_CASE("dataset certification agrees with per-image queries") {
    Model m = Model::mlp({Dataset::kPixels, 16, 10}, 33);
    Rng rng(71);
    std::vector<float> pixels(static_cast<size_t>(9 * Dataset::kPixels));
    for (auto& p : pixels) p = rng.next_float();
    std::vector<uint8_t> labels(9, 0);
    Dataset data(std::move(pixels), std::move(labels), Split::test, Provenance::benign);

    int certified = 0;
    for (int64_t i = 0; i < data.size(); ++i) {
        CertificationResult r = certify(m, data.image(i), 0.01, BoundMethod::crown_ibp);
        certified += r.certified ? 1 : 0;
    }
    double frac = certified_robustness(m, data, 0.01, BoundMethod::crown_ibp,
                                       RelaxationMode::crown_adaptive, 4);
    CHECK(frac == doctest::Approx(certified / 9.0));

    Dataset empty;
    CHECK_THROWS_AS(certified_robustness(m, empty, 0.01, BoundMethod::ibp),
                    ConfigError);
    CHECK_THROWS_AS(certified_robustness(m, data, 0.01, BoundMethod::ibp,
                                         RelaxationMode::crown_adaptive, 0),
                    ConfigError);
}

TEST_CASE("box construction clamps to the pixel range and validates") {
    Tensor centers = Tensor::from_data({1, 2}, {0.05f, 0.9f});
    Box box = Box::around(centers, 0.1);
    CHECK(box.lower.values()[0] == doctest::Approx(0.0));
    CHECK(box.lower.values()[1] == doctest::Approx(0.8));
    CHECK(box.upper.values()[0] == doctest::Approx(0.15));
    CHECK(box.upper.values()[1] == doctest::Approx(1.0));

    CHECK_THROWS_AS(Box::around(centers, -0.1), ConfigError);
    CHECK_THROWS_AS(Box::around(Tensor::from_data({2}, {0, 0}), 0.1), ShapeError);

    Model m = Model::mlp({2, 3, 2}, 1);
    Box reversed{Tensor::from_data({1, 2}, {0.6f, 0.6f}),
                 Tensor::from_data({1, 2}, {0.4f, 0.4f})};
    CHECK_THROWS_AS(ibp_bounds(m, reversed), NumericError);
    Box narrow{Tensor::from_data({1, 3}, {0, 0, 0}), Tensor::from_data({1, 3}, {1, 1, 1})};
    CHECK_THROWS_AS(ibp_bounds(m, narrow), ShapeError);
    CHECK_THROWS_AS(certify(m, std::vector<float>{0.5f}, 0.1, BoundMethod::ibp),
                    ShapeError);
    Box ok = Box::around(Tensor::from_data({2, 2}, {0.5f, 0.5f, 0.5f, 0.5f}), 0.1);
    CHECK_THROWS_AS(margin_lower_bounds(m, ok, {0}, BoundMethod::ibp), ShapeError);
}

TEST_CASE("margin bounds are differentiable in the parameters") {
    Model m = Model::mlp({4, 6, 6, 3}, 21);
    m.set_requires_grad(true);
    Rng rng(13);
    Tensor centers = random_tensor({2, 4}, rng, 0.2f, 0.8f);
    Box box = Box::around(centers, 0.15);
    std::vector<int32_t> labels{0, 1};
    std::vector<Tensor> params;
    for (Tensor* p : m.parameters()) params.push_back(*p);

    for (BoundMethod method : {BoundMethod::ibp, BoundMethod::crown_ibp}) {
        auto fn = [&] {
            return sum(margin_lower_bounds(m, box, labels, method).lower);
        };
        auto report = finite_difference_check(params, fn, 40, 2024 + int(method));
        CHECK_MESSAGE(report.ok(), "method ", int(method), " max rel err ",
                      report.max_rel_error, " failed ", report.failed);
    }
}

TEST_SUITE_END();
