#include "certlab/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <unordered_set>
#include <utility>

#include "certlab/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace certlab {

namespace {

// Bound propagation cycles through ~50MB coefficient buffers; with default
// malloc tuning each one is a fresh mmap whose pages fault on first touch.
// Keeping large blocks on the heap lets freed buffers come back warm.
const bool g_malloc_tuned = [] {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
    return true;
}();

thread_local int g_no_grad_depth = 0;

int64_t size_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

} // namespace

struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(TensorImpl&)> backprop;
    bool consumed = false;
};

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::vector<float> grad;
    std::shared_ptr<Node> node;

    int64_t size() const { return static_cast<int64_t>(data.size()); }
};

namespace {

void check_defined(const std::shared_ptr<TensorImpl>& impl, const char* what) {
    if (!impl) throw Error(std::string(what) + ": tensor is empty");
}

void check_finite(const std::vector<float>& values, const char* op) {
    // Branchless probe the compiler can vectorize: v - v is zero for finite
    // v and NaN for inf/NaN, and NaN poisons the running sum.
    float probe = 0.0f;
    for (float v : values) probe += v - v;
    if (!std::isfinite(probe))
        throw NumericError(std::string(op) + " produced a non-finite value");
}

// Gradient buffer of `impl`, allocated and zeroed on first use.
float* grad_buf(TensorImpl& impl) {
    if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0f);
    return impl.grad.data();
}

bool wants_grad(const std::shared_ptr<TensorImpl>& impl) {
    return impl->requires_grad;
}

int64_t rows_of(const TensorImpl& impl) {
    if (impl.shape.size() == 2) return impl.shape[0];
    if (impl.shape.size() == 1) return 1;
    throw ShapeError("expected a matrix or vector, got shape " + shape_str(impl.shape));
}

int64_t cols_of(const TensorImpl& impl) {
    if (impl.shape.size() == 2) return impl.shape[1];
    if (impl.shape.size() == 1) return impl.shape[0];
    throw ShapeError("expected a matrix or vector, got shape " + shape_str(impl.shape));
}

using Back = std::function<void(TensorImpl&)>;

Tensor make_result(Shape shape, std::vector<float> data, const char* op,
                   std::initializer_list<Tensor> inputs, const Back& back) {
    if (size_of(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError(std::string(op) + ": result size does not match shape");
    check_finite(data, op);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool record = grad_enabled();
    bool any_grad = false;
    for (const Tensor& t : inputs) any_grad = any_grad || t.impl()->requires_grad;
    if (record && any_grad) {
        impl->requires_grad = true;
        auto node = std::make_shared<Node>();
        for (const Tensor& t : inputs) node->inputs.push_back(t.impl());
        node->backprop = back;
        impl->node = std::move(node);
    }
    return Tensor(std::move(impl));
}

} // namespace

// ---- Tensor ------------------------------------------------------------

Tensor::Tensor() = default;

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return from_data(std::move(shape), std::vector<float>(), requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    int64_t n = size_of(shape);
    std::vector<float> v(static_cast<size_t>(n), value);
    auto impl = std::make_shared<TensorImpl>();
    check_finite(v, "full");
    impl->shape = std::move(shape);
    impl->data = std::move(v);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> values, bool requires_grad) {
    int64_t n = size_of(shape);
    for (int64_t d : shape)
        if (d < 0) throw ShapeError("from_data: negative dimension");
    if (values.empty()) values.assign(static_cast<size_t>(n), 0.0f);
    if (static_cast<int64_t>(values.size()) != n)
        throw ShapeError("from_data: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
    check_finite(values, "from_data");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value) { return from_data({}, {value}); }

const Shape& Tensor::shape() const {
    check_defined(impl_, "shape");
    return impl_->shape;
}

int64_t Tensor::size() const {
    check_defined(impl_, "size");
    return impl_->size();
}

int64_t Tensor::rank() const {
    check_defined(impl_, "rank");
    return static_cast<int64_t>(impl_->shape.size());
}

int64_t Tensor::rows() const {
    check_defined(impl_, "rows");
    return rows_of(*impl_);
}

int64_t Tensor::cols() const {
    check_defined(impl_, "cols");
    return cols_of(*impl_);
}

std::span<const float> Tensor::values() const {
    check_defined(impl_, "values");
    return {impl_->data.data(), impl_->data.size()};
}

float Tensor::at(int64_t i) const {
    check_defined(impl_, "at");
    if (i < 0 || i >= impl_->size()) throw ShapeError("at: index out of range");
    return impl_->data[static_cast<size_t>(i)];
}

float Tensor::at(int64_t r, int64_t c) const {
    check_defined(impl_, "at");
    if (impl_->shape.size() != 2) throw ShapeError("at(r,c): tensor is not a matrix");
    int64_t m = impl_->shape[0], n = impl_->shape[1];
    if (r < 0 || r >= m || c < 0 || c >= n) throw ShapeError("at: index out of range");
    return impl_->data[static_cast<size_t>(r * n + c)];
}

float Tensor::item() const {
    check_defined(impl_, "item");
    if (impl_->size() != 1) throw ShapeError("item: tensor has more than one element");
    return impl_->data[0];
}

float* Tensor::mutable_data() {
    check_defined(impl_, "mutable_data");
    return impl_->data.data();
}

bool Tensor::requires_grad() const {
    check_defined(impl_, "requires_grad");
    return impl_->requires_grad;
}

void Tensor::set_requires_grad(bool value) {
    check_defined(impl_, "set_requires_grad");
    if (impl_->node)
        throw Error("set_requires_grad: only leaf tensors may be toggled");
    impl_->requires_grad = value;
    if (!value) impl_->grad.clear();
}

std::span<const float> Tensor::grad() const {
    check_defined(impl_, "grad");
    return {impl_->grad.data(), impl_->grad.size()};
}

void Tensor::zero_grad() {
    check_defined(impl_, "zero_grad");
    impl_->grad.clear();
}

Tensor Tensor::detach() const {
    check_defined(impl_, "detach");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

// ---- linear algebra ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a.impl(), "matmul");
    check_defined(b.impl(), "matmul");
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: both operands must be matrices");
    int64_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    std::vector<float> out(static_cast<size_t>(m * n));
    {
        ConstMatMap A(a.values().data(), m, k), B(b.values().data(), k, n);
        MatMap C(out.data(), m, n);
        C.noalias() = A * B;
    }
    auto ai = a.impl(), bi = b.impl();
    return make_result({m, n}, std::move(out), "matmul", {a, b},
        [ai, bi, m, k, n](TensorImpl& o) {
            ConstMatMap G(o.grad.data(), m, n);
            ConstMatMap A(ai->data.data(), m, k), B(bi->data.data(), k, n);
            if (wants_grad(ai)) {
                MatMap dA(grad_buf(*ai), m, k);
                dA.noalias() += G * B.transpose();
            }
            if (wants_grad(bi)) {
                MatMap dB(grad_buf(*bi), k, n);
                dB.noalias() += A.transpose() * G;
            }
        });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    check_defined(x.impl(), "linear");
    check_defined(weight.impl(), "linear");
    check_defined(bias.impl(), "linear");
    if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1)
        throw ShapeError("linear: expected x [m,k], weight [n,k], bias [n]");
    int64_t m = x.shape()[0], k = x.shape()[1];
    int64_t n = weight.shape()[0];
    if (weight.shape()[1] != k)
        throw ShapeError("linear: weight shape " + shape_str(weight.shape()) +
                         " does not match input width " + std::to_string(k));
    if (bias.shape()[0] != n)
        throw ShapeError("linear: bias length does not match weight rows");
    std::vector<float> out(static_cast<size_t>(m * n));
    {
        ConstMatMap X(x.values().data(), m, k), W(weight.values().data(), n, k);
        MatMap C(out.data(), m, n);
        C.noalias() = X * W.transpose();
        Eigen::Map<const Eigen::RowVectorXf> B(bias.values().data(), n);
        C.rowwise() += B;
    }
    auto xi = x.impl(), wi = weight.impl(), bi = bias.impl();
    return make_result({m, n}, std::move(out), "linear", {x, weight, bias},
        [xi, wi, bi, m, k, n](TensorImpl& o) {
            ConstMatMap G(o.grad.data(), m, n);
            ConstMatMap X(xi->data.data(), m, k), W(wi->data.data(), n, k);
            if (wants_grad(xi)) {
                MatMap dX(grad_buf(*xi), m, k);
                dX.noalias() += G * W;
            }
            if (wants_grad(wi)) {
                MatMap dW(grad_buf(*wi), n, k);
                dW.noalias() += G.transpose() * X;
            }
            if (wants_grad(bi)) {
                // Column sums in fixed row order 0..m-1, then a single add per
                // coefficient. Eigen's colwise().sum() regroups the reduction
                // based on the destination address, which makes training
                // results depend on heap layout; summing into the accumulator
                // row by row instead would break the exactness of adding two
                // half-scaled backward passes. This form avoids both.
                std::vector<float> colsum(static_cast<size_t>(n), 0.0f);
                const float* g = o.grad.data();
                for (int64_t r = 0; r < m; ++r)
                    for (int64_t c = 0; c < n; ++c) colsum[c] += g[r * n + c];
                float* db = grad_buf(*bi);
                for (int64_t c = 0; c < n; ++c) db[c] += colsum[c];
            }
        });
}

Tensor transpose(const Tensor& a) {
    check_defined(a.impl(), "transpose");
    if (a.rank() != 2) throw ShapeError("transpose: operand must be a matrix");
    int64_t m = a.shape()[0], n = a.shape()[1];
    std::vector<float> out(static_cast<size_t>(m * n));
    {
        ConstMatMap A(a.values().data(), m, n);
        MatMap T(out.data(), n, m);
        T = A.transpose();
    }
    auto ai = a.impl();
    return make_result({n, m}, std::move(out), "transpose", {a},
        [ai, m, n](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            ConstMatMap G(o.grad.data(), n, m);
            MatMap dA(grad_buf(*ai), m, n);
            dA += G.transpose();
        });
}

// ---- elementwise binary --------------------------------------------------

namespace {

enum class BinKind { add, sub, mul, div };

const char* bin_name(BinKind k) {
    switch (k) {
        case BinKind::add: return "add";
        case BinKind::sub: return "sub";
        case BinKind::mul: return "mul";
        default: return "div";
    }
}

Tensor binary(const Tensor& a, const Tensor& b, BinKind kind) {
    const char* op = bin_name(kind);
    check_defined(a.impl(), op);
    check_defined(b.impl(), op);
    bool broadcast = false;
    if (a.shape() != b.shape()) {
        // The only broadcast supported: rank-1 b across the rows of matrix a.
        if (a.rank() == 2 && b.rank() == 1 && b.shape()[0] == a.shape()[1]) {
            broadcast = true;
        } else {
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()) + " do not match");
        }
    }
    const auto av = a.values();
    const auto bv = b.values();
    int64_t n = a.size();
    int64_t w = broadcast ? a.shape()[1] : 0;
    std::vector<float> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        float bx = broadcast ? bv[static_cast<size_t>(i % w)] : bv[static_cast<size_t>(i)];
        float ax = av[static_cast<size_t>(i)];
        float r = 0.0f;
        switch (kind) {
            case BinKind::add: r = ax + bx; break;
            case BinKind::sub: r = ax - bx; break;
            case BinKind::mul: r = ax * bx; break;
            case BinKind::div: r = ax / bx; break;
        }
        out[static_cast<size_t>(i)] = r;
    }
    auto ai = a.impl(), bi = b.impl();
    return make_result(a.shape(), std::move(out), op, {a, b},
        [ai, bi, kind, broadcast, n, w](TensorImpl& o) {
            const float* g = o.grad.data();
            const float* av2 = ai->data.data();
            const float* bv2 = bi->data.data();
            float* da = wants_grad(ai) ? grad_buf(*ai) : nullptr;
            float* db = wants_grad(bi) ? grad_buf(*bi) : nullptr;
            for (int64_t i = 0; i < n; ++i) {
                size_t bj = static_cast<size_t>(broadcast ? i % w : i);
                float gi = g[i];
                switch (kind) {
                    case BinKind::add:
                        if (da) da[i] += gi;
                        if (db) db[bj] += gi;
                        break;
                    case BinKind::sub:
                        if (da) da[i] += gi;
                        if (db) db[bj] -= gi;
                        break;
                    case BinKind::mul:
                        if (da) da[i] += gi * bv2[bj];
                        if (db) db[bj] += gi * av2[i];
                        break;
                    case BinKind::div: {
                        float bx = bv2[bj];
                        if (da) da[i] += gi / bx;
                        if (db) db[bj] -= gi * av2[i] / (bx * bx);
                        break;
                    }
                }
            }
        });
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::div); }

// ---- elementwise unary -----------------------------------------------------

Tensor scale(const Tensor& a, float c) {
    check_defined(a.impl(), "scale");
    const auto av = a.values();
    std::vector<float> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
    auto ai = a.impl();
    return make_result(a.shape(), std::move(out), "scale", {a},
        [ai, c](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            for (size_t i = 0; i < o.data.size(); ++i) da[i] += g[i] * c;
        });
}

Tensor add_scalar(const Tensor& a, float c) {
    check_defined(a.impl(), "add_scalar");
    const auto av = a.values();
    std::vector<float> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + c;
    auto ai = a.impl();
    return make_result(a.shape(), std::move(out), "add_scalar", {a},
        [ai](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            for (size_t i = 0; i < o.data.size(); ++i) da[i] += g[i];
        });
}

Tensor abs(const Tensor& a) {
    check_defined(a.impl(), "abs");
    const auto av = a.values();
    std::vector<float> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::fabs(av[i]);
    auto ai = a.impl();
    return make_result(a.shape(), std::move(out), "abs", {a},
        [ai](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            const float* x = ai->data.data();
            // Subgradient 0 at x == 0.
            for (size_t i = 0; i < o.data.size(); ++i)
                da[i] += x[i] > 0.0f ? g[i] : (x[i] < 0.0f ? -g[i] : 0.0f);
        });
}

Tensor relu(const Tensor& a) {
    check_defined(a.impl(), "relu");
    const auto av = a.values();
    std::vector<float> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0f ? av[i] : 0.0f;
    auto ai = a.impl();
    return make_result(a.shape(), std::move(out), "relu", {a},
        [ai](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            const float* x = ai->data.data();
            // Subgradient 0 at x == 0.
            for (size_t i = 0; i < o.data.size(); ++i)
                if (x[i] > 0.0f) da[i] += g[i];
        });
}

namespace {

Tensor min_or_max(const Tensor& a, const Tensor& b, bool take_min) {
    const char* op = take_min ? "min_elem" : "max_elem";
    check_defined(a.impl(), op);
    check_defined(b.impl(), op);
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " do not match");
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<float> out(av.size());
    for (size_t i = 0; i < av.size(); ++i)
        out[i] = take_min ? std::min(av[i], bv[i]) : std::max(av[i], bv[i]);
    auto ai = a.impl(), bi = b.impl();
    return make_result(a.shape(), std::move(out), op, {a, b},
        [ai, bi, take_min](TensorImpl& o) {
            float* da = wants_grad(ai) ? grad_buf(*ai) : nullptr;
            float* db = wants_grad(bi) ? grad_buf(*bi) : nullptr;
            const float* g = o.grad.data();
            const float* x = ai->data.data();
            const float* y = bi->data.data();
            // Gradient follows the selected operand; ties select the first.
            for (size_t i = 0; i < o.data.size(); ++i) {
                bool pick_a = take_min ? (x[i] <= y[i]) : (x[i] >= y[i]);
                if (pick_a) {
                    if (da) da[i] += g[i];
                } else if (db) {
                    db[i] += g[i];
                }
            }
        });
}

} // namespace

Tensor min_elem(const Tensor& a, const Tensor& b) { return min_or_max(a, b, true); }
Tensor max_elem(const Tensor& a, const Tensor& b) { return min_or_max(a, b, false); }

Tensor clamp(const Tensor& a, float lo, float hi) {
    check_defined(a.impl(), "clamp");
    if (!(lo <= hi)) throw ConfigError("clamp: lo must not exceed hi");
    const auto av = a.values();
    std::vector<float> out(av.size());
    for (size_t i = 0; i < av.size(); ++i)
        out[i] = av[i] < lo ? lo : (av[i] > hi ? hi : av[i]);
    auto ai = a.impl();
    return make_result(a.shape(), std::move(out), "clamp", {a},
        [ai, lo, hi](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            const float* x = ai->data.data();
            // Gradient passes only strictly inside the interval, matching
            // relu's zero subgradient at its kink.
            for (size_t i = 0; i < o.data.size(); ++i)
                if (x[i] > lo && x[i] < hi) da[i] += g[i];
        });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a) {
    check_defined(a.impl(), "sum");
    double acc = 0.0;
    for (float v : a.values()) acc += v;
    auto ai = a.impl();
    return make_result({}, {static_cast<float>(acc)}, "sum", {a},
        [ai](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            float g = o.grad[0];
            for (size_t i = 0; i < ai->data.size(); ++i) da[i] += g;
        });
}

Tensor mean(const Tensor& a) {
    check_defined(a.impl(), "mean");
    if (a.size() == 0) throw ShapeError("mean: tensor is empty");
    double acc = 0.0;
    for (float v : a.values()) acc += v;
    double n = static_cast<double>(a.size());
    auto ai = a.impl();
    return make_result({}, {static_cast<float>(acc / n)}, "mean", {a},
        [ai, n](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            float g = static_cast<float>(o.grad[0] / n);
            for (size_t i = 0; i < ai->data.size(); ++i) da[i] += g;
        });
}

Tensor row_sum(const Tensor& a) {
    check_defined(a.impl(), "row_sum");
    if (a.rank() != 2) throw ShapeError("row_sum: operand must be a matrix");
    int64_t m = a.shape()[0], n = a.shape()[1];
    const auto av = a.values();
    std::vector<float> out(static_cast<size_t>(m));
    for (int64_t r = 0; r < m; ++r) {
        double acc = 0.0;
        for (int64_t c = 0; c < n; ++c) acc += av[static_cast<size_t>(r * n + c)];
        out[static_cast<size_t>(r)] = static_cast<float>(acc);
    }
    auto ai = a.impl();
    return make_result({m}, std::move(out), "row_sum", {a},
        [ai, m, n](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            for (int64_t r = 0; r < m; ++r)
                for (int64_t c = 0; c < n; ++c) da[r * n + c] += g[r];
        });
}

namespace {

// Shared validation for the fused sign-select ops: a is [B*k, n], pos/neg
// are [B, n]; element (r, c) of `a` selects pos[r/k, c] when nonnegative and
// neg[r/k, c] otherwise.
void check_signed_op(const char* op, const Tensor& a, const Tensor& pos,
                     const Tensor& neg, int64_t k) {
    check_defined(a.impl(), op);
    check_defined(pos.impl(), op);
    check_defined(neg.impl(), op);
    if (a.rank() != 2 || pos.rank() != 2 || neg.rank() != 2)
        throw ShapeError(std::string(op) + ": operands must be matrices");
    if (pos.shape() != neg.shape())
        throw ShapeError(std::string(op) + ": branch shapes differ");
    if (k <= 0) throw ShapeError(std::string(op) + ": block factor must be positive");
    if (a.shape()[1] != pos.shape()[1] || a.shape()[0] != pos.shape()[0] * k)
        throw ShapeError(std::string(op) + ": row blocks do not match");
}

} // namespace

Tensor signed_mix(const Tensor& a, const Tensor& pos, const Tensor& neg, int64_t k) {
    check_signed_op("signed_mix", a, pos, neg, k);
    int64_t m = a.shape()[0], n = a.shape()[1];
    const auto av = a.values();
    const auto pv = pos.values();
    const auto nv = neg.values();
    std::vector<float> out(static_cast<size_t>(m * n));
    for (int64_t r = 0; r < m; ++r) {
        const float* pa = av.data() + r * n;
        const float* pp = pv.data() + (r / k) * n;
        const float* pn = nv.data() + (r / k) * n;
        float* po = out.data() + r * n;
        // Branchless split x*(x>=0 ? p : n) == max(x,0)*p + min(x,0)*n, which
        // is bitwise identical (the losing term is an exact zero) and lets
        // the compiler vectorize instead of branching on random signs.
        for (int64_t c = 0; c < n; ++c)
            po[c] = std::max(pa[c], 0.0f) * pp[c] + std::min(pa[c], 0.0f) * pn[c];
    }
    auto ai = a.impl(), pi = pos.impl(), ni = neg.impl();
    return make_result({m, n}, std::move(out), "signed_mix", {a, pos, neg},
        [ai, pi, ni, m, n, k](TensorImpl& o) {
            const float* g = o.grad.data();
            const float* va = ai->data.data();
            const float* vp = pi->data.data();
            const float* vn = ni->data.data();
            // The same subgradient convention as a relu/(x-relu(x)) split: at
            // exactly zero the negative branch carries the coefficient grad.
            float* da = wants_grad(ai) ? grad_buf(*ai) : nullptr;
            float* dp = wants_grad(pi) ? grad_buf(*pi) : nullptr;
            float* dn = wants_grad(ni) ? grad_buf(*ni) : nullptr;
            for (int64_t r = 0; r < m; ++r) {
                int64_t b = (r / k) * n;
                for (int64_t c = 0; c < n; ++c) {
                    float x = va[r * n + c], gr = g[r * n + c];
                    if (da)
                        da[r * n + c] += gr * (x > 0.0f ? vp[b + c] : vn[b + c]);
                    if (x >= 0.0f) {
                        if (dp) dp[b + c] += gr * x;
                    } else if (dn) {
                        dn[b + c] += gr * x;
                    }
                }
            }
        });
}

Tensor signed_dot(const Tensor& a, const Tensor& pos, const Tensor& neg, int64_t k) {
    check_signed_op("signed_dot", a, pos, neg, k);
    int64_t m = a.shape()[0], n = a.shape()[1];
    const auto av = a.values();
    const auto pv = pos.values();
    const auto nv = neg.values();
    std::vector<float> out(static_cast<size_t>(m));
    for (int64_t r = 0; r < m; ++r) {
        const float* pa = av.data() + r * n;
        const float* pp = pv.data() + (r / k) * n;
        const float* pn = nv.data() + (r / k) * n;
        // Eight float lanes with the branchless max/min split (see
        // signed_mix); fixed lane association keeps results bit-deterministic
        // across runs, and the float accumulation error matches the float
        // products upstream.
        float lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
        int64_t c = 0;
        for (; c + 8 <= n; c += 8)
            for (int64_t j = 0; j < 8; ++j) {
                float x = pa[c + j];
                lane[j] += std::max(x, 0.0f) * pp[c + j] + std::min(x, 0.0f) * pn[c + j];
            }
        double acc = 0.0;
        for (; c < n; ++c) {
            float x = pa[c];
            acc += static_cast<double>(std::max(x, 0.0f)) * pp[c] +
                   static_cast<double>(std::min(x, 0.0f)) * pn[c];
        }
        acc += (static_cast<double>(lane[0]) + lane[1]) + (static_cast<double>(lane[2]) + lane[3]) +
               ((static_cast<double>(lane[4]) + lane[5]) + (static_cast<double>(lane[6]) + lane[7]));
        out[static_cast<size_t>(r)] = static_cast<float>(acc);
    }
    auto ai = a.impl(), pi = pos.impl(), ni = neg.impl();
    return make_result({m}, std::move(out), "signed_dot", {a, pos, neg},
        [ai, pi, ni, m, n, k](TensorImpl& o) {
            const float* g = o.grad.data();
            const float* va = ai->data.data();
            const float* vp = pi->data.data();
            const float* vn = ni->data.data();
            float* da = wants_grad(ai) ? grad_buf(*ai) : nullptr;
            float* dp = wants_grad(pi) ? grad_buf(*pi) : nullptr;
            float* dn = wants_grad(ni) ? grad_buf(*ni) : nullptr;
            for (int64_t r = 0; r < m; ++r) {
                int64_t b = (r / k) * n;
                float gr = g[r];
                for (int64_t c = 0; c < n; ++c) {
                    float x = va[r * n + c];
                    if (da)
                        da[r * n + c] += gr * (x > 0.0f ? vp[b + c] : vn[b + c]);
                    if (x >= 0.0f) {
                        if (dp) dp[b + c] += gr * x;
                    } else if (dn) {
                        dn[b + c] += gr * x;
                    }
                }
            }
        });
}

namespace {

Tensor row_extreme(const Tensor& a, bool take_min) {
    const char* op = take_min ? "row_min" : "row_max";
    check_defined(a.impl(), op);
    if (a.rank() != 2) throw ShapeError(std::string(op) + ": operand must be a matrix");
    int64_t m = a.shape()[0], n = a.shape()[1];
    if (n == 0) throw ShapeError(std::string(op) + ": rows are empty");
    const auto av = a.values();
    std::vector<float> out(static_cast<size_t>(m));
    auto arg = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(m));
    for (int64_t r = 0; r < m; ++r) {
        int64_t best = 0;
        for (int64_t c = 1; c < n; ++c) {
            float v = av[static_cast<size_t>(r * n + c)];
            float b = av[static_cast<size_t>(r * n + best)];
            // Strict comparison keeps the lowest index on ties.
            if (take_min ? (v < b) : (v > b)) best = c;
        }
        out[static_cast<size_t>(r)] = av[static_cast<size_t>(r * n + best)];
        (*arg)[static_cast<size_t>(r)] = static_cast<int32_t>(best);
    }
    auto ai = a.impl();
    return make_result({m}, std::move(out), op, {a},
        [ai, arg, m, n](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            for (int64_t r = 0; r < m; ++r)
                da[r * n + (*arg)[static_cast<size_t>(r)]] += g[r];
        });
}

} // namespace

Tensor row_min(const Tensor& a) { return row_extreme(a, true); }
Tensor row_max(const Tensor& a) { return row_extreme(a, false); }

// ---- indexing and layout -----------------------------------------------------

Tensor select_row(const Tensor& a, int64_t row) {
    check_defined(a.impl(), "select_row");
    if (a.rank() != 2) throw ShapeError("select_row: operand must be a matrix");
    int64_t m = a.shape()[0], n = a.shape()[1];
    if (row < 0 || row >= m) throw ShapeError("select_row: row index out of range");
    const auto av = a.values();
    std::vector<float> out(av.begin() + static_cast<size_t>(row * n),
                           av.begin() + static_cast<size_t>((row + 1) * n));
    auto ai = a.impl();
    return make_result({n}, std::move(out), "select_row", {a},
        [ai, row, n](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            for (int64_t c = 0; c < n; ++c) da[row * n + c] += g[c];
        });
}

Tensor take_per_row(const Tensor& a, const std::vector<int32_t>& cols) {
    check_defined(a.impl(), "take_per_row");
    if (a.rank() != 2) throw ShapeError("take_per_row: operand must be a matrix");
    int64_t m = a.shape()[0], n = a.shape()[1];
    if (static_cast<int64_t>(cols.size()) != m)
        throw ShapeError("take_per_row: need one column index per row");
    const auto av = a.values();
    std::vector<float> out(static_cast<size_t>(m));
    for (int64_t r = 0; r < m; ++r) {
        int32_t c = cols[static_cast<size_t>(r)];
        if (c < 0 || c >= n) throw ShapeError("take_per_row: column index out of range");
        out[static_cast<size_t>(r)] = av[static_cast<size_t>(r * n + c)];
    }
    auto ai = a.impl();
    auto idx = std::make_shared<std::vector<int32_t>>(cols);
    return make_result({m}, std::move(out), "take_per_row", {a},
        [ai, idx, m, n](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            for (int64_t r = 0; r < m; ++r)
                da[r * n + (*idx)[static_cast<size_t>(r)]] += g[r];
        });
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_defined(a.impl(), "reshape");
    if (size_of(shape) != a.size())
        throw ShapeError("reshape: new shape " + shape_str(shape) +
                         " does not preserve size " + std::to_string(a.size()));
    std::vector<float> out(a.values().begin(), a.values().end());
    auto ai = a.impl();
    return make_result(std::move(shape), std::move(out), "reshape", {a},
        [ai](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            for (size_t i = 0; i < o.data.size(); ++i) da[i] += g[i];
        });
}

Tensor repeat_rows(const Tensor& a, int64_t k) {
    check_defined(a.impl(), "repeat_rows");
    if (k <= 0) throw ShapeError("repeat_rows: k must be positive");
    int64_t m = a.rows(), n = a.cols();
    if (a.rank() != 2) throw ShapeError("repeat_rows: operand must be a matrix");
    const auto av = a.values();
    std::vector<float> out(static_cast<size_t>(m * k * n));
    for (int64_t r = 0; r < m; ++r)
        for (int64_t j = 0; j < k; ++j)
            std::memcpy(out.data() + (r * k + j) * n, av.data() + r * n,
                        static_cast<size_t>(n) * sizeof(float));
    auto ai = a.impl();
    return make_result({m * k, n}, std::move(out), "repeat_rows", {a},
        [ai, m, n, k](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            for (int64_t r = 0; r < m; ++r)
                for (int64_t j = 0; j < k; ++j)
                    for (int64_t c = 0; c < n; ++c)
                        da[r * n + c] += g[(r * k + j) * n + c];
        });
}

Tensor tile_rows(const Tensor& a, int64_t k) {
    check_defined(a.impl(), "tile_rows");
    if (k <= 0) throw ShapeError("tile_rows: k must be positive");
    if (a.rank() != 2) throw ShapeError("tile_rows: operand must be a matrix");
    int64_t m = a.shape()[0], n = a.shape()[1];
    const auto av = a.values();
    std::vector<float> out(static_cast<size_t>(m * k * n));
    for (int64_t j = 0; j < k; ++j)
        std::memcpy(out.data() + j * m * n, av.data(),
                    static_cast<size_t>(m * n) * sizeof(float));
    auto ai = a.impl();
    return make_result({m * k, n}, std::move(out), "tile_rows", {a},
        [ai, m, n, k](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            for (int64_t j = 0; j < k; ++j)
                for (int64_t i = 0; i < m * n; ++i) da[i] += g[j * m * n + i];
        });
}

Tensor class_difference_rows(const Tensor& a, const std::vector<int32_t>& labels) {
    check_defined(a.impl(), "class_difference_rows");
    if (a.rank() != 1 && a.rank() != 2)
        throw ShapeError("class_difference_rows: operand must be a matrix or vector");
    bool vec = a.rank() == 1;
    int64_t classes = vec ? a.shape()[0] : a.shape()[0];
    int64_t n = vec ? 1 : a.shape()[1];
    if (classes < 2) throw ShapeError("class_difference_rows: need at least two classes");
    int64_t m = static_cast<int64_t>(labels.size());
    if (m == 0) throw ShapeError("class_difference_rows: label list is empty");
    for (int32_t y : labels)
        if (y < 0 || y >= classes)
            throw ShapeError("class_difference_rows: label out of range");
    int64_t rows_per = classes - 1;
    const auto av = a.values();
    std::vector<float> out(static_cast<size_t>(m * rows_per * n));
    for (int64_t s = 0; s < m; ++s) {
        int64_t y = labels[static_cast<size_t>(s)];
        int64_t e = 0;
        for (int64_t i = 0; i < classes; ++i) {
            if (i == y) continue;
            float* dst = out.data() + (s * rows_per + e) * n;
            const float* py = av.data() + y * n;
            const float* pi = av.data() + i * n;
            for (int64_t c = 0; c < n; ++c) dst[c] = py[c] - pi[c];
            ++e;
        }
    }
    Shape shape = vec ? Shape{m * rows_per} : Shape{m * rows_per, n};
    auto ai = a.impl();
    auto lab = std::make_shared<std::vector<int32_t>>(labels);
    return make_result(std::move(shape), std::move(out), "class_difference_rows", {a},
        [ai, lab, classes, n, m, rows_per](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            for (int64_t s = 0; s < m; ++s) {
                int64_t y = (*lab)[static_cast<size_t>(s)];
                int64_t e = 0;
                for (int64_t i = 0; i < classes; ++i) {
                    if (i == y) continue;
                    const float* gr = g + (s * rows_per + e) * n;
                    for (int64_t c = 0; c < n; ++c) {
                        da[y * n + c] += gr[c];
                        da[i * n + c] -= gr[c];
                    }
                    ++e;
                }
            }
        });
}

Tensor margins_to_pseudo_logits(const Tensor& margins,
                                const std::vector<int32_t>& labels,
                                int64_t classes) {
    check_defined(margins.impl(), "margins_to_pseudo_logits");
    if (classes < 2)
        throw ShapeError("margins_to_pseudo_logits: need at least two classes");
    int64_t m = static_cast<int64_t>(labels.size());
    int64_t rows_per = classes - 1;
    if (margins.rank() != 2 || margins.shape()[0] != m ||
        margins.shape()[1] != rows_per)
        throw ShapeError("margins_to_pseudo_logits: margins must be [labels, classes-1]");
    for (int32_t y : labels)
        if (y < 0 || y >= classes)
            throw ShapeError("margins_to_pseudo_logits: label out of range");
    const auto av = margins.values();
    std::vector<float> out(static_cast<size_t>(m * classes));
    for (int64_t s = 0; s < m; ++s) {
        int64_t y = labels[static_cast<size_t>(s)];
        int64_t e = 0;
        for (int64_t i = 0; i < classes; ++i) {
            if (i == y) { out[static_cast<size_t>(s * classes + i)] = 0.0f; continue; }
            out[static_cast<size_t>(s * classes + i)] = -av[static_cast<size_t>(s * rows_per + e)];
            ++e;
        }
    }
    auto ai = margins.impl();
    auto lab = std::make_shared<std::vector<int32_t>>(labels);
    return make_result({m, classes}, std::move(out), "margins_to_pseudo_logits",
        {margins}, [ai, lab, classes, m, rows_per](TensorImpl& o) {
            if (!wants_grad(ai)) return;
            float* da = grad_buf(*ai);
            const float* g = o.grad.data();
            for (int64_t s = 0; s < m; ++s) {
                int64_t y = (*lab)[static_cast<size_t>(s)];
                int64_t e = 0;
                for (int64_t i = 0; i < classes; ++i) {
                    if (i == y) continue;
                    da[s * rows_per + e] -= g[s * classes + i];
                    ++e;
                }
            }
        });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& labels) {
    check_defined(logits.impl(), "cross_entropy");
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be a matrix");
    int64_t m = logits.shape()[0], c = logits.shape()[1];
    if (static_cast<int64_t>(labels.size()) != m)
        throw ShapeError("cross_entropy: need one label per row");
    for (int32_t y : labels)
        if (y < 0 || y >= c) throw ShapeError("cross_entropy: label out of range");
    const auto lv = logits.values();
    double acc = 0.0;
    for (int64_t r = 0; r < m; ++r) {
        const float* row = lv.data() + r * c;
        float mx = row[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double se = 0.0;
        for (int64_t j = 0; j < c; ++j) se += std::exp(static_cast<double>(row[j] - mx));
        acc += std::log(se) + static_cast<double>(mx) -
               static_cast<double>(row[labels[static_cast<size_t>(r)]]);
    }
    float loss = static_cast<float>(acc / static_cast<double>(m));
    auto li = logits.impl();
    auto lab = std::make_shared<std::vector<int32_t>>(labels);
    return make_result({}, {loss}, "cross_entropy", {logits},
        [li, lab, m, c](TensorImpl& o) {
            if (!wants_grad(li)) return;
            float* da = grad_buf(*li);
            float g = o.grad[0] / static_cast<float>(m);
            const float* lv2 = li->data.data();
            for (int64_t r = 0; r < m; ++r) {
                const float* row = lv2 + r * c;
                float mx = row[0];
                for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                double se = 0.0;
                for (int64_t j = 0; j < c; ++j)
                    se += std::exp(static_cast<double>(row[j] - mx));
                for (int64_t j = 0; j < c; ++j) {
                    float p = static_cast<float>(
                        std::exp(static_cast<double>(row[j] - mx)) / se);
                    float onehot = j == (*lab)[static_cast<size_t>(r)] ? 1.0f : 0.0f;
                    da[r * c + j] += g * (p - onehot);
                }
            }
        });
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
    check_defined(loss.impl(), "backward");
    TensorImpl* root = loss.impl().get();
    if (root->size() != 1)
        throw ShapeError("backward: loss must be a single-element tensor");
    if (!root->requires_grad)
        throw Error("backward: tensor is not connected to any gradient-requiring input");
    if (!root->node) {
        // A gradient-requiring leaf: its gradient with respect to itself is 1.
        grad_buf(*root)[0] += 1.0f;
        return;
    }
    if (root->node->consumed)
        throw Error("backward: graph already consumed by a previous backward pass");

    // Iterative postorder DFS over nodes; reverse postorder is a topological
    // order, so each node is processed after everything that consumes it.
    struct Frame {
        TensorImpl* impl;
        size_t next = 0;
    };
    std::vector<Frame> stack{{root, 0}};
    std::unordered_set<TensorImpl*> seen{root};
    std::vector<TensorImpl*> order;
    while (!stack.empty()) {
        Frame& f = stack.back();
        auto& ins = f.impl->node->inputs;
        if (f.next < ins.size()) {
            TensorImpl* child = ins[f.next++].get();
            if (child->node && !seen.count(child)) {
                seen.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            order.push_back(f.impl);
            stack.pop_back();
        }
    }

    grad_buf(*root)[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* impl = *it;
        if (!impl->grad.empty()) impl->node->backprop(*impl);
    }

    // Release the graph: closures, edges, and interior gradients. Leaf
    // gradients survive for the caller. A second backward on this result
    // now fails fast on the consumed flag.
    for (TensorImpl* impl : order) {
        impl->node->consumed = true;
        impl->node->backprop = nullptr;
        impl->node->inputs.clear();
        impl->grad.clear();
        impl->grad.shrink_to_fit();
    }
}

std::vector<int32_t> argmax_rows(const Tensor& a) {
    check_defined(a.impl(), "argmax_rows");
    if (a.rank() != 2) throw ShapeError("argmax_rows: operand must be a matrix");
    int64_t m = a.shape()[0], n = a.shape()[1];
    if (n == 0) throw ShapeError("argmax_rows: rows are empty");
    const auto av = a.values();
    std::vector<int32_t> out(static_cast<size_t>(m));
    for (int64_t r = 0; r < m; ++r) {
        int64_t best = 0;
        for (int64_t c = 1; c < n; ++c)
            if (av[static_cast<size_t>(r * n + c)] > av[static_cast<size_t>(r * n + best)])
                best = c;
        out[static_cast<size_t>(r)] = static_cast<int32_t>(best);
    }
    return out;
}

} // namespace certlab
