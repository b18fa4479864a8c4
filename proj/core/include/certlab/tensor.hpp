#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace certlab {

// Dense float32 tensor with reverse-mode automatic differentiation.
//
// Shapes are rank 0 (scalar), 1, or 2; storage is row-major. Each operation
// that touches a gradient-requiring input appends a node to an implicit
// tape owned by the result (a shared-pointer DAG, so there is no global
// registry and graphs from different threads never interact). backward()
// walks that DAG once in reverse topological order, accumulates gradients
// into every tensor with requires_grad, then releases the graph; calling it
// twice on the same result is an error.
//
// Numeric policy: storage and arithmetic are float32, but full reductions
// (sum / mean / cross_entropy) accumulate in float64 before rounding once.
// Every operation validates that its result is finite and throws
// NumericError otherwise, so divergence surfaces at the op that produced it.
//
// Subgradient conventions at kinks: relu and abs take gradient 0 at 0;
// min/max route the gradient to the selected operand (first operand, or
// lowest index for row reductions, on ties); clamp passes gradient only
// strictly inside the interval.

using Shape = std::vector<int64_t>;

struct TensorImpl;

class Tensor {
public:
    Tensor(); // empty; most member calls on an empty tensor throw

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> values,
                            bool requires_grad = false);
    static Tensor scalar(float value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t size() const;
    int64_t rank() const;
    // Rows/cols of a rank-2 tensor; a rank-1 tensor is treated as one row.
    int64_t rows() const;
    int64_t cols() const;

    std::span<const float> values() const;
    float at(int64_t i) const;
    float at(int64_t r, int64_t c) const;
    float item() const; // value of a single-element tensor

    // Direct mutable access to storage, for optimizer updates and data
    // loading. Must not be used on a tensor that sits inside a live graph.
    float* mutable_data();

    bool requires_grad() const;
    void set_requires_grad(bool value);

    // Gradient accumulated by the last backward(); empty span if none.
    std::span<const float> grad() const;
    void zero_grad();

    // Same storage, detached from the graph and without requires_grad.
    Tensor detach() const;
    // Deep copy of the values (never copies graph state).
    Tensor clone() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

// While at least one guard is alive on a thread, operations on that thread
// record no graph (forward values only). Used by evaluation paths.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// ---- operations ------------------------------------------------------

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x:[m,k], weight:[n,k], bias:[n] -> [m,n]; computes x * weight^T + bias.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor transpose(const Tensor& a);

// Elementwise; shapes must match, except that `b` may be a rank-1 vector
// of length cols(a), broadcast across the rows of `a`.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, float c);
Tensor add_scalar(const Tensor& a, float c);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor min_elem(const Tensor& a, const Tensor& b);
Tensor max_elem(const Tensor& a, const Tensor& b);
Tensor clamp(const Tensor& a, float lo, float hi);

Tensor sum(const Tensor& a);  // -> scalar
Tensor mean(const Tensor& a); // -> scalar
Tensor row_sum(const Tensor& a); // [m,n] -> [m]

// Fused sign-selected broadcasts over row blocks, the workhorses of linear
// bound propagation. a is [B*k, n]; pos/neg are [B, n]; element (r, c) picks
// pick(r,c) = (a[r,c] >= 0 ? pos : neg)[r/k, c].
//   signed_mix -> [B*k, n]: a[r,c] * pick(r,c)
//   signed_dot -> [B*k]   : sum_c a[r,c] * pick(r,c)
Tensor signed_mix(const Tensor& a, const Tensor& pos, const Tensor& neg, int64_t k);
Tensor signed_dot(const Tensor& a, const Tensor& pos, const Tensor& neg, int64_t k);
Tensor row_min(const Tensor& a); // [m,n] -> [m]
Tensor row_max(const Tensor& a); // [m,n] -> [m]

Tensor select_row(const Tensor& a, int64_t row);               // [m,n] -> [n]
Tensor take_per_row(const Tensor& a, const std::vector<int32_t>& cols); // [m,n] -> [m]
Tensor reshape(const Tensor& a, Shape shape);
// [m,n] -> [m*k,n]; row i maps to rows i*k .. i*k+k-1.
Tensor repeat_rows(const Tensor& a, int64_t k);
// [m,n] -> [m*k,n]; the whole matrix repeated k times, block after block.
Tensor tile_rows(const Tensor& a, int64_t k);

// Per-sample class-difference rows. a is [classes, n] (or [classes] treated
// as one column); the result stacks, for each label y in `labels`, the
// classes-1 rows a[y]-a[i] for i != y in ascending order of i.
Tensor class_difference_rows(const Tensor& a, const std::vector<int32_t>& labels);

// Inverse companion of class_difference_rows: spreads per-sample margins
// back over class columns. Row s of the result has 0 in column labels[s]
// and -margins[s][e] in the e-th other column (ascending class order), the
// pseudo-logit form whose cross-entropy penalizes small certified margins.
// margins is [len(labels), classes-1] -> [len(labels), classes].
Tensor margins_to_pseudo_logits(const Tensor& margins,
                                const std::vector<int32_t>& labels,
                                int64_t classes);

// Mean cross-entropy of row-wise softmax against integer labels, with
// row-max subtraction for stability and float64 accumulation.
Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& labels);

// Accumulates d(loss)/d(t) into every requires_grad tensor reachable from
// `loss`, which must be a single-element tensor on a live graph.
void backward(const Tensor& loss);

// argmax over each row, ties resolved to the lowest index.
std::vector<int32_t> argmax_rows(const Tensor& a);

} // namespace certlab
