#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sflow {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

/// Additive attention mask value that fully blocks a token pair. With logits
/// bounded by |logit| <= 1e4 the shifted exponent underflows to exactly 0.
constexpr float kBlocked = -1e9f;

inline bool is_blocked_value(float mask_entry) { return mask_entry < -1e8f; }

/// Thrown on contract violations in user-facing inputs (bad shapes, malformed
/// files, inconsistent requests).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown when a computation degenerates numerically (NaN loss, mask audit
/// failure).
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {
struct TensorImpl {
    std::vector<int> shape;
    std::vector<float> value;
    std::vector<float> grad;  // empty until first accumulation
    bool needs_grad = false;

    int64_t size() const { return static_cast<int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0f);
    }
};
}  // namespace detail

/// Dense row-major float32 array with an optional same-shape gradient buffer.
/// Copies are shallow handles to the same storage; values are treated as
/// immutable once an op has consumed them, gradient buffers only accumulate.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool needs_grad = false);
    static Tensor full(std::vector<int> shape, float v);
    static Tensor from_data(std::vector<int> shape, std::span<const float> values);
    static Tensor scalar(float v);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int64_t size() const { return impl_->size(); }

    /// Row/column extents of the 2-D view. Rank-1 tensors view as 1 x n.
    int rows() const { return rank() == 2 ? dim(0) : 1; }
    int cols() const { return rank() == 2 ? dim(1) : static_cast<int>(size()); }

    float* data() { return impl_->value.data(); }
    const float* data() const { return impl_->value.data(); }
    std::span<float> values() { return impl_->value; }
    std::span<const float> values() const { return impl_->value; }

    MatMap mat() { return MatMap(data(), rows(), cols()); }
    ConstMatMap mat() const { return ConstMatMap(data(), rows(), cols()); }

    bool needs_grad() const { return impl_->needs_grad; }
    void set_needs_grad(bool v) { impl_->needs_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }
    void ensure_grad() { impl_->ensure_grad(); }
    void zero_grad() {
        if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
    }
    float* grad_data() { return impl_->grad.data(); }
    const float* grad_data() const { return impl_->grad.data(); }
    std::span<float> grad_values() { return impl_->grad; }
    std::span<const float> grad_values() const { return impl_->grad; }
    MatMap grad_mat() { return MatMap(grad_data(), rows(), cols()); }
    ConstMatMap grad_mat() const { return ConstMatMap(grad_data(), rows(), cols()); }

    /// Deep copy of values (fresh storage, no grad, same needs_grad flag).
    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered tape of executed differentiable operations. backward() replays the
/// recorded closures in reverse execution order exactly once.
class Graph {
public:
    bool recording() const { return recording_; }
    void set_recording(bool v) { recording_ = v; }

    void record(std::function<void()> backward_step) {
        steps_.push_back(std::move(backward_step));
    }

    size_t op_count() const { return steps_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and propagates to every needs_grad tensor
    /// reachable from the tape. Rejects non-scalar losses.
    void backward(Tensor& loss);

    void clear() { steps_.clear(); }

private:
    std::vector<std::function<void()>> steps_;
    bool recording_ = true;
};

// ---- differentiable operations ----

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b);
/// C = A * B^T (shapes [p x q] and [r x q] -> [p x r]).
Tensor matmul_nt(Graph& g, const Tensor& a, const Tensor& b);

/// Row-wise softmax over (logits + mask). Mask entries are 0 or kBlocked;
/// blocked positions output exactly 0 and receive exactly-zero gradients.
/// A fully blocked row yields all zeros and sets *fully_blocked when given.
Tensor softmax_masked(Graph& g, const Tensor& logits, const Tensor& mask,
                      bool* fully_blocked = nullptr);

/// Per-row normalization to zero mean / unit variance (epsilon 1e-5) followed
/// by the affine map x * scale + shift with d-vectors scale, shift.
Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& scale, const Tensor& shift);

Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor scale(Graph& g, const Tensor& a, float s);
Tensor add_scalar(Graph& g, const Tensor& a, float s);
/// x[p x d] + v[d] broadcast over rows.
Tensor add_rowvec(Graph& g, const Tensor& x, const Tensor& v);
/// x[p x d] * v[d] broadcast over rows.
Tensor mul_rowvec(Graph& g, const Tensor& x, const Tensor& v);
Tensor gelu(Graph& g, const Tensor& x);

Tensor slice_rows(Graph& g, const Tensor& x, int start, int count);
Tensor slice_cols(Graph& g, const Tensor& x, int start, int count);
Tensor concat_rows(Graph& g, const std::vector<Tensor>& parts);
Tensor concat_cols(Graph& g, const std::vector<Tensor>& parts);

/// Copy of x with rows where keep[i] == 0 set to zero.
Tensor mask_rows(Graph& g, const Tensor& x, const std::vector<uint8_t>& keep);
/// y with delta added only at rows where keep[i] != 0; other rows are
/// bit-identical to y.
Tensor add_rows(Graph& g, const Tensor& y, const Tensor& delta,
                const std::vector<uint8_t>& keep);

/// Sum of all entries as a [1] tensor (double accumulation).
Tensor sum_all(Graph& g, const Tensor& x);

/// Rows of table selected by ids; gradients scatter-add into table.
Tensor embedding_rows(Graph& g, const Tensor& table, const std::vector<int>& ids);

/// Mean squared error between two same-shape tensors as a [1] tensor.
Tensor mse(Graph& g, const Tensor& pred, const Tensor& target);

void backward(Graph& g, Tensor& loss);

}  // namespace sflow
