#include "sflow/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace sflow {

namespace {

std::shared_ptr<detail::TensorImpl> make_impl(std::vector<int> shape) {
    int64_t n = 1;
    for (int e : shape) {
        if (e < 0) throw DataError("tensor extent must be >= 0");
        n *= e;
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->value.assign(static_cast<size_t>(n), 0.0f);
    return impl;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw DataError(msg);
}

MatMap mat_of(detail::TensorImpl& t) {
    const int r = t.shape.size() == 2 ? t.shape[0] : 1;
    const int c = t.shape.size() == 2 ? t.shape[1] : static_cast<int>(t.value.size());
    return MatMap(t.value.data(), r, c);
}

MatMap grad_of(detail::TensorImpl& t) {
    t.ensure_grad();
    const int r = t.shape.size() == 2 ? t.shape[0] : 1;
    const int c = t.shape.size() == 2 ? t.shape[1] : static_cast<int>(t.value.size());
    return MatMap(t.grad.data(), r, c);
}

bool track(const Graph& g, std::initializer_list<const Tensor*> inputs) {
    if (!g.recording()) return false;
    for (const Tensor* t : inputs)
        if (t->needs_grad()) return true;
    return false;
}

using Impl = std::shared_ptr<detail::TensorImpl>;

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool needs_grad) {
    Tensor t;
    t.impl_ = make_impl(std::move(shape));
    t.impl_->needs_grad = needs_grad;
    return t;
}

Tensor Tensor::full(std::vector<int> shape, float v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::span<const float> values) {
    Tensor t = zeros(std::move(shape));
    require(static_cast<size_t>(t.size()) == values.size(), "from_data: length mismatch");
    std::copy(values.begin(), values.end(), t.impl_->value.begin());
    return t;
}

Tensor Tensor::scalar(float v) { return full({1}, v); }

Tensor Tensor::clone() const {
    Tensor t = zeros(impl_->shape);
    t.impl_->value = impl_->value;
    t.impl_->needs_grad = impl_->needs_grad;
    return t;
}

void Graph::backward(Tensor& loss) {
    if (loss.size() != 1) throw DataError("backward: loss must be scalar");
    loss.ensure_grad();
    loss.grad_data()[0] = 1.0f;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

void backward(Graph& g, Tensor& loss) { g.backward(loss); }

// ---- matmul ----
//
// Forward products are computed row by row so that each output row depends
// only on the matching input row; a single-row call produces bit-identical
// results to the same row inside a batch.

namespace {
void rowwise_product(ConstMatMap a, ConstMatMap b, MatMap out) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) out.row(i).noalias() = a.row(i) * b;
}
void rowwise_product_nt(ConstMatMap a, ConstMatMap b, MatMap out) {
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        out.row(i).noalias() = a.row(i) * b.transpose();
}
}  // namespace

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
    require(a.cols() == b.rows(), "matmul: inner extents mismatch");
    Tensor out = Tensor::zeros({a.rows(), b.cols()});
    rowwise_product(a.mat(), b.mat(), out.mat());
    if (track(g, {&a, &b})) {
        out.set_needs_grad(true);
        g.record([ai = a.impl_, bi = b.impl_, oi = out.impl_] {
            if (oi->grad.empty()) return;
            MatMap dC = grad_of(*oi);
            if (ai->needs_grad) grad_of(*ai).noalias() += dC * mat_of(*bi).transpose();
            if (bi->needs_grad) grad_of(*bi).noalias() += mat_of(*ai).transpose() * dC;
        });
    }
    return out;
}

Tensor matmul_nt(Graph& g, const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul_nt: rank-2 tensors required");
    require(a.cols() == b.cols(), "matmul_nt: inner extents mismatch");
    Tensor out = Tensor::zeros({a.rows(), b.rows()});
    rowwise_product_nt(a.mat(), b.mat(), out.mat());
    if (track(g, {&a, &b})) {
        out.set_needs_grad(true);
        g.record([ai = a.impl_, bi = b.impl_, oi = out.impl_] {
            if (oi->grad.empty()) return;
            MatMap dC = grad_of(*oi);
            if (ai->needs_grad) grad_of(*ai).noalias() += dC * mat_of(*bi);
            if (bi->needs_grad) grad_of(*bi).noalias() += dC.transpose() * mat_of(*ai);
        });
    }
    return out;
}

// ---- softmax over unblocked entries ----
//
// Blocked entries never enter the row max or the normalizer, so outputs and
// gradients are invariant to any value stored at a blocked position.

Tensor softmax_masked(Graph& g, const Tensor& logits, const Tensor& mask,
                      bool* fully_blocked) {
    require(logits.rank() == 2, "softmax_masked: rank-2 logits required");
    require(logits.shape() == mask.shape(), "softmax_masked: mask shape mismatch");
    const int p = logits.rows(), q = logits.cols();
    Tensor out = Tensor::zeros({p, q});
    if (fully_blocked) *fully_blocked = false;

    ConstMatMap x = logits.mat();
    ConstMatMap m = mask.mat();
    MatMap y = out.mat();
    for (int i = 0; i < p; ++i) {
        double maxv = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < q; ++j)
            if (!is_blocked_value(m(i, j)))
                maxv = std::max(maxv, static_cast<double>(x(i, j)) + m(i, j));
        if (maxv == -std::numeric_limits<double>::infinity()) {
            if (fully_blocked) *fully_blocked = true;
            continue;  // row stays all zeros
        }
        double denom = 0.0;
        for (int j = 0; j < q; ++j) {
            if (is_blocked_value(m(i, j))) continue;
            denom += std::exp(static_cast<double>(x(i, j)) + m(i, j) - maxv);
        }
        for (int j = 0; j < q; ++j) {
            if (is_blocked_value(m(i, j))) continue;
            y(i, j) = static_cast<float>(
                std::exp(static_cast<double>(x(i, j)) + m(i, j) - maxv) / denom);
        }
    }

    if (track(g, {&logits})) {
        out.set_needs_grad(true);
        g.record([xi = logits.impl_, mi = mask.impl_, oi = out.impl_] {
            if (oi->grad.empty() || !xi->needs_grad) return;
            MatMap yv = mat_of(*oi);
            MatMap dy = grad_of(*oi);
            MatMap mm = mat_of(*mi);
            MatMap dx = grad_of(*xi);
            for (Eigen::Index i = 0; i < yv.rows(); ++i) {
                double dot = 0.0;
                for (Eigen::Index j = 0; j < yv.cols(); ++j)
                    dot += static_cast<double>(yv(i, j)) * dy(i, j);
                for (Eigen::Index j = 0; j < yv.cols(); ++j) {
                    if (is_blocked_value(mm(i, j))) continue;  // exactly zero gradient
                    dx(i, j) += yv(i, j) * (dy(i, j) - static_cast<float>(dot));
                }
            }
        });
    }
    return out;
}

// ---- layer norm ----

Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& sc, const Tensor& sh) {
    require(x.rank() == 2, "layer_norm: rank-2 input required");
    const int p = x.rows(), d = x.cols();
    require(sc.size() == d && sh.size() == d, "layer_norm: affine extent mismatch");
    constexpr float eps = 1e-5f;

    Tensor out = Tensor::zeros({p, d});
    std::vector<float> means(static_cast<size_t>(p)), invs(static_cast<size_t>(p));
    ConstMatMap xv = x.mat();
    MatMap y = out.mat();
    for (int i = 0; i < p; ++i) {
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xv(i, j);
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double dev = xv(i, j) - mean;
            var += dev * dev;
        }
        var /= d;
        const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
        means[static_cast<size_t>(i)] = static_cast<float>(mean);
        invs[static_cast<size_t>(i)] = inv;
        for (int j = 0; j < d; ++j)
            y(i, j) = (xv(i, j) - static_cast<float>(mean)) * inv * sc.data()[j] +
                      sh.data()[j];
    }

    if (track(g, {&x, &sc, &sh})) {
        out.set_needs_grad(true);
        g.record([xi = x.impl_, sci = sc.impl_, shi = sh.impl_, oi = out.impl_,
                  means = std::move(means), invs = std::move(invs)] {
            if (oi->grad.empty()) return;
            MatMap dy = grad_of(*oi);
            MatMap xv2 = mat_of(*xi);
            const float* scv = sci->value.data();
            const Eigen::Index p2 = xv2.rows(), d2 = xv2.cols();
            for (Eigen::Index i = 0; i < p2; ++i) {
                const float mean = means[static_cast<size_t>(i)];
                const float inv = invs[static_cast<size_t>(i)];
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (Eigen::Index j = 0; j < d2; ++j) {
                    const float xhat = (xv2(i, j) - mean) * inv;
                    const float dxhat = dy(i, j) * scv[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += static_cast<double>(dxhat) * xhat;
                    if (sci->needs_grad) grad_of(*sci).data()[j] += dy(i, j) * xhat;
                    if (shi->needs_grad) grad_of(*shi).data()[j] += dy(i, j);
                }
                if (xi->needs_grad) {
                    MatMap dx = grad_of(*xi);
                    const float mean_dxhat = static_cast<float>(sum_dxhat / d2);
                    const float mean_dxx = static_cast<float>(sum_dxhat_xhat / d2);
                    for (Eigen::Index j = 0; j < d2; ++j) {
                        const float xhat = (xv2(i, j) - mean) * inv;
                        const float dxhat = dy(i, j) * scv[j];
                        dx(i, j) += inv * (dxhat - mean_dxhat - xhat * mean_dxx);
                    }
                }
            }
        });
    }
    return out;
}

// ---- elementwise and broadcast ----

namespace {
template <class Fwd, class Bwd>
Tensor binary_same_shape(Graph& g, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd,
                         const char* name) {
    require(a.shape() == b.shape(), std::string(name) + ": shape mismatch");
    Tensor out = Tensor::zeros(a.shape());
    fwd(a, b, out);
    if (track(g, {&a, &b})) {
        out.set_needs_grad(true);
        g.record([ai = a.impl_, bi = b.impl_, oi = out.impl_, bwd] {
            if (oi->grad.empty()) return;
            bwd(*ai, *bi, *oi);
        });
    }
    return out;
}
}  // namespace

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    return binary_same_shape(
        g, a, b,
        [](const Tensor& x, const Tensor& y, Tensor& o) {
            o.mat() = x.mat() + y.mat();
        },
        [](detail::TensorImpl& ai, detail::TensorImpl& bi, detail::TensorImpl& oi) {
            MatMap dC = grad_of(oi);
            if (ai.needs_grad) grad_of(ai) += dC;
            if (bi.needs_grad) grad_of(bi) += dC;
        },
        "add");
}

Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
    return binary_same_shape(
        g, a, b,
        [](const Tensor& x, const Tensor& y, Tensor& o) {
            o.mat() = x.mat() - y.mat();
        },
        [](detail::TensorImpl& ai, detail::TensorImpl& bi, detail::TensorImpl& oi) {
            MatMap dC = grad_of(oi);
            if (ai.needs_grad) grad_of(ai) += dC;
            if (bi.needs_grad) grad_of(bi) -= dC;
        },
        "sub");
}

Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
    return binary_same_shape(
        g, a, b,
        [](const Tensor& x, const Tensor& y, Tensor& o) {
            o.mat() = x.mat().cwiseProduct(y.mat());
        },
        [](detail::TensorImpl& ai, detail::TensorImpl& bi, detail::TensorImpl& oi) {
            MatMap dC = grad_of(oi);
            if (ai.needs_grad) grad_of(ai) += dC.cwiseProduct(mat_of(bi));
            if (bi.needs_grad) grad_of(bi) += dC.cwiseProduct(mat_of(ai));
        },
        "mul");
}

Tensor scale(Graph& g, const Tensor& a, float s) {
    Tensor out = Tensor::zeros(a.shape());
    out.mat() = a.mat() * s;
    if (track(g, {&a})) {
        out.set_needs_grad(true);
        g.record([ai = a.impl_, oi = out.impl_, s] {
            if (oi->grad.empty() || !ai->needs_grad) return;
            grad_of(*ai) += grad_of(*oi) * s;
        });
    }
    return out;
}

Tensor add_scalar(Graph& g, const Tensor& a, float s) {
    Tensor out = Tensor::zeros(a.shape());
    out.mat() = a.mat().array() + s;
    if (track(g, {&a})) {
        out.set_needs_grad(true);
        g.record([ai = a.impl_, oi = out.impl_] {
            if (oi->grad.empty() || !ai->needs_grad) return;
            grad_of(*ai) += grad_of(*oi);
        });
    }
    return out;
}

Tensor add_rowvec(Graph& g, const Tensor& x, const Tensor& v) {
    require(x.rank() == 2 && v.size() == x.cols(), "add_rowvec: extent mismatch");
    Tensor out = Tensor::zeros(x.shape());
    out.mat() = x.mat().rowwise() + v.mat().row(0);
    if (track(g, {&x, &v})) {
        out.set_needs_grad(true);
        g.record([xi = x.impl_, vi = v.impl_, oi = out.impl_] {
            if (oi->grad.empty()) return;
            MatMap dC = grad_of(*oi);
            if (xi->needs_grad) grad_of(*xi) += dC;
            if (vi->needs_grad) grad_of(*vi).row(0) += dC.colwise().sum();
        });
    }
    return out;
}

Tensor mul_rowvec(Graph& g, const Tensor& x, const Tensor& v) {
    require(x.rank() == 2 && v.size() == x.cols(), "mul_rowvec: extent mismatch");
    Tensor out = Tensor::zeros(x.shape());
    out.mat() = x.mat().array().rowwise() * v.mat().row(0).array();
    if (track(g, {&x, &v})) {
        out.set_needs_grad(true);
        g.record([xi = x.impl_, vi = v.impl_, oi = out.impl_] {
            if (oi->grad.empty()) return;
            MatMap dC = grad_of(*oi);
            if (xi->needs_grad)
                grad_of(*xi).array() += dC.array().rowwise() * mat_of(*vi).row(0).array();
            if (vi->needs_grad)
                grad_of(*vi).row(0) += dC.cwiseProduct(mat_of(*xi)).colwise().sum();
        });
    }
    return out;
}

Tensor gelu(Graph& g, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const float* xv = x.data();
    float* y = out.data();
    const int64_t n = x.size();
    constexpr float inv_sqrt2 = 0.70710678f;
    for (int64_t i = 0; i < n; ++i)
        y[i] = 0.5f * xv[i] * (1.0f + std::erf(xv[i] * inv_sqrt2));
    if (track(g, {&x})) {
        out.set_needs_grad(true);
        g.record([xi = x.impl_, oi = out.impl_] {
            if (oi->grad.empty() || !xi->needs_grad) return;
            xi->ensure_grad();
            constexpr float inv_sqrt2pi = 0.39894228f;
            for (size_t i = 0; i < xi->value.size(); ++i) {
                const float v = xi->value[i];
                const float cdf = 0.5f * (1.0f + std::erf(v * 0.70710678f));
                const float pdf = inv_sqrt2pi * std::exp(-0.5f * v * v);
                xi->grad[i] += oi->grad[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// ---- slicing / concatenation ----

Tensor slice_rows(Graph& g, const Tensor& x, int start, int count) {
    require(x.rank() == 2, "slice_rows: rank-2 input required");
    require(start >= 0 && count >= 0 && start + count <= x.rows(),
            "slice_rows: range out of bounds");
    Tensor out = Tensor::zeros({count, x.cols()});
    out.mat() = x.mat().middleRows(start, count);
    if (track(g, {&x})) {
        out.set_needs_grad(true);
        g.record([xi = x.impl_, oi = out.impl_, start, count] {
            if (oi->grad.empty() || !xi->needs_grad) return;
            grad_of(*xi).middleRows(start, count) += grad_of(*oi);
        });
    }
    return out;
}

Tensor slice_cols(Graph& g, const Tensor& x, int start, int count) {
    require(x.rank() == 2, "slice_cols: rank-2 input required");
    require(start >= 0 && count >= 0 && start + count <= x.cols(),
            "slice_cols: range out of bounds");
    Tensor out = Tensor::zeros({x.rows(), count});
    out.mat() = x.mat().middleCols(start, count);
    if (track(g, {&x})) {
        out.set_needs_grad(true);
        g.record([xi = x.impl_, oi = out.impl_, start, count] {
            if (oi->grad.empty() || !xi->needs_grad) return;
            grad_of(*xi).middleCols(start, count) += grad_of(*oi);
        });
    }
    return out;
}

Tensor concat_rows(Graph& g, const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_rows: empty input");
    const int cols = parts[0].cols();
    int total = 0;
    for (const Tensor& t : parts) {
        require(t.rank() == 2 && t.cols() == cols, "concat_rows: column mismatch");
        total += t.rows();
    }
    Tensor out = Tensor::zeros({total, cols});
    int at = 0;
    bool needs = false;
    for (const Tensor& t : parts) {
        out.mat().middleRows(at, t.rows()) = t.mat();
        at += t.rows();
        needs = needs || t.needs_grad();
    }
    if (g.recording() && needs) {
        out.set_needs_grad(true);
        std::vector<Impl> impls;
        impls.reserve(parts.size());
        for (const Tensor& t : parts) impls.push_back(t.impl_);
        g.record([impls = std::move(impls), oi = out.impl_] {
            if (oi->grad.empty()) return;
            MatMap dC = grad_of(*oi);
            int row = 0;
            for (const Impl& pi : impls) {
                const int r = pi->shape[0];
                if (pi->needs_grad) grad_of(*pi) += dC.middleRows(row, r);
                row += r;
            }
        });
    }
    return out;
}

Tensor concat_cols(Graph& g, const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: empty input");
    const int rows = parts[0].rows();
    int total = 0;
    for (const Tensor& t : parts) {
        require(t.rank() == 2 && t.rows() == rows, "concat_cols: row mismatch");
        total += t.cols();
    }
    Tensor out = Tensor::zeros({rows, total});
    int at = 0;
    bool needs = false;
    for (const Tensor& t : parts) {
        out.mat().middleCols(at, t.cols()) = t.mat();
        at += t.cols();
        needs = needs || t.needs_grad();
    }
    if (g.recording() && needs) {
        out.set_needs_grad(true);
        std::vector<Impl> impls;
        impls.reserve(parts.size());
        for (const Tensor& t : parts) impls.push_back(t.impl_);
        g.record([impls = std::move(impls), oi = out.impl_] {
            if (oi->grad.empty()) return;
            MatMap dC = grad_of(*oi);
            int col = 0;
            for (const Impl& pi : impls) {
                const int c = pi->shape[1];
                if (pi->needs_grad) grad_of(*pi) += dC.middleCols(col, c);
                col += c;
            }
        });
    }
    return out;
}

// ---- row gating ----

Tensor mask_rows(Graph& g, const Tensor& x, const std::vector<uint8_t>& keep) {
    require(x.rank() == 2 && static_cast<int>(keep.size()) == x.rows(),
            "mask_rows: keep length mismatch");
    Tensor out = Tensor::zeros(x.shape());
    for (int i = 0; i < x.rows(); ++i)
        if (keep[static_cast<size_t>(i)]) out.mat().row(i) = x.mat().row(i);
    if (track(g, {&x})) {
        out.set_needs_grad(true);
        g.record([xi = x.impl_, oi = out.impl_, keep] {
            if (oi->grad.empty() || !xi->needs_grad) return;
            MatMap dC = grad_of(*oi);
            MatMap dx = grad_of(*xi);
            for (Eigen::Index i = 0; i < dC.rows(); ++i)
                if (keep[static_cast<size_t>(i)]) dx.row(i) += dC.row(i);
        });
    }
    return out;
}

Tensor add_rows(Graph& g, const Tensor& y, const Tensor& delta,
                const std::vector<uint8_t>& keep) {
    require(y.shape() == delta.shape(), "add_rows: shape mismatch");
    require(static_cast<int>(keep.size()) == y.rows(), "add_rows: keep length mismatch");
    Tensor out = Tensor::zeros(y.shape());
    out.mat() = y.mat();
    for (int i = 0; i < y.rows(); ++i)
        if (keep[static_cast<size_t>(i)]) out.mat().row(i) += delta.mat().row(i);
    if (track(g, {&y, &delta})) {
        out.set_needs_grad(true);
        g.record([yi = y.impl_, di = delta.impl_, oi = out.impl_, keep] {
            if (oi->grad.empty()) return;
            MatMap dC = grad_of(*oi);
            if (yi->needs_grad) grad_of(*yi) += dC;
            if (di->needs_grad) {
                MatMap dd = grad_of(*di);
                for (Eigen::Index i = 0; i < dC.rows(); ++i)
                    if (keep[static_cast<size_t>(i)]) dd.row(i) += dC.row(i);
            }
        });
    }
    return out;
}

// ---- reductions / lookups ----

Tensor sum_all(Graph& g, const Tensor& x) {
    double acc = 0.0;
    for (float v : x.values()) acc += v;
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    if (track(g, {&x})) {
        out.set_needs_grad(true);
        g.record([xi = x.impl_, oi = out.impl_] {
            if (oi->grad.empty() || !xi->needs_grad) return;
            xi->ensure_grad();
            const float d = oi->grad[0];
            for (float& gv : xi->grad) gv += d;
        });
    }
    return out;
}

Tensor embedding_rows(Graph& g, const Tensor& table, const std::vector<int>& ids) {
    require(table.rank() == 2, "embedding_rows: rank-2 table required");
    const int d = table.cols();
    Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] >= 0 && ids[i] < table.rows(), "embedding_rows: id out of range");
        out.mat().row(static_cast<Eigen::Index>(i)) = table.mat().row(ids[i]);
    }
    if (track(g, {&table})) {
        out.set_needs_grad(true);
        g.record([ti = table.impl_, oi = out.impl_, ids] {
            if (oi->grad.empty() || !ti->needs_grad) return;
            MatMap dC = grad_of(*oi);
            MatMap dT = grad_of(*ti);
            for (size_t i = 0; i < ids.size(); ++i)
                dT.row(ids[i]) += dC.row(static_cast<Eigen::Index>(i));
        });
    }
    return out;
}

Tensor mse(Graph& g, const Tensor& pred, const Tensor& target) {
    require(pred.shape() == target.shape(), "mse: shape mismatch");
    Tensor diff = sub(g, pred, target);
    Tensor sq = mul(g, diff, diff);
    return scale(g, sum_all(g, sq), 1.0f / static_cast<float>(pred.size()));
}

}  // namespace sflow
