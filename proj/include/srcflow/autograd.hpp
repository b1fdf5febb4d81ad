#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// A Tape owns every intermediate value. Ops append a node holding the
// result and, when recording, a closure that scatters the node's gradient
// into its inputs. Tape::backward walks the nodes in reverse creation order,
// which is a valid topological order because inputs always precede outputs.
//
// Batched token sequences are stored as (batch * tokens) x channels matrices
// with each example's tokens contiguous; ops that need the sequence structure
// take the batch size explicitly.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "srcflow/error.hpp"

namespace srcflow::ag {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
class Tape;

template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Mat<T>& value() const { return tape->value(id); }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

template <class T>
class Tape {
public:
    using Backward = std::function<void(Tape&, int)>;

    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return record_; }

    Var<T> constant(Mat<T> v) { return push(std::move(v), false, nullptr); }

    /// Leaf whose gradient is wanted (ignored when not recording).
    Var<T> leaf(Mat<T> v) { return push(std::move(v), record_, nullptr); }

    Var<T> push(Mat<T> v, bool needs_grad, Backward bw) {
        nodes_.push_back(Node{std::move(v), Mat<T>(), needs_grad && record_, record_ ? std::move(bw) : nullptr});
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Mat<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
    bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() != 0; }

    /// Gradient buffer of a node, zero-initialized on first access.
    Mat<T>& grad(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates.
    void backward(Var<T> root) {
        if (!record_) throw Error("backward on a non-recording tape");
        if (root.value().size() != 1) throw Error("backward root must be a scalar");
        grad(root.id)(0, 0) += T(1);
        for (int id = root.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.backward && n.needs_grad && n.grad.size() != 0) n.backward(*this, id);
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Drops every node created after the first `n`; outstanding Vars to them become invalid.
    void truncate(std::size_t n) {
        while (nodes_.size() > n) nodes_.pop_back();
    }

private:
    struct Node {
        Mat<T> value;
        Mat<T> grad;
        bool needs_grad;
        Backward backward;
    };
    std::deque<Node> nodes_;
    bool record_;
};

namespace detail {

template <class T, class... V>
bool any_needs(const V&... v) {
    return (v.tape->needs_grad(v.id) || ...);
}

template <class T>
void check_same_shape(const Mat<T>& a, const Mat<T>& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(std::string("shape mismatch in ") + op);
}

/// tanh(z) = 1 - 2 / (exp(2z) + 1); Eigen vectorizes exp but not double tanh.
template <class T>
Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> tanh_via_exp(
    const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& z) {
    return T(1) - T(2) / ((T(2) * z).exp() + T(1));
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::check_same_shape<T>(a.value(), b.value(), "add");
    Mat<T> out = a.value() + b.value();
    const int ia = a.id, ib = b.id;
    return a.tape->push(std::move(out), detail::any_needs<T>(a, b), [ia, ib](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        if (t.needs_grad(ia)) t.grad(ia) += g;
        if (t.needs_grad(ib)) t.grad(ib) += g;
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::check_same_shape<T>(a.value(), b.value(), "sub");
    Mat<T> out = a.value() - b.value();
    const int ia = a.id, ib = b.id;
    return a.tape->push(std::move(out), detail::any_needs<T>(a, b), [ia, ib](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        if (t.needs_grad(ia)) t.grad(ia) += g;
        if (t.needs_grad(ib)) t.grad(ib) -= g;
    });
}

/// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::check_same_shape<T>(a.value(), b.value(), "mul");
    Mat<T> out = a.value().cwiseProduct(b.value());
    const int ia = a.id, ib = b.id;
    return a.tape->push(std::move(out), detail::any_needs<T>(a, b), [ia, ib](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        if (t.needs_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
        if (t.needs_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
    });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
    Mat<T> out = a.value() * s;
    const int ia = a.id;
    return a.tape->push(std::move(out), detail::any_needs<T>(a), [ia, s](Tape<T>& t, int self) {
        t.grad(ia) += t.grad(self) * s;
    });
}

/// a + row, with a 1 x C row broadcast over every row of a.
template <class T>
Var<T> add_row(Var<T> a, Var<T> row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw Error("shape mismatch in add_row");
    Mat<T> out = a.value().rowwise() + row.value().row(0);
    const int ia = a.id, ir = row.id;
    return a.tape->push(std::move(out), detail::any_needs<T>(a, row), [ia, ir](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        if (t.needs_grad(ia)) t.grad(ia) += g;
        if (t.needs_grad(ir)) t.grad(ir) += g.colwise().sum();
    });
}

template <class T>
Var<T> exp(Var<T> a) {
    Mat<T> out = a.value().array().exp().matrix();
    const int ia = a.id;
    return a.tape->push(std::move(out), detail::any_needs<T>(a), [ia](Tape<T>& t, int self) {
        t.grad(ia) += t.grad(self).cwiseProduct(t.value(self));
    });
}

template <class T>
Var<T> tanh(Var<T> a) {
    Mat<T> out = a.value().array().tanh().matrix();
    const int ia = a.id;
    return a.tape->push(std::move(out), detail::any_needs<T>(a), [ia](Tape<T>& t, int self) {
        const auto y = t.value(self).array();
        t.grad(ia).array() += t.grad(self).array() * (T(1) - y * y);
    });
}

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(Var<T> a) {
    const T c = T(0.7978845608028654);  // sqrt(2/pi)
    const T k = T(0.044715);
    const auto x = a.value().array();
    const auto th = detail::tanh_via_exp<T>((c * (x + k * x * x * x)).eval());
    Mat<T> out = (T(0.5) * x * (T(1) + th)).matrix();
    const int ia = a.id;
    return a.tape->push(std::move(out), detail::any_needs<T>(a), [ia, c, k](Tape<T>& t, int self) {
        const auto xv = t.value(ia).array();
        const auto thv = detail::tanh_via_exp<T>((c * (xv + k * xv * xv * xv)).eval());
        const auto dth = (T(1) - thv * thv) * c * (T(1) + T(3) * k * xv * xv);
        const auto dydx = T(0.5) * (T(1) + thv) + T(0.5) * xv * dth;
        t.grad(ia).array() += t.grad(self).array() * dydx;
    });
}

/// x W + b for x (R x in), W (in x out), b (1 x out).
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) throw Error("shape mismatch in linear");
    Mat<T> out = x.value() * w.value();
    out.rowwise() += b.value().row(0);
    const int ix = x.id, iw = w.id, ib = b.id;
    return x.tape->push(std::move(out), detail::any_needs<T>(x, w, b), [ix, iw, ib](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        if (t.needs_grad(ix)) t.grad(ix).noalias() += g * t.value(iw).transpose();
        if (t.needs_grad(iw)) t.grad(iw).noalias() += t.value(ix).transpose() * g;
        if (t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
    });
}

/// Row-wise layer normalization with gain and bias (both 1 x C).
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
    const Mat<T>& xv = x.value();
    const Eigen::Index rows = xv.rows(), cols = xv.cols();
    if (gain.cols() != cols || bias.cols() != cols) throw Error("shape mismatch in layer_norm");
    auto xhat = std::make_shared<Mat<T>>(rows, cols);
    auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    for (Eigen::Index r = 0; r < rows; ++r) {
        const T mean = xv.row(r).mean();
        const T var = (xv.row(r).array() - mean).square().mean();
        const T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[static_cast<std::size_t>(r)] = rs;
        xhat->row(r) = (xv.row(r).array() - mean) * rs;
    }
    Mat<T> out = (xhat->array().rowwise() * gain.value().row(0).array()).matrix();
    out.rowwise() += bias.value().row(0);
    const int ix = x.id, ig = gain.id, ib = bias.id;
    return x.tape->push(std::move(out), detail::any_needs<T>(x, gain, bias),
                        [ix, ig, ib, xhat, rstd](Tape<T>& t, int self) {
                            const Mat<T>& g = t.grad(self);
                            if (t.needs_grad(ig)) t.grad(ig) += g.cwiseProduct(*xhat).colwise().sum();
                            if (t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
                            if (!t.needs_grad(ix)) return;
                            Mat<T>& gx = t.grad(ix);
                            const auto gain_row = t.value(ig).row(0).array();
                            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                                const auto dxhat = (g.row(r).array() * gain_row).eval();
                                const T m1 = dxhat.mean();
                                const T m2 = (dxhat * xhat->row(r).array()).mean();
                                gx.row(r).array() +=
                                    (*rstd)[static_cast<std::size_t>(r)] * (dxhat - m1 - xhat->row(r).array() * m2);
                            }
                        });
}

/// Multi-head scaled dot-product attention over `batch` contiguous
/// sequences. q, k, v are (batch * tokens) x width; heads split the columns.
/// With `causal`, token i attends to tokens 0..i of its own sequence.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int batch, int heads, bool causal) {
    const Mat<T>& qv = q.value();
    const Eigen::Index rows = qv.rows(), width = qv.cols();
    if (batch <= 0 || rows % batch != 0 || width % heads != 0) throw Error("shape mismatch in attention");
    detail::check_same_shape<T>(qv, k.value(), "attention");
    detail::check_same_shape<T>(qv, v.value(), "attention");
    const Eigen::Index n = rows / batch, dh = width / heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));

    auto probs = std::make_shared<std::vector<Mat<T>>>(static_cast<std::size_t>(batch * heads));
    Mat<T> out(rows, width);
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const auto qb = qv.block(b * n, h * dh, n, dh);
            const auto kb = k.value().block(b * n, h * dh, n, dh);
            const auto vb = v.value().block(b * n, h * dh, n, dh);
            Mat<T> s = (qb * kb.transpose()) * sc;
            for (Eigen::Index i = 0; i < n; ++i) {
                const Eigen::Index visible = causal ? i + 1 : n;
                const T mx = s.row(i).head(visible).maxCoeff();
                s.row(i).head(visible) = (s.row(i).head(visible).array() - mx).exp().matrix();
                s.row(i).head(visible) /= s.row(i).head(visible).sum();
                if (visible < n) s.row(i).tail(n - visible).setZero();
            }
            out.block(b * n, h * dh, n, dh).noalias() = s * vb;
            (*probs)[static_cast<std::size_t>(b * heads + h)] = std::move(s);
        }
    }
    const int iq = q.id, ik = k.id, iv = v.id;
    return q.tape->push(std::move(out), detail::any_needs<T>(q, k, v),
                        [iq, ik, iv, batch, heads, n, dh, sc, probs](Tape<T>& t, int self) {
                            const Mat<T>& g = t.grad(self);
                            const bool nq = t.needs_grad(iq), nk = t.needs_grad(ik), nv = t.needs_grad(iv);
                            for (int b = 0; b < batch; ++b) {
                                for (int h = 0; h < heads; ++h) {
                                    const Mat<T>& p = (*probs)[static_cast<std::size_t>(b * heads + h)];
                                    const auto gb = g.block(b * n, h * dh, n, dh);
                                    if (nv) t.grad(iv).block(b * n, h * dh, n, dh).noalias() += p.transpose() * gb;
                                    if (!nq && !nk) continue;
                                    const Mat<T> dp = gb * t.value(iv).block(b * n, h * dh, n, dh).transpose();
                                    Mat<T> ds = p.cwiseProduct(dp);
                                    const auto rowdot = ds.rowwise().sum().eval();
                                    ds -= (p.array().colwise() * rowdot.array()).matrix();
                                    ds *= sc;
                                    if (nq)
                                        t.grad(iq).block(b * n, h * dh, n, dh).noalias() +=
                                            ds * t.value(ik).block(b * n, h * dh, n, dh);
                                    if (nk)
                                        t.grad(ik).block(b * n, h * dh, n, dh).noalias() +=
                                            ds.transpose() * t.value(iq).block(b * n, h * dh, n, dh);
                                }
                            }
                        });
}

/// Sum of all entries, as a 1 x 1 value.
template <class T>
Var<T> sum(Var<T> a) {
    Mat<T> out(1, 1);
    out(0, 0) = a.value().sum();
    const int ia = a.id;
    return a.tape->push(std::move(out), detail::any_needs<T>(a), [ia](Tape<T>& t, int self) {
        t.grad(ia).array() += t.grad(self)(0, 0);
    });
}

/// Sum of squared entries, as a 1 x 1 value.
template <class T>
Var<T> sum_squares(Var<T> a) {
    Mat<T> out(1, 1);
    out(0, 0) = a.value().squaredNorm();
    const int ia = a.id;
    return a.tape->push(std::move(out), detail::any_needs<T>(a), [ia](Tape<T>& t, int self) {
        t.grad(ia) += (T(2) * t.grad(self)(0, 0)) * t.value(ia);
    });
}

template <class T>
Var<T> col_slice(Var<T> a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) throw Error("col_slice out of range");
    Mat<T> out = a.value().middleCols(start, count);
    const int ia = a.id;
    return a.tape->push(std::move(out), detail::any_needs<T>(a), [ia, start, count](Tape<T>& t, int self) {
        t.grad(ia).middleCols(start, count) += t.grad(self);
    });
}

/// First `count` rows.
template <class T>
Var<T> top_rows(Var<T> a, Eigen::Index count) {
    if (count < 0 || count > a.rows()) throw Error("top_rows out of range");
    if (count == a.rows()) return a;
    Mat<T> out = a.value().topRows(count);
    const int ia = a.id;
    return a.tape->push(std::move(out), detail::any_needs<T>(a), [ia, count](Tape<T>& t, int self) {
        t.grad(ia).topRows(count) += t.grad(self);
    });
}

/// Rows of `table` selected by `index`.
template <class T>
Var<T> gather_rows(Var<T> table, std::span<const int> index) {
    Mat<T> out(static_cast<Eigen::Index>(index.size()), table.cols());
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] < 0 || index[r] >= table.rows()) throw Error("gather_rows index out of range");
        out.row(static_cast<Eigen::Index>(r)) = table.value().row(index[r]);
    }
    const int it = table.id;
    std::vector<int> idx(index.begin(), index.end());
    return table.tape->push(std::move(out), detail::any_needs<T>(table),
                            [it, idx = std::move(idx)](Tape<T>& t, int self) {
                                const Mat<T>& g = t.grad(self);
                                Mat<T>& gt = t.grad(it);
                                for (std::size_t r = 0; r < idx.size(); ++r)
                                    gt.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
                            });
}

/// Adds a (tokens x C) table to each of `batch` sequences of x.
template <class T>
Var<T> add_tiled(Var<T> x, Var<T> table, int batch) {
    const Eigen::Index n = table.rows();
    if (x.rows() != n * batch || x.cols() != table.cols()) throw Error("shape mismatch in add_tiled");
    Mat<T> out = x.value();
    for (int b = 0; b < batch; ++b) out.middleRows(b * n, n) += table.value();
    const int ix = x.id, it = table.id;
    return x.tape->push(std::move(out), detail::any_needs<T>(x, table), [ix, it, batch, n](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        if (t.needs_grad(ix)) t.grad(ix) += g;
        if (t.needs_grad(it)) {
            Mat<T>& gt = t.grad(it);
            for (int b = 0; b < batch; ++b) gt += g.middleRows(b * n, n);
        }
    });
}

/// Per sequence: output token 0 is the matching row of `ctx` (batch x C),
/// output token i > 0 is input token i - 1. The last input token is dropped.
template <class T>
Var<T> shift_tokens(Var<T> x, Var<T> ctx, int batch) {
    if (batch <= 0 || x.rows() % batch != 0 || ctx.rows() != batch || ctx.cols() != x.cols())
        throw Error("shape mismatch in shift_tokens");
    const Eigen::Index n = x.rows() / batch;
    Mat<T> out(x.rows(), x.cols());
    for (int b = 0; b < batch; ++b) {
        out.row(b * n) = ctx.value().row(b);
        if (n > 1) out.middleRows(b * n + 1, n - 1) = x.value().middleRows(b * n, n - 1);
    }
    const int ix = x.id, ic = ctx.id;
    return x.tape->push(std::move(out), detail::any_needs<T>(x, ctx), [ix, ic, batch, n](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        for (int b = 0; b < batch; ++b) {
            if (t.needs_grad(ic)) t.grad(ic).row(b) += g.row(b * n);
            if (t.needs_grad(ix) && n > 1) t.grad(ix).middleRows(b * n, n - 1) += g.middleRows(b * n + 1, n - 1);
        }
    });
}

/// Reverses token order within each of `batch` sequences.
template <class T>
Var<T> reverse_tokens(Var<T> x, int batch) {
    if (batch <= 0 || x.rows() % batch != 0) throw Error("shape mismatch in reverse_tokens");
    const Eigen::Index n = x.rows() / batch;
    Mat<T> out(x.rows(), x.cols());
    for (int b = 0; b < batch; ++b)
        for (Eigen::Index i = 0; i < n; ++i) out.row(b * n + i) = x.value().row(b * n + (n - 1 - i));
    const int ix = x.id;
    return x.tape->push(std::move(out), detail::any_needs<T>(x), [ix, batch, n](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        Mat<T>& gx = t.grad(ix);
        for (int b = 0; b < batch; ++b)
            for (Eigen::Index i = 0; i < n; ++i) gx.row(b * n + (n - 1 - i)) += g.row(b * n + i);
    });
}

}  // namespace srcflow::ag
