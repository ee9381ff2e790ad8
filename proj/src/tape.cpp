#include "semilin/tape.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "semilin/threading.hpp"

namespace semilin {

const char* op_name(Op op) {
    switch (op) {
        case Op::var: return "var";
        case Op::matmul: return "matmul";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::div: return "div";
        case Op::concat: return "concat";
        case Op::affine: return "affine";
        case Op::relu: return "relu";
        case Op::elu: return "elu";
        case Op::tanh_fn: return "tanh";
        case Op::sigmoid: return "sigmoid";
        case Op::sin_fn: return "sin";
        case Op::cos_fn: return "cos";
        case Op::exp_fn: return "exp";
        case Op::log_fn: return "log";
        case Op::sqrt_fn: return "sqrt";
        case Op::square: return "square";
        case Op::clamp: return "clamp";
        case Op::reduce_sum: return "reduce_sum";
        case Op::reduce_mean: return "reduce_mean";
        case Op::batchnorm: return "batchnorm";
        case Op::transpose: return "transpose";
        case Op::slice_cols: return "slice_cols";
        case Op::segment_sum: return "segment_sum";
        case Op::heaviside: return "heaviside";
        case Op::elu_grad: return "elu_grad";
        case Op::clamp_mask: return "clamp_mask";
        case Op::signed_floor: return "signed_floor";
    }
    return "?";
}

namespace {

constexpr size_t kParallelCutoff = 32768;
constexpr size_t kGrain = 8192;

inline double bget(const Tensor& t, int r, int c) {
    return t.data[static_cast<size_t>(t.rows == 1 ? 0 : r) * t.cols + (t.cols == 1 ? 0 : c)];
}

bool broadcastable(const Tensor& a, const Tensor& b, int& r, int& c) {
    r = std::max(a.rows, b.rows);
    c = std::max(a.cols, b.cols);
    auto ok = [&](const Tensor& t) {
        return (t.rows == r || t.rows == 1) && (t.cols == c || t.cols == 1);
    };
    return ok(a) && ok(b);
}

template <class F>
void elementwise(size_t n, F&& f) {
    if (n < kParallelCutoff) {
        f(0, n);
    } else {
        ThreadPool::instance().parallel_for(n, kGrain, f);
    }
}

// Adds g (full result shape) into dst, reducing over broadcast dimensions.
// Reduction loops are fixed-order, so results do not depend on thread count.
void add_reduced(const Tensor& g, Tensor& dst) {
    if (dst.rows == g.rows && dst.cols == g.cols) {
        for (size_t i = 0; i < g.size(); ++i) dst.data[i] += g.data[i];
    } else if (dst.is_scalar()) {
        dst.data[0] += det_sum(g.data.data(), g.size());
    } else if (dst.rows == 1) {
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) dst.data[c] += g.at(r, c);
    } else {  // column vector
        for (int r = 0; r < g.rows; ++r) {
            double s = 0.0;
            for (int c = 0; c < g.cols; ++c) s += g.at(r, c);
            dst.data[r] += s;
        }
    }
}

}  // namespace

void Tape::fail(const std::string& msg) const { throw std::runtime_error("autodiff: " + msg); }

void Tape::check_finite(int id) const {
    const Tensor& t = nodes_[id].val;
    double s;
    if (t.size() < kParallelCutoff) {
        s = 0.0;
        for (double v : t.data) s += std::fabs(v);
    } else {
        const double* p = t.data.data();
        s = det_parallel_sum(t.size(), kGrain, [p](size_t b, size_t e) {
            double acc = 0.0;
            for (size_t i = b; i < e; ++i) acc += std::fabs(p[i]);
            return acc;
        });
    }
    if (!std::isfinite(s))
        fail(std::string("non-finite output of op '") + op_name(nodes_[id].op) + "' at node " +
             std::to_string(id));
}

int Tape::push(Node n) {
    for (int in : n.inputs)
        if (nodes_[in].requires_grad) n.requires_grad = true;
    nodes_.push_back(std::move(n));
    int id = static_cast<int>(nodes_.size()) - 1;
    if (nodes_[id].op != Op::var) check_finite(id);
    return id;
}

int Tape::var(Tensor value, bool requires_grad) {
    Node n;
    n.op = Op::var;
    n.val = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::matmul(int a, int b) {
    const Tensor& A = nodes_[a].val;
    const Tensor& B = nodes_[b].val;
    if (A.cols != B.rows) fail("matmul shape mismatch");
    Node n;
    n.op = Op::matmul;
    n.inputs = {a, b};
    n.val = Tensor(A.rows, B.cols);
    const int R = A.rows, K = A.cols, C = B.cols;
    auto kernel = [&](size_t r0, size_t r1) {
        for (size_t r = r0; r < r1; ++r) {
            const double* ar = A.row(static_cast<int>(r));
            double* out = n.val.row(static_cast<int>(r));
            for (int k = 0; k < K; ++k) {
                double av = ar[k];
                if (av == 0.0) continue;
                const double* br = B.row(k);
                for (int c = 0; c < C; ++c) out[c] += av * br[c];
            }
        }
    };
    size_t work = static_cast<size_t>(R) * K * C;
    if (work < kParallelCutoff) {
        kernel(0, R);
    } else {
        size_t grain = std::max<size_t>(1, kParallelCutoff / std::max(1, K * C));
        ThreadPool::instance().parallel_for(R, grain, kernel);
    }
    return push(std::move(n));
}

int Tape::affine(int x, int w, int b) {
    const Tensor& X = nodes_[x].val;
    const Tensor& W = nodes_[w].val;
    const Tensor& Bv = nodes_[b].val;
    if (X.cols != W.rows || Bv.rows != 1 || Bv.cols != W.cols) fail("affine shape mismatch");
    Node n;
    n.op = Op::affine;
    n.inputs = {x, w, b};
    n.val = Tensor(X.rows, W.cols);
    const int R = X.rows, K = X.cols, C = W.cols;
    auto kernel = [&](size_t r0, size_t r1) {
        for (size_t r = r0; r < r1; ++r) {
            const double* xr = X.row(static_cast<int>(r));
            double* out = n.val.row(static_cast<int>(r));
            std::memcpy(out, Bv.data.data(), sizeof(double) * C);
            for (int k = 0; k < K; ++k) {
                double xv = xr[k];
                if (xv == 0.0) continue;
                const double* wr = W.row(k);
                for (int c = 0; c < C; ++c) out[c] += xv * wr[c];
            }
        }
    };
    size_t work = static_cast<size_t>(R) * K * C;
    if (work < kParallelCutoff) {
        kernel(0, R);
    } else {
        size_t grain = std::max<size_t>(1, kParallelCutoff / std::max(1, K * C));
        ThreadPool::instance().parallel_for(R, grain, kernel);
    }
    return push(std::move(n));
}

int Tape::add(int a, int b) {
    const Tensor& A = nodes_[a].val;
    const Tensor& B = nodes_[b].val;
    int r, c;
    if (!broadcastable(A, B, r, c)) fail("add shape mismatch");
    Node n;
    n.op = Op::add;
    n.inputs = {a, b};
    n.val = Tensor(r, c);
    elementwise(n.val.size(), [&](size_t i0, size_t i1) {
        for (size_t i = i0; i < i1; ++i) {
            int rr = static_cast<int>(i) / c, cc = static_cast<int>(i) % c;
            n.val.data[i] = bget(A, rr, cc) + bget(B, rr, cc);
        }
    });
    return push(std::move(n));
}

int Tape::sub(int a, int b) {
    const Tensor& A = nodes_[a].val;
    const Tensor& B = nodes_[b].val;
    int r, c;
    if (!broadcastable(A, B, r, c)) fail("sub shape mismatch");
    Node n;
    n.op = Op::sub;
    n.inputs = {a, b};
    n.val = Tensor(r, c);
    elementwise(n.val.size(), [&](size_t i0, size_t i1) {
        for (size_t i = i0; i < i1; ++i) {
            int rr = static_cast<int>(i) / c, cc = static_cast<int>(i) % c;
            n.val.data[i] = bget(A, rr, cc) - bget(B, rr, cc);
        }
    });
    return push(std::move(n));
}

int Tape::mul(int a, int b) {
    const Tensor& A = nodes_[a].val;
    const Tensor& B = nodes_[b].val;
    int r, c;
    if (!broadcastable(A, B, r, c)) fail("mul shape mismatch");
    Node n;
    n.op = Op::mul;
    n.inputs = {a, b};
    n.val = Tensor(r, c);
    elementwise(n.val.size(), [&](size_t i0, size_t i1) {
        for (size_t i = i0; i < i1; ++i) {
            int rr = static_cast<int>(i) / c, cc = static_cast<int>(i) % c;
            n.val.data[i] = bget(A, rr, cc) * bget(B, rr, cc);
        }
    });
    return push(std::move(n));
}

int Tape::div(int a, int b) {
    const Tensor& A = nodes_[a].val;
    const Tensor& B = nodes_[b].val;
    int r, c;
    if (!broadcastable(A, B, r, c)) fail("div shape mismatch");
    Node n;
    n.op = Op::div;
    n.inputs = {a, b};
    n.val = Tensor(r, c);
    elementwise(n.val.size(), [&](size_t i0, size_t i1) {
        for (size_t i = i0; i < i1; ++i) {
            int rr = static_cast<int>(i) / c, cc = static_cast<int>(i) % c;
            n.val.data[i] = bget(A, rr, cc) / bget(B, rr, cc);
        }
    });
    return push(std::move(n));
}

int Tape::concat(const std::vector<int>& parts) {
    if (parts.empty()) fail("concat of nothing");
    int rows = nodes_[parts[0]].val.rows, cols = 0;
    for (int p : parts) {
        if (nodes_[p].val.rows != rows) fail("concat row mismatch");
        cols += nodes_[p].val.cols;
    }
    Node n;
    n.op = Op::concat;
    n.inputs = parts;
    n.val = Tensor(rows, cols);
    for (int r = 0; r < rows; ++r) {
        double* out = n.val.row(r);
        for (int p : parts) {
            const Tensor& t = nodes_[p].val;
            std::memcpy(out, t.row(r), sizeof(double) * t.cols);
            out += t.cols;
        }
    }
    return push(std::move(n));
}

#define SEMILIN_UNARY(NAME, OPK, EXPR)                                      \
    int Tape::NAME(int x) {                                                 \
        const Tensor& X = nodes_[x].val;                                    \
        Node n;                                                             \
        n.op = OPK;                                                         \
        n.inputs = {x};                                                     \
        n.val = Tensor(X.rows, X.cols);                                     \
        elementwise(n.val.size(), [&](size_t i0, size_t i1) {               \
            for (size_t i = i0; i < i1; ++i) {                              \
                double v = X.data[i];                                       \
                n.val.data[i] = (EXPR);                                     \
            }                                                               \
        });                                                                 \
        return push(std::move(n));                                          \
    }

SEMILIN_UNARY(relu, Op::relu, v > 0.0 ? v : 0.0)
SEMILIN_UNARY(elu, Op::elu, v > 0.0 ? v : std::expm1(v))
SEMILIN_UNARY(tanh, Op::tanh_fn, std::tanh(v))
SEMILIN_UNARY(sigmoid, Op::sigmoid, 1.0 / (1.0 + std::exp(-v)))
SEMILIN_UNARY(sin, Op::sin_fn, std::sin(v))
SEMILIN_UNARY(cos, Op::cos_fn, std::cos(v))
SEMILIN_UNARY(exp, Op::exp_fn, std::exp(v))
SEMILIN_UNARY(log, Op::log_fn, std::log(v))
SEMILIN_UNARY(sqrt, Op::sqrt_fn, std::sqrt(v))
SEMILIN_UNARY(square, Op::square, v* v)
SEMILIN_UNARY(heaviside, Op::heaviside, v > 0.0 ? 1.0 : 0.0)
SEMILIN_UNARY(elu_grad_op, Op::elu_grad, v > 0.0 ? 1.0 : std::exp(v))

#undef SEMILIN_UNARY

int Tape::clamp(int x, int lo, int hi) {
    const Tensor& X = nodes_[x].val;
    const Tensor& L = nodes_[lo].val;
    const Tensor& H = nodes_[hi].val;
    auto conform = [&](const Tensor& t) { return t.is_scalar() || t.same_shape(X); };
    if (!conform(L) || !conform(H)) fail("clamp bound shape mismatch");
    for (size_t i = 0; i < X.size(); ++i) {
        double l = L.is_scalar() ? L.data[0] : L.data[i];
        double h = H.is_scalar() ? H.data[0] : H.data[i];
        if (l > h) fail("clamp requires lo <= hi");
    }
    Node n;
    n.op = Op::clamp;
    n.inputs = {x, lo, hi};
    n.val = Tensor(X.rows, X.cols);
    elementwise(X.size(), [&](size_t i0, size_t i1) {
        for (size_t i = i0; i < i1; ++i) {
            double l = L.is_scalar() ? L.data[0] : L.data[i];
            double h = H.is_scalar() ? H.data[0] : H.data[i];
            n.val.data[i] = std::min(std::max(X.data[i], l), h);
        }
    });
    return push(std::move(n));
}

int Tape::clamp(int x, double lo, double hi) { return clamp(x, scalar(lo), scalar(hi)); }

int Tape::clamp_mask(int x, int lo, int hi) {
    const Tensor& X = nodes_[x].val;
    const Tensor& L = nodes_[lo].val;
    const Tensor& H = nodes_[hi].val;
    Node n;
    n.op = Op::clamp_mask;
    n.inputs = {x, lo, hi};
    n.val = Tensor(X.rows, X.cols);
    // Interior-side subgradient: the boundary itself counts as inside.
    elementwise(X.size(), [&](size_t i0, size_t i1) {
        for (size_t i = i0; i < i1; ++i) {
            double l = L.is_scalar() ? L.data[0] : L.data[i];
            double h = H.is_scalar() ? H.data[0] : H.data[i];
            n.val.data[i] = (X.data[i] >= l && X.data[i] <= h) ? 1.0 : 0.0;
        }
    });
    return push(std::move(n));
}

int Tape::signed_floor(int x, double eps) {
    const Tensor& X = nodes_[x].val;
    Node n;
    n.op = Op::signed_floor;
    n.inputs = {x};
    n.a0 = eps;
    n.val = Tensor(X.rows, X.cols);
    elementwise(X.size(), [&](size_t i0, size_t i1) {
        for (size_t i = i0; i < i1; ++i) {
            double v = X.data[i];
            n.val.data[i] = std::fabs(v) >= eps ? v : (v >= 0.0 ? eps : -eps);
        }
    });
    return push(std::move(n));
}

int Tape::reduce_sum(int x, Axis axis) {
    const Tensor& X = nodes_[x].val;
    Node n;
    n.op = Op::reduce_sum;
    n.inputs = {x};
    n.axis = axis;
    if (axis == Axis::all) {
        n.val = Tensor::scalar(det_sum(X.data.data(), X.size()));
    } else if (axis == Axis::rows) {
        n.val = Tensor(1, X.cols);
        for (int r = 0; r < X.rows; ++r)
            for (int c = 0; c < X.cols; ++c) n.val.data[c] += X.at(r, c);
    } else {
        n.val = Tensor(X.rows, 1);
        elementwise(X.rows, [&](size_t r0, size_t r1) {
            for (size_t r = r0; r < r1; ++r) {
                const double* xr = X.row(static_cast<int>(r));
                double s = 0.0;
                for (int c = 0; c < X.cols; ++c) s += xr[c];
                n.val.data[r] = s;
            }
        });
    }
    return push(std::move(n));
}

int Tape::reduce_mean(int x, Axis axis) {
    // Capture the divisor before reduce_sum pushes (and may reallocate nodes_).
    double denom = axis == Axis::all    ? static_cast<double>(nodes_[x].val.size())
                   : axis == Axis::rows ? nodes_[x].val.rows
                                        : nodes_[x].val.cols;
    int id = reduce_sum(x, axis);
    Node& n = nodes_[id];
    n.op = Op::reduce_mean;
    for (auto& v : n.val.data) v /= denom;
    return id;
}

int Tape::batchnorm(int x, int gamma, int beta, BatchNormState* state, bool training) {
    const Tensor& X = nodes_[x].val;
    const Tensor& G = nodes_[gamma].val;
    const Tensor& B = nodes_[beta].val;
    if (G.rows != 1 || G.cols != X.cols || B.rows != 1 || B.cols != X.cols)
        fail("batchnorm gamma/beta shape mismatch");
    if (static_cast<int>(state->moving_mean.size()) != X.cols)
        fail("batchnorm state feature mismatch");
    Node n;
    n.op = Op::batchnorm;
    n.inputs = {x, gamma, beta};
    n.bn = state;
    n.bn_training = training;
    n.val = Tensor(X.rows, X.cols);
    const int R = X.rows, C = X.cols;
    n.bn_mean.assign(C, 0.0);
    n.bn_inv_std.assign(C, 0.0);
    if (training) {
        for (int c = 0; c < C; ++c) {
            double m = 0.0;
            for (int r = 0; r < R; ++r) m += X.at(r, c);
            m /= R;
            double v = 0.0;
            for (int r = 0; r < R; ++r) {
                double d = X.at(r, c) - m;
                v += d * d;
            }
            v /= R;
            n.bn_mean[c] = m;
            n.bn_inv_std[c] = 1.0 / std::sqrt(v + state->epsilon);
            state->moving_mean[c] = state->momentum * state->moving_mean[c] + (1.0 - state->momentum) * m;
            state->moving_var[c] = state->momentum * state->moving_var[c] + (1.0 - state->momentum) * v;
        }
        state->initialized = true;
    } else {
        for (int c = 0; c < C; ++c) {
            n.bn_mean[c] = state->moving_mean[c];
            n.bn_inv_std[c] = 1.0 / std::sqrt(state->moving_var[c] + state->epsilon);
        }
    }
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
            n.val.at(r, c) = G.data[c] * (X.at(r, c) - n.bn_mean[c]) * n.bn_inv_std[c] + B.data[c];
    return push(std::move(n));
}

int Tape::transpose(int x) {
    const Tensor& X = nodes_[x].val;
    Node n;
    n.op = Op::transpose;
    n.inputs = {x};
    n.val = Tensor(X.cols, X.rows);
    for (int r = 0; r < X.rows; ++r)
        for (int c = 0; c < X.cols; ++c) n.val.at(c, r) = X.at(r, c);
    return push(std::move(n));
}

int Tape::slice_cols(int x, int c0, int c1) {
    const Tensor& X = nodes_[x].val;
    if (c0 < 0 || c1 > X.cols || c0 >= c1) fail("slice_cols out of range");
    Node n;
    n.op = Op::slice_cols;
    n.inputs = {x};
    n.i0 = c0;
    n.i1 = c1;
    n.val = Tensor(X.rows, c1 - c0);
    for (int r = 0; r < X.rows; ++r)
        std::memcpy(n.val.row(r), X.row(r) + c0, sizeof(double) * (c1 - c0));
    return push(std::move(n));
}

int Tape::segment_sum(int x, std::vector<int> offsets) {
    const Tensor& X = nodes_[x].val;
    if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != X.rows)
        fail("segment_sum bad offsets");
    Node n;
    n.op = Op::segment_sum;
    n.inputs = {x};
    int groups = static_cast<int>(offsets.size()) - 1;
    n.val = Tensor(groups, X.cols);
    const int C = X.cols;
    auto kernel = [&](size_t g0, size_t g1) {
        for (size_t g = g0; g < g1; ++g) {
            double* out = n.val.row(static_cast<int>(g));
            for (int r = offsets[g]; r < offsets[g + 1]; ++r) {
                const double* xr = X.row(r);
                for (int c = 0; c < C; ++c) out[c] += xr[c];
            }
        }
    };
    if (X.size() < kParallelCutoff) {
        kernel(0, groups);
    } else {
        ThreadPool::instance().parallel_for(groups, 8, kernel);
    }
    n.segments = std::move(offsets);
    return push(std::move(n));
}

const Tensor& Tape::grad(int id) const {
    if (nodes_[id].grad.size() == 0) fail("no gradient recorded for node " + std::to_string(id));
    return nodes_[id].grad;
}

void Tape::backward(int loss) {
    if (backward_done_) fail("backward called twice without re-recording");
    if (!nodes_[loss].val.is_scalar()) fail("backward requires a scalar loss");
    backward_done_ = true;
    Node& ln = nodes_[loss];
    if (ln.requires_grad) {
        ln.grad = Tensor::scalar(1.0);
        for (int id = loss; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.requires_grad || n.grad.size() == 0 || n.op == Op::var) continue;
            backward_node(id);
        }
    }
    // Flagged leaves the sweep never reached get explicit zeros, so grad() is
    // total over everything marked trainable.
    for (Node& n : nodes_)
        if (n.op == Op::var && n.requires_grad && n.grad.size() == 0)
            n.grad = Tensor(n.val.rows, n.val.cols);
}

void Tape::backward_node(int id) {
    Node& n = nodes_[id];
    const Tensor& g = n.grad;
    auto in = [&](int k) -> Node& { return nodes_[n.inputs[k]]; };
    auto needs = [&](int k) { return in(k).requires_grad; };
    auto ensure = [&](int k) -> Tensor& {
        Node& m = in(k);
        if (m.grad.size() == 0) m.grad = Tensor(m.val.rows, m.val.cols);
        return m.grad;
    };
    switch (n.op) {
        case Op::matmul: {
            const Tensor& A = in(0).val;
            const Tensor& B = in(1).val;
            const int R = A.rows, K = A.cols, C = B.cols;
            if (needs(0)) {
                Tensor& ga = ensure(0);
                auto kernel = [&](size_t r0, size_t r1) {
                    for (size_t r = r0; r < r1; ++r) {
                        const double* gr = g.row(static_cast<int>(r));
                        double* gar = ga.row(static_cast<int>(r));
                        for (int k = 0; k < K; ++k) {
                            const double* br = B.row(k);
                            double s = 0.0;
                            for (int c = 0; c < C; ++c) s += gr[c] * br[c];
                            gar[k] += s;
                        }
                    }
                };
                size_t work = static_cast<size_t>(R) * K * C;
                if (work < kParallelCutoff)
                    kernel(0, R);
                else
                    ThreadPool::instance().parallel_for(
                        R, std::max<size_t>(1, kParallelCutoff / std::max(1, K * C)), kernel);
            }
            if (needs(1)) {
                Tensor& gb = ensure(1);
                // gb[k,c] = sum_r A[r,k] g[r,c]; fixed r-order per element.
                auto kernel = [&](size_t k0, size_t k1) {
                    for (size_t k = k0; k < k1; ++k) {
                        double* gbr = gb.row(static_cast<int>(k));
                        for (int c = 0; c < C; ++c) {
                            double s = 0.0;
                            for (int r = 0; r < R; ++r) s += A.at(r, static_cast<int>(k)) * g.at(r, c);
                            gbr[c] += s;
                        }
                    }
                };
                size_t work = static_cast<size_t>(R) * K * C;
                if (work < kParallelCutoff)
                    kernel(0, K);
                else
                    ThreadPool::instance().parallel_for(
                        K, std::max<size_t>(1, kParallelCutoff / std::max(1, R * C)), kernel);
            }
            break;
        }
        case Op::affine: {
            const Tensor& X = in(0).val;
            const Tensor& W = in(1).val;
            const int R = X.rows, K = X.cols, C = W.cols;
            if (needs(0)) {
                Tensor& gx = ensure(0);
                auto kernel = [&](size_t r0, size_t r1) {
                    for (size_t r = r0; r < r1; ++r) {
                        const double* gr = g.row(static_cast<int>(r));
                        double* gxr = gx.row(static_cast<int>(r));
                        for (int k = 0; k < K; ++k) {
                            const double* wr = W.row(k);
                            double s = 0.0;
                            for (int c = 0; c < C; ++c) s += gr[c] * wr[c];
                            gxr[k] += s;
                        }
                    }
                };
                size_t work = static_cast<size_t>(R) * K * C;
                if (work < kParallelCutoff)
                    kernel(0, R);
                else
                    ThreadPool::instance().parallel_for(
                        R, std::max<size_t>(1, kParallelCutoff / std::max(1, K * C)), kernel);
            }
            if (needs(1)) {
                Tensor& gw = ensure(1);
                auto kernel = [&](size_t k0, size_t k1) {
                    for (size_t k = k0; k < k1; ++k) {
                        double* gwr = gw.row(static_cast<int>(k));
                        for (int c = 0; c < C; ++c) {
                            double s = 0.0;
                            for (int r = 0; r < R; ++r) s += X.at(r, static_cast<int>(k)) * g.at(r, c);
                            gwr[c] += s;
                        }
                    }
                };
                size_t work = static_cast<size_t>(R) * K * C;
                if (work < kParallelCutoff)
                    kernel(0, K);
                else
                    ThreadPool::instance().parallel_for(
                        K, std::max<size_t>(1, kParallelCutoff / std::max(1, R * C)), kernel);
            }
            if (needs(2)) {
                Tensor& gb = ensure(2);
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) gb.data[c] += g.at(r, c);
            }
            break;
        }
        case Op::add:
        case Op::sub: {
            if (needs(0)) add_reduced(g, ensure(0));
            if (needs(1)) {
                if (n.op == Op::add) {
                    add_reduced(g, ensure(1));
                } else {
                    Tensor neg(g.rows, g.cols);
                    for (size_t i = 0; i < g.size(); ++i) neg.data[i] = -g.data[i];
                    add_reduced(neg, ensure(1));
                }
            }
            break;
        }
        case Op::mul: {
            const Tensor& A = in(0).val;
            const Tensor& B = in(1).val;
            for (int side = 0; side < 2; ++side) {
                if (!needs(side)) continue;
                const Tensor& other = side == 0 ? B : A;
                Tensor full(g.rows, g.cols);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c) full.at(r, c) = g.at(r, c) * bget(other, r, c);
                add_reduced(full, ensure(side));
            }
            break;
        }
        case Op::div: {
            const Tensor& A = in(0).val;
            const Tensor& B = in(1).val;
            if (needs(0)) {
                Tensor full(g.rows, g.cols);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c) full.at(r, c) = g.at(r, c) / bget(B, r, c);
                add_reduced(full, ensure(0));
            }
            if (needs(1)) {
                Tensor full(g.rows, g.cols);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c) {
                        double b = bget(B, r, c);
                        full.at(r, c) = -g.at(r, c) * bget(A, r, c) / (b * b);
                    }
                add_reduced(full, ensure(1));
            }
            break;
        }
        case Op::concat: {
            int off = 0;
            for (size_t k = 0; k < n.inputs.size(); ++k) {
                const Tensor& part = in(static_cast<int>(k)).val;
                if (needs(static_cast<int>(k))) {
                    Tensor& gp = ensure(static_cast<int>(k));
                    for (int r = 0; r < part.rows; ++r)
                        for (int c = 0; c < part.cols; ++c) gp.at(r, c) += g.at(r, off + c);
                }
                off += part.cols;
            }
            break;
        }
        case Op::relu: {
            if (!needs(0)) break;
            const Tensor& X = in(0).val;
            Tensor& gx = ensure(0);
            for (size_t i = 0; i < g.size(); ++i)
                if (X.data[i] > 0.0) gx.data[i] += g.data[i];
            break;
        }
        case Op::elu: {
            if (!needs(0)) break;
            const Tensor& X = in(0).val;
            Tensor& gx = ensure(0);
            for (size_t i = 0; i < g.size(); ++i)
                gx.data[i] += g.data[i] * (X.data[i] > 0.0 ? 1.0 : n.val.data[i] + 1.0);
            break;
        }
        case Op::tanh_fn: {
            if (!needs(0)) break;
            Tensor& gx = ensure(0);
            for (size_t i = 0; i < g.size(); ++i)
                gx.data[i] += g.data[i] * (1.0 - n.val.data[i] * n.val.data[i]);
            break;
        }
        case Op::sigmoid: {
            if (!needs(0)) break;
            Tensor& gx = ensure(0);
            for (size_t i = 0; i < g.size(); ++i) {
                double s = n.val.data[i];
                gx.data[i] += g.data[i] * s * (1.0 - s);
            }
            break;
        }
        case Op::sin_fn: {
            if (!needs(0)) break;
            const Tensor& X = in(0).val;
            Tensor& gx = ensure(0);
            for (size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * std::cos(X.data[i]);
            break;
        }
        case Op::cos_fn: {
            if (!needs(0)) break;
            const Tensor& X = in(0).val;
            Tensor& gx = ensure(0);
            for (size_t i = 0; i < g.size(); ++i) gx.data[i] -= g.data[i] * std::sin(X.data[i]);
            break;
        }
        case Op::exp_fn: {
            if (!needs(0)) break;
            Tensor& gx = ensure(0);
            for (size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * n.val.data[i];
            break;
        }
        case Op::log_fn: {
            if (!needs(0)) break;
            const Tensor& X = in(0).val;
            Tensor& gx = ensure(0);
            for (size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] / X.data[i];
            break;
        }
        case Op::sqrt_fn: {
            if (!needs(0)) break;
            Tensor& gx = ensure(0);
            for (size_t i = 0; i < g.size(); ++i)
                gx.data[i] += g.data[i] * 0.5 / n.val.data[i];
            break;
        }
        case Op::square: {
            if (!needs(0)) break;
            const Tensor& X = in(0).val;
            Tensor& gx = ensure(0);
            for (size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i] * 2.0 * X.data[i];
            break;
        }
        case Op::clamp: {
            const Tensor& X = in(0).val;
            const Tensor& L = in(1).val;
            const Tensor& H = in(2).val;
            if (needs(0)) {
                Tensor& gx = ensure(0);
                for (size_t i = 0; i < g.size(); ++i) {
                    double l = L.is_scalar() ? L.data[0] : L.data[i];
                    double h = H.is_scalar() ? H.data[0] : H.data[i];
                    if (X.data[i] >= l && X.data[i] <= h) gx.data[i] += g.data[i];
                }
            }
            if (needs(1)) {
                Tensor full(g.rows, g.cols);
                for (size_t i = 0; i < g.size(); ++i) {
                    double l = L.is_scalar() ? L.data[0] : L.data[i];
                    if (X.data[i] < l) full.data[i] = g.data[i];
                }
                add_reduced(full, ensure(1));
            }
            if (needs(2)) {
                Tensor full(g.rows, g.cols);
                for (size_t i = 0; i < g.size(); ++i) {
                    double h = H.is_scalar() ? H.data[0] : H.data[i];
                    if (X.data[i] > h) full.data[i] = g.data[i];
                }
                add_reduced(full, ensure(2));
            }
            break;
        }
        case Op::signed_floor: {
            if (!needs(0)) break;
            const Tensor& X = in(0).val;
            Tensor& gx = ensure(0);
            for (size_t i = 0; i < g.size(); ++i)
                if (std::fabs(X.data[i]) >= n.a0) gx.data[i] += g.data[i];
            break;
        }
        case Op::reduce_sum:
        case Op::reduce_mean: {
            if (!needs(0)) break;
            const Tensor& X = in(0).val;
            Tensor& gx = ensure(0);
            double scale = 1.0;
            if (n.op == Op::reduce_mean)
                scale = n.axis == Axis::all ? 1.0 / X.size()
                        : n.axis == Axis::rows ? 1.0 / X.rows
                                               : 1.0 / X.cols;
            if (n.axis == Axis::all) {
                double gv = g.data[0] * scale;
                for (auto& v : gx.data) v += gv;
            } else if (n.axis == Axis::rows) {
                for (int r = 0; r < X.rows; ++r)
                    for (int c = 0; c < X.cols; ++c) gx.at(r, c) += g.data[c] * scale;
            } else {
                for (int r = 0; r < X.rows; ++r) {
                    double gv = g.data[r] * scale;
                    for (int c = 0; c < X.cols; ++c) gx.at(r, c) += gv;
                }
            }
            break;
        }
        case Op::batchnorm: {
            const Tensor& X = in(0).val;
            const Tensor& G = in(1).val;
            const int R = X.rows, C = X.cols;
            for (int c = 0; c < C; ++c) {
                double m = n.bn_mean[c], istd = n.bn_inv_std[c], gam = G.data[c];
                double sum_g = 0.0, sum_gx = 0.0;
                for (int r = 0; r < R; ++r) {
                    double xh = (X.at(r, c) - m) * istd;
                    sum_g += g.at(r, c);
                    sum_gx += g.at(r, c) * xh;
                }
                if (needs(1)) ensure(1).data[c] += sum_gx;
                if (needs(2)) ensure(2).data[c] += sum_g;
                if (needs(0)) {
                    Tensor& gx = ensure(0);
                    if (n.bn_training) {
                        for (int r = 0; r < R; ++r) {
                            double xh = (X.at(r, c) - m) * istd;
                            gx.at(r, c) +=
                                gam * istd * (g.at(r, c) - sum_g / R - xh * sum_gx / R);
                        }
                    } else {
                        for (int r = 0; r < R; ++r) gx.at(r, c) += gam * istd * g.at(r, c);
                    }
                }
            }
            break;
        }
        case Op::transpose: {
            if (!needs(0)) break;
            Tensor& gx = ensure(0);
            for (int r = 0; r < g.rows; ++r)
                for (int c = 0; c < g.cols; ++c) gx.at(c, r) += g.at(r, c);
            break;
        }
        case Op::slice_cols: {
            if (!needs(0)) break;
            Tensor& gx = ensure(0);
            for (int r = 0; r < g.rows; ++r)
                for (int c = 0; c < g.cols; ++c) gx.at(r, n.i0 + c) += g.at(r, c);
            break;
        }
        case Op::segment_sum: {
            if (!needs(0)) break;
            Tensor& gx = ensure(0);
            int groups = static_cast<int>(n.segments.size()) - 1;
            for (int grp = 0; grp < groups; ++grp)
                for (int r = n.segments[grp]; r < n.segments[grp + 1]; ++r)
                    for (int c = 0; c < g.cols; ++c) gx.at(r, c) += g.at(grp, c);
            break;
        }
        case Op::heaviside:
        case Op::elu_grad:
        case Op::clamp_mask: {
            if (n.op == Op::elu_grad && needs(0)) {
                const Tensor& X = in(0).val;
                Tensor& gx = ensure(0);
                for (size_t i = 0; i < g.size(); ++i)
                    if (X.data[i] <= 0.0) gx.data[i] += g.data[i] * n.val.data[i];
            }
            // heaviside and clamp_mask are piecewise constant: zero gradient.
            break;
        }
        case Op::var:
            break;
    }
}

int Tape::grad_wrt_input(int output, int input) {
    if (!nodes_[input].requires_grad)
        fail("grad_wrt_input: input was not flagged for differentiation");
    if (nodes_[output].val.cols != 1)
        fail("grad_wrt_input: output must be a per-row scalar (one column)");
    const int n_before = static_cast<int>(nodes_.size());
    // Nodes depending on the input.
    std::vector<char> from_input(n_before, 0);
    from_input[input] = 1;
    for (int id = input + 1; id < n_before; ++id)
        for (int m : nodes_[id].inputs)
            if (from_input[m]) {
                from_input[id] = 1;
                break;
            }
    // Ancestors of the output.
    std::vector<char> to_output(n_before, 0);
    to_output[output] = 1;
    for (int id = output; id >= 0; --id)
        if (to_output[id])
            for (int m : nodes_[id].inputs) to_output[m] = 1;

    std::vector<int> adj(n_before, -1);
    adj[output] = constant(Tensor::full(nodes_[output].val.rows, 1, 1.0));
    auto active = [&](int id) { return from_input[id] && to_output[id]; };
    auto add_adj = [&](int id, int contrib) {
        adj[id] = adj[id] < 0 ? contrib : add(adj[id], contrib);
    };

    for (int id = output; id > input; --id) {
        if (!active(id) || adj[id] < 0) continue;
        // Copy the metadata: emission below pushes nodes and can reallocate
        // nodes_, so no reference into it may outlive an emitted op.
        const Op op = nodes_[id].op;
        const std::vector<int> ins = nodes_[id].inputs;
        const Axis ax = nodes_[id].axis;
        const double a0 = nodes_[id].a0;
        const int s0 = nodes_[id].i0, s1 = nodes_[id].i1;
        const int out_rows = nodes_[id].val.rows, out_cols = nodes_[id].val.cols;
        int ga = adj[id];
        auto shaped_like_out = [&](int m) {
            return nodes_[m].val.rows == out_rows && nodes_[m].val.cols == out_cols;
        };
        auto emit_unsupported = [&] {
            fail(std::string("grad_wrt_input through op '") + op_name(op) + "' is not supported");
        };
        switch (op) {
            case Op::add:
            case Op::sub:
                for (int side = 0; side < 2; ++side) {
                    int m = ins[side];
                    if (!active(m)) continue;
                    if (!shaped_like_out(m))
                        fail("grad_wrt_input through broadcast operand is not supported");
                    if (op == Op::sub && side == 1)
                        add_adj(m, mul(ga, scalar(-1.0)));
                    else
                        add_adj(m, ga);
                }
                break;
            case Op::mul:
                for (int side = 0; side < 2; ++side) {
                    int m = ins[side];
                    if (!active(m)) continue;
                    if (!shaped_like_out(m))
                        fail("grad_wrt_input through broadcast operand is not supported");
                    add_adj(m, mul(ga, ins[1 - side]));
                }
                break;
            case Op::div: {
                int a = ins[0], b = ins[1];
                if (active(a)) {
                    if (!shaped_like_out(a))
                        fail("grad_wrt_input through broadcast operand is not supported");
                    add_adj(a, div(ga, b));
                }
                if (active(b)) {
                    if (!shaped_like_out(b))
                        fail("grad_wrt_input through broadcast operand is not supported");
                    // -g * out / b
                    add_adj(b, mul(mul(ga, scalar(-1.0)), div(id, b)));
                }
                break;
            }
            case Op::matmul: {
                int a = ins[0], b = ins[1];
                if (active(a)) add_adj(a, matmul(ga, transpose(b)));
                if (active(b)) add_adj(b, matmul(transpose(a), ga));
                break;
            }
            case Op::affine: {
                if (active(ins[1]) || active(ins[2])) emit_unsupported();
                if (active(ins[0])) add_adj(ins[0], matmul(ga, transpose(ins[1])));
                break;
            }
            case Op::concat: {
                int off = 0;
                for (int m : ins) {
                    int w = nodes_[m].val.cols;
                    if (active(m)) add_adj(m, slice_cols(ga, off, off + w));
                    off += w;
                }
                break;
            }
            case Op::slice_cols: {
                int m = ins[0];
                if (!active(m)) break;
                int total = nodes_[m].val.cols;
                std::vector<int> parts;
                if (s0 > 0) parts.push_back(constant(Tensor(out_rows, s0)));
                parts.push_back(ga);
                if (s1 < total) parts.push_back(constant(Tensor(out_rows, total - s1)));
                add_adj(m, parts.size() == 1 ? ga : concat(parts));
                break;
            }
            case Op::relu:
                if (active(ins[0])) add_adj(ins[0], mul(ga, heaviside(ins[0])));
                break;
            case Op::elu:
                if (active(ins[0])) add_adj(ins[0], mul(ga, elu_grad_op(ins[0])));
                break;
            case Op::tanh_fn:
                if (active(ins[0])) add_adj(ins[0], mul(ga, sub(scalar(1.0), square(id))));
                break;
            case Op::sigmoid:
                if (active(ins[0])) add_adj(ins[0], mul(ga, sub(id, square(id))));
                break;
            case Op::sin_fn:
                if (active(ins[0])) add_adj(ins[0], mul(ga, cos(ins[0])));
                break;
            case Op::cos_fn:
                if (active(ins[0])) add_adj(ins[0], mul(ga, mul(sin(ins[0]), scalar(-1.0))));
                break;
            case Op::exp_fn:
                if (active(ins[0])) add_adj(ins[0], mul(ga, id));
                break;
            case Op::log_fn:
                if (active(ins[0])) add_adj(ins[0], div(ga, ins[0]));
                break;
            case Op::sqrt_fn:
                if (active(ins[0])) add_adj(ins[0], div(mul(ga, scalar(0.5)), id));
                break;
            case Op::square:
                if (active(ins[0])) add_adj(ins[0], mul(ga, mul(ins[0], scalar(2.0))));
                break;
            case Op::clamp:
                if (active(ins[1]) || active(ins[2])) emit_unsupported();
                if (active(ins[0]))
                    add_adj(ins[0], mul(ga, clamp_mask(ins[0], ins[1], ins[2])));
                break;
            case Op::signed_floor: {
                int m = ins[0];
                if (active(m)) {
                    // 1 - clamp_mask(|x| <= eps) keeps gradient only where the
                    // floor passed x through unchanged.
                    int lo = constant(Tensor::scalar(-a0));
                    int hi = constant(Tensor::scalar(a0));
                    int inside = clamp_mask(m, lo, hi);
                    add_adj(m, mul(ga, sub(scalar(1.0), inside)));
                }
                break;
            }
            case Op::reduce_sum:
            case Op::reduce_mean: {
                int m = ins[0];
                if (!active(m)) break;
                if (ax != Axis::cols)
                    fail("grad_wrt_input through row-mixing reduction is not supported");
                int in_rows = nodes_[m].val.rows, in_cols = nodes_[m].val.cols;
                double scale = op == Op::reduce_mean ? 1.0 / in_cols : 1.0;
                int ones = constant(Tensor::full(in_rows, in_cols, scale));
                add_adj(m, mul(ones, ga));  // column vector broadcast across cols
                break;
            }
            default:
                emit_unsupported();
        }
    }
    if (adj[input] < 0) {
        const Tensor& X = nodes_[input].val;
        return constant(Tensor(X.rows, X.cols));
    }
    return adj[input];
}

void Tape::clear() {
    nodes_.clear();
    backward_done_ = false;
}

}  // namespace semilin
