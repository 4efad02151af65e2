#include "mugv/autodiff.hpp"

#include <cmath>
#include <cstring>

namespace mugv {

namespace {

// ceil(a / b) for b > 0, correct for negative a
inline int64_t ceil_div(int64_t a, int64_t b) {
    return a / b + ((a % b > 0) ? 1 : 0);
}

// C (m,n) += A (m,k) * B (k,n)
void mm_nn(const real* A, const real* B, real* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const real* a = A + i * k;
        real* c = C + i * n;
        for (int64_t l = 0; l < k; ++l) {
            real r = a[l];
            const real* b = B + l * n;
            for (int64_t j = 0; j < n; ++j) c[j] += r * b[j];
        }
    }
}

// C (m,n) += A (m,k) * B (n,k)^T
void mm_nt(const real* A, const real* B, real* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const real* a = A + i * k;
        real* c = C + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const real* b = B + j * k;
            real acc = 0.0;
            for (int64_t l = 0; l < k; ++l) acc += a[l] * b[l];
            c[j] += acc;
        }
    }
}

// C (k,n) += A (m,k)^T * B (m,n)
void mm_tn(const real* A, const real* B, real* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const real* a = A + i * k;
        const real* b = B + i * n;
        for (int64_t j = 0; j < k; ++j) {
            real r = a[j];
            real* c = C + j * n;
            for (int64_t l = 0; l < n; ++l) c[l] += r * b[l];
        }
    }
}

inline real sigmoid_scalar(real x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var Tape::push(Tensor val, bool requires_grad, std::function<void(Tape&, Var)> back) {
    Node n;
    n.val = std::move(val);
    n.requires_grad = requires_grad;
    if (requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor v, bool requires_grad) {
    return push(std::move(v), requires_grad, nullptr);
}

Tensor& Tape::gbuf(Var v) {
    Node& n = nodes_[check(v)];
    if (n.grad.empty() && n.val.numel() > 0) n.grad = Tensor::zeros(n.val.shape());
    return n.grad;
}

const Tensor& Tape::grad(Var v) {
    return gbuf(v);
}

void Tape::backward(Var loss) {
    int li = check(loss);
    if (nodes_[li].val.numel() != 1) throw DimensionError("backward target must be scalar, got " + nodes_[li].val.shape_str());
    if (!nodes_[li].requires_grad) throw InputError("backward target does not depend on any differentiable leaf");
    for (Node& n : nodes_) n.grad = Tensor();
    gbuf(loss)[0] = 1.0;
    for (int i = li; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.grad.empty() && n.back) n.back(*this, Var{i});
    }
}

// ---------------- elementwise ----------------

Var Tape::add(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require_same_shape(A, B, "add");
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = A[i] + B[i];
    return push(std::move(y), needs(a) || needs(b), [a, b](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        if (t.needs(a)) {
            Tensor& ga = t.gbuf(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (t.needs(b)) {
            Tensor& gb = t.gbuf(b);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
    });
}

Var Tape::sub(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require_same_shape(A, B, "sub");
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = A[i] - B[i];
    return push(std::move(y), needs(a) || needs(b), [a, b](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        if (t.needs(a)) {
            Tensor& ga = t.gbuf(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (t.needs(b)) {
            Tensor& gb = t.gbuf(b);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
}

Var Tape::mul(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require_same_shape(A, B, "mul");
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = A[i] * B[i];
    return push(std::move(y), needs(a) || needs(b), [a, b](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& A2 = t.val(a);
        const Tensor& B2 = t.val(b);
        if (t.needs(a)) {
            Tensor& ga = t.gbuf(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * B2[i];
        }
        if (t.needs(b)) {
            Tensor& gb = t.gbuf(b);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * A2[i];
        }
    });
}

Var Tape::neg(Var a) { return scale(a, -1.0); }

Var Tape::scale(Var a, real c) {
    const Tensor& A = val(a);
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = c * A[i];
    return push(std::move(y), needs(a), [a, c](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
    });
}

Var Tape::add_scalar(Var a, real c) {
    const Tensor& A = val(a);
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = A[i] + c;
    return push(std::move(y), needs(a), [a](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

Var Tape::square(Var a) {
    const Tensor& A = val(a);
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = A[i] * A[i];
    return push(std::move(y), needs(a), [a](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& A2 = t.val(a);
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += 2.0 * A2[i] * g[i];
    });
}

Var Tape::sqrt_(Var a) {
    const Tensor& A = val(a);
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::sqrt(A[i]);
    return push(std::move(y), needs(a), [a](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& Y = t.nodes_[self.i].val;
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += 0.5 / Y[i] * g[i];
    });
}

Var Tape::exp_(Var a) {
    const Tensor& A = val(a);
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::exp(A[i]);
    return push(std::move(y), needs(a), [a](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& Y = t.nodes_[self.i].val;
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += Y[i] * g[i];
    });
}

Var Tape::log_(Var a) {
    const Tensor& A = val(a);
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::log(A[i]);
    return push(std::move(y), needs(a), [a](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& A2 = t.val(a);
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / A2[i];
    });
}

Var Tape::abs_(Var a) {
    const Tensor& A = val(a);
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::fabs(A[i]);
    return push(std::move(y), needs(a), [a](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& A2 = t.val(a);
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += (A2[i] > 0.0 ? 1.0 : (A2[i] < 0.0 ? -1.0 : 0.0)) * g[i];
    });
}

Var Tape::relu(Var a) {
    const Tensor& A = val(a);
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = A[i] > 0.0 ? A[i] : 0.0;
    return push(std::move(y), needs(a), [a](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& A2 = t.val(a);
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += (A2[i] > 0.0 ? 1.0 : 0.0) * g[i];
    });
}

Var Tape::leaky_relu(Var a, real slope) {
    const Tensor& A = val(a);
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = A[i] > 0.0 ? A[i] : slope * A[i];
    return push(std::move(y), needs(a), [a, slope](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& A2 = t.val(a);
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += (A2[i] > 0.0 ? 1.0 : slope) * g[i];
    });
}

Var Tape::silu(Var a) {
    const Tensor& A = val(a);
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = A[i] * sigmoid_scalar(A[i]);
    return push(std::move(y), needs(a), [a](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& A2 = t.val(a);
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) {
            real s = sigmoid_scalar(A2[i]);
            ga[i] += (s + A2[i] * s * (1.0 - s)) * g[i];
        }
    });
}

Var Tape::sigmoid_(Var a) {
    const Tensor& A = val(a);
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = sigmoid_scalar(A[i]);
    return push(std::move(y), needs(a), [a](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& Y = t.nodes_[self.i].val;
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += Y[i] * (1.0 - Y[i]) * g[i];
    });
}

Var Tape::softplus(Var a) {
    const Tensor& A = val(a);
    Tensor y(A.shape());
    // max(x,0) + log1p(exp(-|x|)) never overflows
    for (int64_t i = 0; i < y.numel(); ++i)
        y[i] = std::max(A[i], 0.0) + std::log1p(std::exp(-std::fabs(A[i])));
    return push(std::move(y), needs(a), [a](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& A2 = t.val(a);
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += sigmoid_scalar(A2[i]) * g[i];
    });
}

Var Tape::tanh_(Var a) {
    const Tensor& A = val(a);
    Tensor y(A.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::tanh(A[i]);
    return push(std::move(y), needs(a), [a](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& Y = t.nodes_[self.i].val;
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += (1.0 - Y[i] * Y[i]) * g[i];
    });
}

// ---------------- broadcasts ----------------

Var Tape::add_bias(Var x, Var b) {
    const Tensor& X = val(x);
    const Tensor& B = val(b);
    if (X.rank() != 2 || B.rank() != 1 || X.dim(1) != B.dim(0))
        throw DimensionError("add_bias: x " + X.shape_str() + " vs b " + B.shape_str());
    int64_t N = X.dim(0), D = X.dim(1);
    Tensor y(X.shape());
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < D; ++j) y[i * D + j] = X[i * D + j] + B[j];
    return push(std::move(y), needs(x) || needs(b), [x, b, N, D](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        if (t.needs(x)) {
            Tensor& gx = t.gbuf(x);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        }
        if (t.needs(b)) {
            Tensor& gb = t.gbuf(b);
            for (int64_t i = 0; i < N; ++i)
                for (int64_t j = 0; j < D; ++j) gb[j] += g[i * D + j];
        }
    });
}

Var Tape::mul_gain(Var x, Var g_) {
    const Tensor& X = val(x);
    const Tensor& G = val(g_);
    if (X.rank() != 2 || G.rank() != 1 || X.dim(1) != G.dim(0))
        throw DimensionError("mul_gain: x " + X.shape_str() + " vs g " + G.shape_str());
    int64_t N = X.dim(0), D = X.dim(1);
    Tensor y(X.shape());
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < D; ++j) y[i * D + j] = X[i * D + j] * G[j];
    return push(std::move(y), needs(x) || needs(g_), [x, g_, N, D](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& X2 = t.val(x);
        const Tensor& G2 = t.val(g_);
        if (t.needs(x)) {
            Tensor& gx = t.gbuf(x);
            for (int64_t i = 0; i < N; ++i)
                for (int64_t j = 0; j < D; ++j) gx[i * D + j] += g[i * D + j] * G2[j];
        }
        if (t.needs(g_)) {
            Tensor& gg = t.gbuf(g_);
            for (int64_t i = 0; i < N; ++i)
                for (int64_t j = 0; j < D; ++j) gg[j] += g[i * D + j] * X2[i * D + j];
        }
    });
}

Var Tape::mul_head_scalar(Var x, Var s, int heads) {
    const Tensor& X = val(x);
    const Tensor& S = val(s);
    if (X.rank() != 2 || S.numel() != heads || X.dim(1) % heads != 0)
        throw DimensionError("mul_head_scalar: x " + X.shape_str() + ", s " + S.shape_str());
    int64_t N = X.dim(0), D = X.dim(1), hd = D / heads;
    Tensor y(X.shape());
    for (int64_t i = 0; i < N; ++i)
        for (int64_t h = 0; h < heads; ++h) {
            real sv = S[h];
            for (int64_t j = 0; j < hd; ++j) y[i * D + h * hd + j] = X[i * D + h * hd + j] * sv;
        }
    return push(std::move(y), needs(x) || needs(s), [x, s, heads, N, D, hd](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& X2 = t.val(x);
        const Tensor& S2 = t.val(s);
        if (t.needs(x)) {
            Tensor& gx = t.gbuf(x);
            for (int64_t i = 0; i < N; ++i)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t j = 0; j < hd; ++j) gx[i * D + h * hd + j] += g[i * D + h * hd + j] * S2[h];
        }
        if (t.needs(s)) {
            Tensor& gs = t.gbuf(s);
            for (int64_t i = 0; i < N; ++i)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t j = 0; j < hd; ++j) gs[h] += g[i * D + h * hd + j] * X2[i * D + h * hd + j];
        }
    });
}

Var Tape::mul_chan_bcast(Var x, Var w) {
    const Tensor& X = val(x);
    const Tensor& W = val(w);
    if (X.rank() != 4 || W.rank() != 4 || W.dim(1) != 1 || X.dim(0) != W.dim(0) || X.dim(2) != W.dim(2) ||
        X.dim(3) != W.dim(3))
        throw DimensionError("mul_chan_bcast: x " + X.shape_str() + " vs w " + W.shape_str());
    int64_t T = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
    Tensor y(X.shape());
    for (int64_t tt = 0; tt < T; ++tt)
        for (int64_t c = 0; c < C; ++c) {
            const real* xs = X.data() + (tt * C + c) * HW;
            const real* ws = W.data() + tt * HW;
            real* ys = y.data() + (tt * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) ys[i] = xs[i] * ws[i];
        }
    return push(std::move(y), needs(x) || needs(w), [x, w, T, C, HW](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& X2 = t.val(x);
        const Tensor& W2 = t.val(w);
        if (t.needs(x)) {
            Tensor& gx = t.gbuf(x);
            for (int64_t tt = 0; tt < T; ++tt)
                for (int64_t c = 0; c < C; ++c) {
                    const real* gs = g.data() + (tt * C + c) * HW;
                    const real* ws = W2.data() + tt * HW;
                    real* o = gx.data() + (tt * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) o[i] += gs[i] * ws[i];
                }
        }
        if (t.needs(w)) {
            Tensor& gw = t.gbuf(w);
            for (int64_t tt = 0; tt < T; ++tt)
                for (int64_t c = 0; c < C; ++c) {
                    const real* gs = g.data() + (tt * C + c) * HW;
                    const real* xs = X2.data() + (tt * C + c) * HW;
                    real* o = gw.data() + tt * HW;
                    for (int64_t i = 0; i < HW; ++i) o[i] += gs[i] * xs[i];
                }
        }
    });
}

// ---------------- reductions ----------------

Var Tape::sum_all(Var a) {
    const Tensor& A = val(a);
    real s = 0.0;
    for (int64_t i = 0; i < A.numel(); ++i) s += A[i];
    return push(Tensor::scalar(s), needs(a), [a](Tape& t, Var self) {
        real g = t.nodes_[self.i].grad[0];
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

Var Tape::mean_all(Var a) {
    const Tensor& A = val(a);
    if (A.numel() == 0) throw DimensionError("mean_all of empty tensor");
    real s = 0.0;
    for (int64_t i = 0; i < A.numel(); ++i) s += A[i];
    real inv = 1.0 / static_cast<real>(A.numel());
    return push(Tensor::scalar(s * inv), needs(a), [a, inv](Tape& t, Var self) {
        real g = t.nodes_[self.i].grad[0] * inv;
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

Var Tape::masked_mean(Var a, std::vector<uint8_t> row_mask) {
    const Tensor& A = val(a);
    if (A.rank() != 2 || static_cast<int64_t>(row_mask.size()) != A.dim(0))
        throw DimensionError("masked_mean: a " + A.shape_str() + " with mask of " + std::to_string(row_mask.size()));
    int64_t N = A.dim(0), D = A.dim(1);
    int64_t sel = 0;
    for (uint8_t m : row_mask) sel += m ? 1 : 0;
    real s = 0.0;
    for (int64_t i = 0; i < N; ++i) {
        if (!row_mask[static_cast<size_t>(i)]) continue;
        const real* r = A.data() + i * D;
        for (int64_t j = 0; j < D; ++j) s += r[j];
    }
    real inv = sel > 0 ? 1.0 / static_cast<real>(sel * D) : 0.0;
    auto mask = std::make_shared<std::vector<uint8_t>>(std::move(row_mask));
    return push(Tensor::scalar(s * inv), needs(a), [a, mask, N, D, inv](Tape& t, Var self) {
        if (inv == 0.0) return;
        real g = t.nodes_[self.i].grad[0] * inv;
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < N; ++i) {
            if (!(*mask)[static_cast<size_t>(i)]) continue;
            real* r = ga.data() + i * D;
            for (int64_t j = 0; j < D; ++j) r[j] += g;
        }
    });
}

// ---------------- matmul ----------------

Var Tape::matmul(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
        throw DimensionError("matmul: " + A.shape_str() + " x " + B.shape_str());
    int64_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor y({m, n});
    mm_nn(A.data(), B.data(), y.data(), m, k, n);
    return push(std::move(y), needs(a) || needs(b), [a, b, m, k, n](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& A2 = t.val(a);
        const Tensor& B2 = t.val(b);
        if (t.needs(a)) mm_nt(g.data(), B2.data(), t.gbuf(a).data(), m, n, k);
        if (t.needs(b)) mm_tn(A2.data(), g.data(), t.gbuf(b).data(), m, k, n);
    });
}

Var Tape::matmul_nt(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1))
        throw DimensionError("matmul_nt: " + A.shape_str() + " x " + B.shape_str() + "^T");
    int64_t m = A.dim(0), k = A.dim(1), n = B.dim(0);
    Tensor y({m, n});
    mm_nt(A.data(), B.data(), y.data(), m, k, n);
    return push(std::move(y), needs(a) || needs(b), [a, b, m, k, n](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& A2 = t.val(a);
        const Tensor& B2 = t.val(b);
        if (t.needs(a)) mm_nn(g.data(), B2.data(), t.gbuf(a).data(), m, n, k);
        if (t.needs(b)) mm_tn(g.data(), A2.data(), t.gbuf(b).data(), m, n, k);
    });
}

// ---------------- shape ----------------

Var Tape::reshape(Var a, std::vector<int64_t> shape) {
    Tensor y = val(a).reshaped(std::move(shape));
    return push(std::move(y), needs(a), [a](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

Var Tape::concat0(const std::vector<Var>& parts) {
    if (parts.empty()) throw InputError("concat0: no parts");
    const Tensor& first = val(parts[0]);
    std::vector<int64_t> tail(first.shape().begin() + 1, first.shape().end());
    int64_t total0 = 0;
    bool rg = false;
    for (Var p : parts) {
        const Tensor& v = val(p);
        if (v.rank() != first.rank() ||
            !std::equal(tail.begin(), tail.end(), v.shape().begin() + 1))
            throw DimensionError("concat0: trailing dims differ, " + first.shape_str() + " vs " + v.shape_str());
        total0 += v.dim(0);
        rg = rg || needs(p);
    }
    std::vector<int64_t> out_shape{total0};
    out_shape.insert(out_shape.end(), tail.begin(), tail.end());
    Tensor y(out_shape);
    int64_t at = 0;
    for (Var p : parts) {
        const Tensor& v = val(p);
        std::memcpy(y.data() + at, v.data(), sizeof(real) * static_cast<size_t>(v.numel()));
        at += v.numel();
    }
    auto ps = std::make_shared<std::vector<Var>>(parts);
    return push(std::move(y), rg, [ps](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        int64_t at = 0;
        for (Var p : *ps) {
            int64_t n = t.val(p).numel();
            if (t.needs(p)) {
                Tensor& gp = t.gbuf(p);
                for (int64_t i = 0; i < n; ++i) gp[i] += g[at + i];
            }
            at += n;
        }
    });
}

Var Tape::rearrange(Var a, std::shared_ptr<const std::vector<int64_t>> index, std::vector<int64_t> out_shape) {
    const Tensor& A = val(a);
    Tensor y(std::move(out_shape));
    if (y.numel() != static_cast<int64_t>(index->size())) throw DimensionError("rearrange: index size mismatch");
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = A[(*index)[static_cast<size_t>(i)]];
    return push(std::move(y), needs(a), [a, index](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[(*index)[static_cast<size_t>(i)]] += g[i];
    });
}

Var Tape::permute(Var a, const std::vector<int>& perm) {
    const Tensor& A = val(a);
    int r = A.rank();
    if (static_cast<int>(perm.size()) != r) throw DimensionError("permute: rank mismatch");
    std::vector<int64_t> out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = A.dim(perm[static_cast<size_t>(i)]);
    std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * A.dim(i + 1);
    auto index = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(A.numel()));
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    for (int64_t o = 0; o < A.numel(); ++o) {
        int64_t src = 0;
        for (int i = 0; i < r; ++i) src += idx[static_cast<size_t>(i)] * in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        (*index)[static_cast<size_t>(o)] = src;
        for (int i = r - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    return rearrange(a, index, out_shape);
}

Var Tape::slice_cols(Var a, int64_t start, int64_t count) {
    const Tensor& A = val(a);
    if (A.rank() != 2 || start < 0 || start + count > A.dim(1)) throw DimensionError("slice_cols out of range");
    int64_t N = A.dim(0), D = A.dim(1);
    Tensor y({N, count});
    for (int64_t i = 0; i < N; ++i)
        std::memcpy(y.data() + i * count, A.data() + i * D + start, sizeof(real) * static_cast<size_t>(count));
    return push(std::move(y), needs(a), [a, start, count, N, D](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < N; ++i)
            for (int64_t j = 0; j < count; ++j) ga[i * D + start + j] += g[i * count + j];
    });
}

Var Tape::slice_flat(Var a, int64_t start, std::vector<int64_t> out_shape) {
    const Tensor& A = val(a);
    int64_t count = Tensor::shape_numel(out_shape);
    if (start < 0 || start + count > A.numel()) throw DimensionError("slice_flat out of range");
    Tensor y(std::move(out_shape));
    std::memcpy(y.data(), A.data() + start, sizeof(real) * static_cast<size_t>(count));
    return push(std::move(y), needs(a), [a, start, count](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        Tensor& ga = t.gbuf(a);
        for (int64_t i = 0; i < count; ++i) ga[start + i] += g[i];
    });
}

Var Tape::select_rows(Var table, std::vector<int64_t> ids) {
    const Tensor& T_ = val(table);
    if (T_.rank() != 2) throw DimensionError("select_rows: table must be 2-d");
    int64_t V = T_.dim(0), D = T_.dim(1);
    for (int64_t id : ids)
        if (id < 0 || id >= V) throw InputError("select_rows: id " + std::to_string(id) + " out of range [0, " + std::to_string(V) + ")");
    int64_t L = static_cast<int64_t>(ids.size());
    Tensor y({L, D});
    for (int64_t i = 0; i < L; ++i)
        std::memcpy(y.data() + i * D, T_.data() + ids[static_cast<size_t>(i)] * D, sizeof(real) * static_cast<size_t>(D));
    auto idv = std::make_shared<std::vector<int64_t>>(std::move(ids));
    return push(std::move(y), needs(table), [table, idv, D](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        Tensor& gt = t.gbuf(table);
        for (size_t i = 0; i < idv->size(); ++i) {
            real* dst = gt.data() + (*idv)[i] * D;
            const real* src = g.data() + static_cast<int64_t>(i) * D;
            for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
        }
    });
}

Var Tape::replace_rows(Var x, std::vector<uint8_t> row_mask, Tensor replacement) {
    const Tensor& X = val(x);
    require_same_shape(X, replacement, "replace_rows");
    if (X.rank() != 2 || static_cast<int64_t>(row_mask.size()) != X.dim(0))
        throw DimensionError("replace_rows: mask size mismatch");
    int64_t N = X.dim(0), D = X.dim(1);
    Tensor y = X;
    for (int64_t i = 0; i < N; ++i)
        if (row_mask[static_cast<size_t>(i)])
            std::memcpy(y.data() + i * D, replacement.data() + i * D, sizeof(real) * static_cast<size_t>(D));
    auto mask = std::make_shared<std::vector<uint8_t>>(std::move(row_mask));
    return push(std::move(y), needs(x), [x, mask, N, D](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        Tensor& gx = t.gbuf(x);
        for (int64_t i = 0; i < N; ++i) {
            if ((*mask)[static_cast<size_t>(i)]) continue;
            for (int64_t j = 0; j < D; ++j) gx[i * D + j] += g[i * D + j];
        }
    });
}

// ---------------- normalisation ----------------

Var Tape::rmsnorm_rows(Var x, real eps) {
    const Tensor& X = val(x);
    if (X.rank() != 2) throw DimensionError("rmsnorm_rows: need 2-d input");
    int64_t N = X.dim(0), D = X.dim(1);
    Tensor y(X.shape());
    auto inv = std::make_shared<std::vector<real>>(static_cast<size_t>(N));
    for (int64_t i = 0; i < N; ++i) {
        const real* r = X.data() + i * D;
        real ms = 0.0;
        for (int64_t j = 0; j < D; ++j) ms += r[j] * r[j];
        ms = ms / static_cast<real>(D);
        real iv = 1.0 / std::sqrt(ms + eps);
        (*inv)[static_cast<size_t>(i)] = iv;
        real* o = y.data() + i * D;
        for (int64_t j = 0; j < D; ++j) o[j] = r[j] * iv;
    }
    return push(std::move(y), needs(x), [x, inv, N, D](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& X2 = t.val(x);
        Tensor& gx = t.gbuf(x);
        for (int64_t i = 0; i < N; ++i) {
            const real* gr = g.data() + i * D;
            const real* xr = X2.data() + i * D;
            real* o = gx.data() + i * D;
            real iv = (*inv)[static_cast<size_t>(i)];
            real dot = 0.0;
            for (int64_t j = 0; j < D; ++j) dot += gr[j] * xr[j];
            real c = dot * iv * iv * iv / static_cast<real>(D);
            for (int64_t j = 0; j < D; ++j) o[j] += gr[j] * iv - xr[j] * c;
        }
    });
}

Var Tape::l2norm_heads(Var x, int heads, real eps) {
    const Tensor& X = val(x);
    if (X.rank() != 2 || X.dim(1) % heads != 0) throw DimensionError("l2norm_heads: bad shape " + X.shape_str());
    int64_t N = X.dim(0), D = X.dim(1), hd = D / heads;
    Tensor y(X.shape());
    auto inv = std::make_shared<std::vector<real>>(static_cast<size_t>(N * heads));
    for (int64_t i = 0; i < N; ++i)
        for (int64_t h = 0; h < heads; ++h) {
            const real* r = X.data() + i * D + h * hd;
            real ss = 0.0;
            for (int64_t j = 0; j < hd; ++j) ss += r[j] * r[j];
            real iv = 1.0 / std::sqrt(ss + eps);
            (*inv)[static_cast<size_t>(i * heads + h)] = iv;
            real* o = y.data() + i * D + h * hd;
            for (int64_t j = 0; j < hd; ++j) o[j] = r[j] * iv;
        }
    return push(std::move(y), needs(x), [x, inv, heads, N, D, hd](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& X2 = t.val(x);
        Tensor& gx = t.gbuf(x);
        for (int64_t i = 0; i < N; ++i)
            for (int64_t h = 0; h < heads; ++h) {
                const real* gr = g.data() + i * D + h * hd;
                const real* xr = X2.data() + i * D + h * hd;
                real* o = gx.data() + i * D + h * hd;
                real iv = (*inv)[static_cast<size_t>(i * heads + h)];
                real dot = 0.0;
                for (int64_t j = 0; j < hd; ++j) dot += gr[j] * xr[j];
                real c = dot * iv * iv * iv;
                for (int64_t j = 0; j < hd; ++j) o[j] += gr[j] * iv - xr[j] * c;
            }
    });
}

// ---------------- attention ----------------

Var Tape::mha(Var q, Var k, Var v, int heads) {
    const Tensor& Q = val(q);
    const Tensor& K = val(k);
    const Tensor& V = val(v);
    if (Q.rank() != 2 || K.rank() != 2 || V.rank() != 2 || Q.dim(1) != K.dim(1) || K.shape() != V.shape() ||
        Q.dim(1) % heads != 0)
        throw DimensionError("mha: q " + Q.shape_str() + ", k " + K.shape_str() + ", v " + V.shape_str());
    int64_t Nq = Q.dim(0), Nk = K.dim(0), D = Q.dim(1), hd = D / heads;
    Tensor y({Nq, D});
    auto probs = std::make_shared<Tensor>(Tensor::zeros({heads, Nq, Nk}));
    std::vector<real> logits(static_cast<size_t>(Nk));
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < Nq; ++i) {
            const real* qi = Q.data() + i * D + h * hd;
            real mx = -1e300;
            for (int64_t j = 0; j < Nk; ++j) {
                const real* kj = K.data() + j * D + h * hd;
                real acc = 0.0;
                for (int64_t d = 0; d < hd; ++d) acc += qi[d] * kj[d];
                logits[static_cast<size_t>(j)] = acc;
                mx = std::max(mx, acc);
            }
            real z = 0.0;
            real* p = probs->data() + (h * Nq + i) * Nk;
            for (int64_t j = 0; j < Nk; ++j) {
                real e = std::exp(logits[static_cast<size_t>(j)] - mx);
                p[j] = e;
                z += e;
            }
            real izn = 1.0 / z;
            for (int64_t j = 0; j < Nk; ++j) p[j] *= izn;
            real* o = y.data() + i * D + h * hd;
            for (int64_t j = 0; j < Nk; ++j) {
                const real* vj = V.data() + j * D + h * hd;
                real pj = p[j];
                for (int64_t d = 0; d < hd; ++d) o[d] += pj * vj[d];
            }
        }
    }
    bool rg = needs(q) || needs(k) || needs(v);
    return push(std::move(y), rg, [q, k, v, probs, heads, Nq, Nk, D, hd](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& Q2 = t.val(q);
        const Tensor& K2 = t.val(k);
        const Tensor& V2 = t.val(v);
        bool nq = t.needs(q), nk = t.needs(k), nv = t.needs(v);
        Tensor* gq = nq ? &t.gbuf(q) : nullptr;
        Tensor* gk = nk ? &t.gbuf(k) : nullptr;
        Tensor* gv = nv ? &t.gbuf(v) : nullptr;
        std::vector<real> dp(static_cast<size_t>(Nk)), dl(static_cast<size_t>(Nk));
        for (int64_t h = 0; h < heads; ++h) {
            for (int64_t i = 0; i < Nq; ++i) {
                const real* p = probs->data() + (h * Nq + i) * Nk;
                const real* go = g.data() + i * D + h * hd;
                // dV and dP
                real pdot = 0.0;
                for (int64_t j = 0; j < Nk; ++j) {
                    const real* vj = V2.data() + j * D + h * hd;
                    real acc = 0.0;
                    for (int64_t d = 0; d < hd; ++d) acc += go[d] * vj[d];
                    dp[static_cast<size_t>(j)] = acc;
                    pdot += acc * p[j];
                    if (nv) {
                        real* gvj = gv->data() + j * D + h * hd;
                        real pj = p[j];
                        for (int64_t d = 0; d < hd; ++d) gvj[d] += pj * go[d];
                    }
                }
                // softmax backward
                for (int64_t j = 0; j < Nk; ++j) dl[static_cast<size_t>(j)] = p[j] * (dp[static_cast<size_t>(j)] - pdot);
                if (nq) {
                    real* gqi = gq->data() + i * D + h * hd;
                    for (int64_t j = 0; j < Nk; ++j) {
                        const real* kj = K2.data() + j * D + h * hd;
                        real dlj = dl[static_cast<size_t>(j)];
                        for (int64_t d = 0; d < hd; ++d) gqi[d] += dlj * kj[d];
                    }
                }
                if (nk) {
                    const real* qi = Q2.data() + i * D + h * hd;
                    for (int64_t j = 0; j < Nk; ++j) {
                        real* gkj = gk->data() + j * D + h * hd;
                        real dlj = dl[static_cast<size_t>(j)];
                        for (int64_t d = 0; d < hd; ++d) gkj[d] += dlj * qi[d];
                    }
                }
            }
        }
    });
}

// ---------------- rotary embedding ----------------

namespace {

// applies the axis rotations of one head vector; dir = +1 forward, -1 inverse
void rope_apply_vec(const real* in, real* out, const std::array<int, 3>& coord, const std::array<int, 3>& split,
                    real base, int dir) {
    int off = 0;
    for (int axis = 0; axis < 3; ++axis) {
        int d = split[static_cast<size_t>(axis)];
        int half = d / 2;
        real pos = static_cast<real>(coord[static_cast<size_t>(axis)]);
        for (int i = 0; i < half; ++i) {
            real freq = std::pow(base, -2.0 * static_cast<real>(i) / static_cast<real>(d));
            real th = pos * freq * static_cast<real>(dir);
            real c = std::cos(th), s = std::sin(th);
            real a = in[off + 2 * i], b = in[off + 2 * i + 1];
            out[off + 2 * i] = a * c - b * s;
            out[off + 2 * i + 1] = a * s + b * c;
        }
        off += d;
    }
}

}  // namespace

Var Tape::rope3d(Var x, std::shared_ptr<const std::vector<std::array<int, 3>>> coords, std::array<int, 3> split,
                 int heads, real base) {
    const Tensor& X = val(x);
    int hd = split[0] + split[1] + split[2];
    if (split[0] % 2 || split[1] % 2 || split[2] % 2)
        throw ConfigError("rope3d: slice sizes must be even, got (" + std::to_string(split[0]) + ", " +
                          std::to_string(split[1]) + ", " + std::to_string(split[2]) + ")");
    if (X.rank() != 2 || X.dim(1) != static_cast<int64_t>(heads) * hd ||
        X.dim(0) != static_cast<int64_t>(coords->size()))
        throw DimensionError("rope3d: x " + X.shape_str() + " does not match coords/split");
    int64_t N = X.dim(0), D = X.dim(1);
    Tensor y(X.shape());
    for (int64_t i = 0; i < N; ++i)
        for (int h = 0; h < heads; ++h)
            rope_apply_vec(X.data() + i * D + h * hd, y.data() + i * D + h * hd, (*coords)[static_cast<size_t>(i)],
                           split, base, +1);
    return push(std::move(y), needs(x), [x, coords, split, heads, base, N, D, hd](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        Tensor& gx = t.gbuf(x);
        std::vector<real> tmp(static_cast<size_t>(hd));
        for (int64_t i = 0; i < N; ++i)
            for (int h = 0; h < heads; ++h) {
                rope_apply_vec(g.data() + i * D + h * hd, tmp.data(), (*coords)[static_cast<size_t>(i)], split, base, -1);
                real* o = gx.data() + i * D + h * hd;
                for (int j = 0; j < hd; ++j) o[j] += tmp[static_cast<size_t>(j)];
            }
    });
}

// ---------------- conv / resample ----------------

namespace {

struct Conv2dDims {
    int64_t N, Ci, H, W, Co, kh, kw, Ho, Wo;
    int s, p;
};

Conv2dDims conv2d_dims(const Tensor& X, const Tensor& W_, int stride, int pad) {
    if (X.rank() != 4 || W_.rank() != 4 || X.dim(1) != W_.dim(1))
        throw DimensionError("conv2d: x " + X.shape_str() + " vs w " + W_.shape_str());
    Conv2dDims d;
    d.N = X.dim(0); d.Ci = X.dim(1); d.H = X.dim(2); d.W = X.dim(3);
    d.Co = W_.dim(0); d.kh = W_.dim(2); d.kw = W_.dim(3);
    d.s = stride; d.p = pad;
    d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
    if (d.Ho < 1 || d.Wo < 1) throw DimensionError("conv2d: output would be empty");
    return d;
}

// bounds of output coord o so that i = o*s - p + k lies in [0, limit)
inline void conv_bounds(int64_t limit, int64_t out_limit, int s, int p, int64_t k, int64_t& lo, int64_t& hi) {
    lo = std::max<int64_t>(0, ceil_div(p - k, s));
    hi = std::min<int64_t>(out_limit, ceil_div(limit + p - k, s));
}

}  // namespace

Var Tape::conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& X = val(x);
    const Tensor& W_ = val(w);
    const Tensor& B = val(b);
    Conv2dDims d = conv2d_dims(X, W_, stride, pad);
    if (B.numel() != d.Co) throw DimensionError("conv2d: bias size mismatch");
    Tensor y({d.N, d.Co, d.Ho, d.Wo});
    for (int64_t n = 0; n < d.N; ++n)
        for (int64_t co = 0; co < d.Co; ++co) {
            real* yc = y.data() + (n * d.Co + co) * d.Ho * d.Wo;
            real bv = B[co];
            for (int64_t i = 0; i < d.Ho * d.Wo; ++i) yc[i] = bv;
            for (int64_t ci = 0; ci < d.Ci; ++ci) {
                const real* xc = X.data() + (n * d.Ci + ci) * d.H * d.W;
                const real* wc = W_.data() + (co * d.Ci + ci) * d.kh * d.kw;
                for (int64_t ky = 0; ky < d.kh; ++ky)
                    for (int64_t kx = 0; kx < d.kw; ++kx) {
                        real wv = wc[ky * d.kw + kx];
                        int64_t ylo, yhi, xlo, xhi;
                        conv_bounds(d.H, d.Ho, d.s, d.p, ky, ylo, yhi);
                        conv_bounds(d.W, d.Wo, d.s, d.p, kx, xlo, xhi);
                        for (int64_t yo = ylo; yo < yhi; ++yo) {
                            const real* xr = xc + (yo * d.s - d.p + ky) * d.W - d.p + kx;
                            real* yr = yc + yo * d.Wo;
                            for (int64_t xo = xlo; xo < xhi; ++xo) yr[xo] += wv * xr[xo * d.s];
                        }
                    }
            }
        }
    bool rg = needs(x) || needs(w) || needs(b);
    return push(std::move(y), rg, [x, w, b, d](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& X2 = t.val(x);
        const Tensor& W2 = t.val(w);
        bool nx = t.needs(x), nw = t.needs(w), nb = t.needs(b);
        if (nb) {
            Tensor& gb = t.gbuf(b);
            for (int64_t n = 0; n < d.N; ++n)
                for (int64_t co = 0; co < d.Co; ++co) {
                    const real* gc = g.data() + (n * d.Co + co) * d.Ho * d.Wo;
                    real acc = 0.0;
                    for (int64_t i = 0; i < d.Ho * d.Wo; ++i) acc += gc[i];
                    gb[co] += acc;
                }
        }
        if (!nx && !nw) return;
        Tensor* gx = nx ? &t.gbuf(x) : nullptr;
        Tensor* gw = nw ? &t.gbuf(w) : nullptr;
        for (int64_t n = 0; n < d.N; ++n)
            for (int64_t co = 0; co < d.Co; ++co) {
                const real* gc = g.data() + (n * d.Co + co) * d.Ho * d.Wo;
                for (int64_t ci = 0; ci < d.Ci; ++ci) {
                    const real* xc = X2.data() + (n * d.Ci + ci) * d.H * d.W;
                    real* gxc = nx ? gx->data() + (n * d.Ci + ci) * d.H * d.W : nullptr;
                    const real* wc = W2.data() + (co * d.Ci + ci) * d.kh * d.kw;
                    real* gwc = nw ? gw->data() + (co * d.Ci + ci) * d.kh * d.kw : nullptr;
                    for (int64_t ky = 0; ky < d.kh; ++ky)
                        for (int64_t kx = 0; kx < d.kw; ++kx) {
                            real wv = wc[ky * d.kw + kx];
                            real wacc = 0.0;
                            int64_t ylo, yhi, xlo, xhi;
                            conv_bounds(d.H, d.Ho, d.s, d.p, ky, ylo, yhi);
                            conv_bounds(d.W, d.Wo, d.s, d.p, kx, xlo, xhi);
                            for (int64_t yo = ylo; yo < yhi; ++yo) {
                                int64_t xoff = (yo * d.s - d.p + ky) * d.W - d.p + kx;
                                const real* gr = gc + yo * d.Wo;
                                if (nx) {
                                    real* gxr = gxc + xoff;
                                    for (int64_t xo = xlo; xo < xhi; ++xo) gxr[xo * d.s] += wv * gr[xo];
                                }
                                if (nw) {
                                    const real* xr = xc + xoff;
                                    for (int64_t xo = xlo; xo < xhi; ++xo) wacc += gr[xo] * xr[xo * d.s];
                                }
                            }
                            if (nw) gwc[ky * d.kw + kx] += wacc;
                        }
                }
            }
    });
}

namespace {

struct Conv3dDims {
    int64_t Ci, T, H, W, Co, kt, kh, kw, To, Ho, Wo;
    std::array<int, 3> s, p;
};

Conv3dDims conv3d_dims(const Tensor& X, const Tensor& W_, std::array<int, 3> stride, std::array<int, 3> pad) {
    if (X.rank() != 4 || W_.rank() != 5 || X.dim(0) != W_.dim(1))
        throw DimensionError("conv3d: x " + X.shape_str() + " vs w " + W_.shape_str());
    Conv3dDims d;
    d.Ci = X.dim(0); d.T = X.dim(1); d.H = X.dim(2); d.W = X.dim(3);
    d.Co = W_.dim(0); d.kt = W_.dim(2); d.kh = W_.dim(3); d.kw = W_.dim(4);
    d.s = stride; d.p = pad;
    d.To = (d.T + 2 * pad[0] - d.kt) / stride[0] + 1;
    d.Ho = (d.H + 2 * pad[1] - d.kh) / stride[1] + 1;
    d.Wo = (d.W + 2 * pad[2] - d.kw) / stride[2] + 1;
    if (d.To < 1 || d.Ho < 1 || d.Wo < 1) throw DimensionError("conv3d: output would be empty");
    return d;
}

}  // namespace

Var Tape::conv3d(Var x, Var w, Var b, std::array<int, 3> stride, std::array<int, 3> pad) {
    const Tensor& X = val(x);
    const Tensor& W_ = val(w);
    const Tensor& B = val(b);
    Conv3dDims d = conv3d_dims(X, W_, stride, pad);
    if (B.numel() != d.Co) throw DimensionError("conv3d: bias size mismatch");
    Tensor y({d.Co, d.To, d.Ho, d.Wo});
    for (int64_t co = 0; co < d.Co; ++co) {
        real* yc = y.data() + co * d.To * d.Ho * d.Wo;
        real bv = B[co];
        for (int64_t i = 0; i < d.To * d.Ho * d.Wo; ++i) yc[i] = bv;
        for (int64_t ci = 0; ci < d.Ci; ++ci) {
            const real* xc = X.data() + ci * d.T * d.H * d.W;
            const real* wc = W_.data() + (co * d.Ci + ci) * d.kt * d.kh * d.kw;
            for (int64_t kt = 0; kt < d.kt; ++kt)
                for (int64_t ky = 0; ky < d.kh; ++ky)
                    for (int64_t kx = 0; kx < d.kw; ++kx) {
                        real wv = wc[(kt * d.kh + ky) * d.kw + kx];
                        int64_t tlo, thi, ylo, yhi, xlo, xhi;
                        conv_bounds(d.T, d.To, d.s[0], d.p[0], kt, tlo, thi);
                        conv_bounds(d.H, d.Ho, d.s[1], d.p[1], ky, ylo, yhi);
                        conv_bounds(d.W, d.Wo, d.s[2], d.p[2], kx, xlo, xhi);
                        for (int64_t to = tlo; to < thi; ++to) {
                            int64_t ti = to * d.s[0] - d.p[0] + kt;
                            for (int64_t yo = ylo; yo < yhi; ++yo) {
                                const real* xr = xc + (ti * d.H + yo * d.s[1] - d.p[1] + ky) * d.W - d.p[2] + kx;
                                real* yr = yc + (to * d.Ho + yo) * d.Wo;
                                for (int64_t xo = xlo; xo < xhi; ++xo) yr[xo] += wv * xr[xo * d.s[2]];
                            }
                        }
                    }
        }
    }
    bool rg = needs(x) || needs(w) || needs(b);
    return push(std::move(y), rg, [x, w, b, d](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& X2 = t.val(x);
        const Tensor& W2 = t.val(w);
        bool nx = t.needs(x), nw = t.needs(w), nb = t.needs(b);
        if (nb) {
            Tensor& gb = t.gbuf(b);
            for (int64_t co = 0; co < d.Co; ++co) {
                const real* gc = g.data() + co * d.To * d.Ho * d.Wo;
                real acc = 0.0;
                for (int64_t i = 0; i < d.To * d.Ho * d.Wo; ++i) acc += gc[i];
                gb[co] += acc;
            }
        }
        if (!nx && !nw) return;
        Tensor* gx = nx ? &t.gbuf(x) : nullptr;
        Tensor* gw = nw ? &t.gbuf(w) : nullptr;
        for (int64_t co = 0; co < d.Co; ++co) {
            const real* gc = g.data() + co * d.To * d.Ho * d.Wo;
            for (int64_t ci = 0; ci < d.Ci; ++ci) {
                const real* xc = X2.data() + ci * d.T * d.H * d.W;
                real* gxc = nx ? gx->data() + ci * d.T * d.H * d.W : nullptr;
                const real* wc = W2.data() + (co * d.Ci + ci) * d.kt * d.kh * d.kw;
                real* gwc = nw ? gw->data() + (co * d.Ci + ci) * d.kt * d.kh * d.kw : nullptr;
                for (int64_t kt = 0; kt < d.kt; ++kt)
                    for (int64_t ky = 0; ky < d.kh; ++ky)
                        for (int64_t kx = 0; kx < d.kw; ++kx) {
                            real wv = wc[(kt * d.kh + ky) * d.kw + kx];
                            real wacc = 0.0;
                            int64_t tlo, thi, ylo, yhi, xlo, xhi;
                            conv_bounds(d.T, d.To, d.s[0], d.p[0], kt, tlo, thi);
                            conv_bounds(d.H, d.Ho, d.s[1], d.p[1], ky, ylo, yhi);
                            conv_bounds(d.W, d.Wo, d.s[2], d.p[2], kx, xlo, xhi);
                            for (int64_t to = tlo; to < thi; ++to) {
                                int64_t ti = to * d.s[0] - d.p[0] + kt;
                                for (int64_t yo = ylo; yo < yhi; ++yo) {
                                    int64_t xoff = (ti * d.H + yo * d.s[1] - d.p[1] + ky) * d.W - d.p[2] + kx;
                                    const real* gr = gc + (to * d.Ho + yo) * d.Wo;
                                    if (nx) {
                                        real* gxr = gxc + xoff;
                                        for (int64_t xo = xlo; xo < xhi; ++xo) gxr[xo * d.s[2]] += wv * gr[xo];
                                    }
                                    if (nw) {
                                        const real* xr = xc + xoff;
                                        for (int64_t xo = xlo; xo < xhi; ++xo) wacc += gr[xo] * xr[xo * d.s[2]];
                                    }
                                }
                            }
                            if (nw) gwc[(kt * d.kh + ky) * d.kw + kx] += wacc;
                        }
            }
        }
    });
}

Var Tape::upsample2x_hw(Var x) {
    const Tensor& X = val(x);
    if (X.rank() != 4) throw DimensionError("upsample2x_hw: need 4-d input");
    int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    Tensor y({N, C, 2 * H, 2 * W});
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const real* xp = X.data() + nc * H * W;
        real* yp = y.data() + nc * 4 * H * W;
        for (int64_t i = 0; i < 2 * H; ++i)
            for (int64_t j = 0; j < 2 * W; ++j) yp[i * 2 * W + j] = xp[(i / 2) * W + j / 2];
    }
    return push(std::move(y), needs(x), [x, N, C, H, W](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        Tensor& gx = t.gbuf(x);
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const real* gp = g.data() + nc * 4 * H * W;
            real* o = gx.data() + nc * H * W;
            for (int64_t i = 0; i < 2 * H; ++i)
                for (int64_t j = 0; j < 2 * W; ++j) o[(i / 2) * W + j / 2] += gp[i * 2 * W + j];
        }
    });
}

Var Tape::upsample2x_t(Var x) {
    const Tensor& X = val(x);
    if (X.rank() != 4) throw DimensionError("upsample2x_t: need 4-d input");
    int64_t C = X.dim(0), T = X.dim(1), HW = X.dim(2) * X.dim(3);
    Tensor y({C, 2 * T, X.dim(2), X.dim(3)});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t tt = 0; tt < 2 * T; ++tt)
            std::memcpy(y.data() + (c * 2 * T + tt) * HW, X.data() + (c * T + tt / 2) * HW,
                        sizeof(real) * static_cast<size_t>(HW));
    return push(std::move(y), needs(x), [x, C, T, HW](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        Tensor& gx = t.gbuf(x);
        for (int64_t c = 0; c < C; ++c)
            for (int64_t tt = 0; tt < 2 * T; ++tt) {
                const real* gp = g.data() + (c * 2 * T + tt) * HW;
                real* o = gx.data() + (c * T + tt / 2) * HW;
                for (int64_t i = 0; i < HW; ++i) o[i] += gp[i];
            }
    });
}

Var Tape::avgpool2x_hw(Var x) {
    const Tensor& X = val(x);
    if (X.rank() != 4 || X.dim(2) % 2 || X.dim(3) % 2)
        throw DimensionError("avgpool2x_hw: spatial dims must be even, got " + X.shape_str());
    int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    Tensor y({N, C, H / 2, W / 2});
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const real* xp = X.data() + nc * H * W;
        real* yp = y.data() + nc * (H / 2) * (W / 2);
        for (int64_t i = 0; i < H / 2; ++i)
            for (int64_t j = 0; j < W / 2; ++j)
                yp[i * (W / 2) + j] = 0.25 * (xp[2 * i * W + 2 * j] + xp[2 * i * W + 2 * j + 1] +
                                              xp[(2 * i + 1) * W + 2 * j] + xp[(2 * i + 1) * W + 2 * j + 1]);
    }
    return push(std::move(y), needs(x), [x, N, C, H, W](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        Tensor& gx = t.gbuf(x);
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const real* gp = g.data() + nc * (H / 2) * (W / 2);
            real* o = gx.data() + nc * H * W;
            for (int64_t i = 0; i < H / 2; ++i)
                for (int64_t j = 0; j < W / 2; ++j) {
                    real v = 0.25 * gp[i * (W / 2) + j];
                    o[2 * i * W + 2 * j] += v;
                    o[2 * i * W + 2 * j + 1] += v;
                    o[(2 * i + 1) * W + 2 * j] += v;
                    o[(2 * i + 1) * W + 2 * j + 1] += v;
                }
        }
    });
}

Var Tape::grad_mag(Var x, real eps) {
    const Tensor& X = val(x);
    if (X.rank() != 4) throw DimensionError("grad_mag: need 4-d input");
    int64_t NC = X.dim(0) * X.dim(1), H = X.dim(2), W = X.dim(3);
    Tensor y(X.shape());
    for (int64_t nc = 0; nc < NC; ++nc) {
        const real* xp = X.data() + nc * H * W;
        real* yp = y.data() + nc * H * W;
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j) {
                real gx = (j + 1 < W) ? xp[i * W + j + 1] - xp[i * W + j] : 0.0;
                real gy = (i + 1 < H) ? xp[(i + 1) * W + j] - xp[i * W + j] : 0.0;
                yp[i * W + j] = std::sqrt(gx * gx + gy * gy + eps);
            }
    }
    return push(std::move(y), needs(x), [x, NC, H, W](Tape& t, Var self) {
        const Tensor& g = t.nodes_[self.i].grad;
        const Tensor& Y = t.nodes_[self.i].val;
        const Tensor& X2 = t.val(x);
        Tensor& gxb = t.gbuf(x);
        for (int64_t nc = 0; nc < NC; ++nc) {
            const real* xp = X2.data() + nc * H * W;
            const real* yp = Y.data() + nc * H * W;
            const real* gp = g.data() + nc * H * W;
            real* o = gxb.data() + nc * H * W;
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j) {
                    real coef = gp[i * W + j] / yp[i * W + j];
                    if (j + 1 < W) {
                        real gx = xp[i * W + j + 1] - xp[i * W + j];
                        o[i * W + j + 1] += coef * gx;
                        o[i * W + j] -= coef * gx;
                    }
                    if (i + 1 < H) {
                        real gy = xp[(i + 1) * W + j] - xp[i * W + j];
                        o[(i + 1) * W + j] += coef * gy;
                        o[i * W + j] -= coef * gy;
                    }
                }
        }
    });
}

}  // namespace mugv
