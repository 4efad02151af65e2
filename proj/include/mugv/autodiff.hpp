#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "mugv/tensor.hpp"

namespace mugv {

// Handle into a Tape.
struct Var {
    int i = -1;
    bool valid() const { return i >= 0; }
};

// Reverse-mode autodiff over a dynamically built op tape. Values are computed
// eagerly; backward() walks the tape in reverse and accumulates gradients for
// every node created with requires_grad (and everything downstream of one).
//
// Reductions and accumulations are plain sequential loops, so gradients are
// bit-reproducible across runs.
class Tape {
public:
    Var leaf(Tensor v, bool requires_grad = false);
    Var constant(Tensor v) { return leaf(std::move(v), false); }

    const Tensor& val(Var v) const { return nodes_[check(v)].val; }
    // Gradient of the last backward() target w.r.t. v. Zero tensor if v was
    // never reached.
    const Tensor& grad(Var v);

    void backward(Var loss);

    size_t size() const { return nodes_.size(); }

    // ---- elementwise (same shape) ----
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var neg(Var a);
    Var scale(Var a, real c);
    Var add_scalar(Var a, real c);
    Var square(Var a);
    Var sqrt_(Var a);
    Var exp_(Var a);
    Var log_(Var a);
    Var abs_(Var a);
    Var relu(Var a);
    Var leaky_relu(Var a, real slope);
    Var silu(Var a);
    Var sigmoid_(Var a);
    Var softplus(Var a);
    Var tanh_(Var a);

    // ---- broadcasts ----
    // x (N, D) + b (D), row-broadcast
    Var add_bias(Var x, Var b);
    // x (N, D) * g (D)
    Var mul_gain(Var x, Var g);
    // x (N, heads*hd): head slice h scaled by s[h]
    Var mul_head_scalar(Var x, Var s, int heads);
    // x (T, C, H, W) * w (T, 1, H, W), broadcast over channels
    Var mul_chan_bcast(Var x, Var w);

    // ---- reductions ----
    Var sum_all(Var a);
    Var mean_all(Var a);
    // a (N, D): mean over elements of rows with mask != 0; no rows -> 0 with
    // zero gradient
    Var masked_mean(Var a, std::vector<uint8_t> row_mask);

    // ---- matmul ----
    Var matmul(Var a, Var b);     // (m,k) x (k,n) -> (m,n)
    Var matmul_nt(Var a, Var b);  // (m,k) x (n,k)^T -> (m,n)

    // ---- shape ----
    Var reshape(Var a, std::vector<int64_t> shape);
    // stack along axis 0; trailing dims must agree
    Var concat0(const std::vector<Var>& parts);
    // out[i] = a[index[i]]; index need not be a permutation (backward scatter-adds)
    Var rearrange(Var a, std::shared_ptr<const std::vector<int64_t>> index, std::vector<int64_t> out_shape);
    Var permute(Var a, const std::vector<int>& perm);
    Var slice_cols(Var a, int64_t start, int64_t count);            // a (N, D)
    Var slice_flat(Var a, int64_t start, std::vector<int64_t> out_shape);
    Var select_rows(Var table, std::vector<int64_t> ids);           // (V, D) -> (L, D)
    // rows with mask != 0 replaced by the constant replacement rows
    Var replace_rows(Var x, std::vector<uint8_t> row_mask, Tensor replacement);

    // ---- normalisation ----
    Var rmsnorm_rows(Var x, real eps);             // x / sqrt(mean(x^2) + eps) per row
    Var l2norm_heads(Var x, int heads, real eps);  // head slice / sqrt(sum(x^2) + eps)

    // ---- attention ----
    // q (Nq, H*hd), k/v (Nk, H*hd). Per head: softmax(q_h k_h^T) v_h.
    // Logits are raw dot products; callers fold any scaling into q beforehand.
    Var mha(Var q, Var k, Var v, int heads);

    // ---- rotary embedding ----
    // Per head, the (dt, dh, dw) slices rotate by the token's t/h/w coordinate.
    Var rope3d(Var x, std::shared_ptr<const std::vector<std::array<int, 3>>> coords, std::array<int, 3> split,
               int heads, real base = 10000.0);

    // ---- conv / resample ----
    Var conv2d(Var x, Var w, Var b, int stride, int pad);  // x (N,C,H,W), w (Co,Ci,kh,kw)
    Var conv3d(Var x, Var w, Var b, std::array<int, 3> stride, std::array<int, 3> pad);  // x (C,T,H,W)
    Var upsample2x_hw(Var x);  // (N,C,H,W) -> (N,C,2H,2W)
    Var upsample2x_t(Var x);   // (C,T,H,W) -> (C,2T,H,W)
    Var avgpool2x_hw(Var x);   // (N,C,H,W) -> (N,C,H/2,W/2); H, W even
    // forward-difference gradient magnitude sqrt(gx^2+gy^2+eps), (N,C,H,W)
    Var grad_mag(Var x, real eps = 1e-12);

private:
    struct Node {
        Tensor val;
        Tensor grad;  // allocated lazily
        bool requires_grad = false;
        std::function<void(Tape&, Var)> back;
    };

    std::vector<Node> nodes_;

    int check(Var v) const {
        if (!v.valid() || v.i >= static_cast<int>(nodes_.size())) throw InputError("invalid tape var");
        return v.i;
    }
    bool needs(Var v) const { return nodes_[check(v)].requires_grad; }
    Var push(Tensor val, bool requires_grad, std::function<void(Tape&, Var)> back);
    Tensor& gbuf(Var v);
    bool has_grad(Var v) const { return !nodes_[v.i].grad.empty(); }

    friend struct TapeOps;
};

}  // namespace mugv
