#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "hrtse/tensor.hpp"

namespace hrtse::ad {

// Reverse-mode tape over Tensor. Each op builds a Node whose closure knows
// how to push cotangents into its parents. Graphs are DAGs held together by
// shared_ptr parents; backward() walks a topological order and then severs
// the edges so teardown never recurses deeply.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Node();
    ~Node();
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool has_grad = false;
    std::string name;  // set for parameters, useful in error messages
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;

    void accumulate(const Tensor& g);
    void zero_grad();
};

Var leaf(Tensor value, bool requires_grad = false);
Var constant(Tensor value);

// Inference toggle: while disabled, ops produce value-only nodes.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};

// Seeds d(root)/d(root) = 1 (root must be scalar), runs the tape backward,
// then clears edges/closures. Gradients stay on the leaves.
void backward(const Var& root);

// ---- arithmetic ---------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);
Var mul_const(const Var& a, const Tensor& c);  // elementwise, c not tracked
Var add_const(const Var& a, const Tensor& c);

// Broadcast helpers. x is treated as [rows, C] with C = v.numel().
Var add_bias(const Var& x, const Var& b);
Var rowwise_mul(const Var& x, const Var& v);  // out(r, c) = x(r, c) * v(c)

// x [C, ...]: multiplies everything in channel c by v(c).
Var colwise_mul(const Var& x, const Var& v);

// ---- shape ----------------------------------------------------------------
Var reshape(const Var& a, std::vector<int> shape);
Var transpose(const Var& a);                       // 2-d
Var permute3(const Var& a, int p0, int p1, int p2);// 3-d, materializing
Var concat(const std::vector<Var>& xs, int axis);
Var slice(const Var& a, int axis, int start, int len);
Var tile_time3(const Var& a, int T);  // [C, F] -> [C, T, F] by repetition

// ---- reductions -------------------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_axis(const Var& a, int axis);
Var mean_axis(const Var& a, int axis);

// ---- nonlinearities ------------------------------------------------------
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh_(const Var& a);
Var sqrt_(const Var& a);        // input must stay positive
Var square(const Var& a);
Var log_(const Var& a);         // input must stay positive
Var pow_const(const Var& a, double e);  // input must stay positive
Var softmax_lastdim(const Var& a);
Var prelu(const Var& x, const Var& alpha);  // alpha per channel (axis 0)
Var l2_normalize_rows(const Var& x, double eps = 1e-8);

// ---- linear algebra -------------------------------------------------------
Var matmul(const Var& a, const Var& b);            // [n,k] x [k,m]
Var matmul_const(const Var& a, const Tensor& b);   // b untracked
Var bmm(const Var& a, const Var& b);               // [N,p,q] x [N,q,r]

// ---- normalization -------------------------------------------------------
Var layernorm_lastdim(const Var& x, const Var& gamma, const Var& beta,
                      double eps = 1e-5);
// Normalizes each channel (axis 0) over all remaining positions.
Var channel_norm(const Var& x, const Var& gamma, const Var& beta,
                 double eps = 1e-5);

// ---- recurrent ------------------------------------------------------------
// x [S,B,I], wx [I,4H], wh [H,4H], b [4H] -> h [S,B,H]. Gate order i,f,g,o.
Var lstm(const Var& x, const Var& wx, const Var& wh, const Var& b,
         bool reverse);

// ---- convolution -----------------------------------------------------------
// x [Cin,T], w [Cout,Cin,K], b [Cout]; same-size output via zero padding.
Var conv1d(const Var& x, const Var& w, const Var& b, int dilation = 1);

// x [Cin,T,F], w [Cout,Cin,3,3]: stride 1 over time (zero pad 1) and
// stride 2 over frequency (no pad): F' = (F - 3) / 2 + 1.
Var conv2d_down(const Var& x, const Var& w, const Var& b);

// x [Cin,T,F], w [Cin,Cout,3,3]: transposed counterpart of conv2d_down,
// F' = (F - 1) * 2 + 3 + out_pad.
Var conv_transpose2d_up(const Var& x, const Var& w, const Var& b, int out_pad);

// ---- framing ----------------------------------------------------------------
// x [N] -> [T, win] with hop spacing; adjoint pair of each other.
Var gather_frames(const Var& x, int win, int hop);
Var overlap_add(const Var& frames, int hop, int out_len);

// ---- classification head ---------------------------------------------
// Mean cross entropy over rows of logits [B, K] against integer targets.
Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets);

// Number of nodes currently alive (leak checks in tests).
int64_t live_nodes();

}  // namespace hrtse::ad
