#pragma once
#include <functional>
#include <memory>
#include <vector>

#include "glesam/tensor.hpp"

namespace glesam::ad {

// Reverse-mode autodiff over Tensor values. Each op returns a new graph node
// holding the forward result and a closure that scatters the node's gradient
// into its parents. backward() walks the DAG once in reverse topological
// order. The graph is rebuilt every step (define-by-run); parameter leaves are
// long-lived and accumulate gradients until cleared.

struct Node;
using Value = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // sized on first accumulation
    bool requires_grad = false;
    std::vector<Value> parents;
    std::function<void(Node&)> back;

    bool has_grad() const { return !grad.data.empty(); }
};

Value leaf(Tensor v, bool requires_grad = false);
Value constant(Tensor v);

// Accumulate into n's gradient buffer, sizing it on first use.
void accumulate(Node& n, const Tensor& g);

// Scoped "inference mode": while alive, ops produce constants with no graph
// edges, so eval loops don't build throwaway closures.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};
bool grad_enabled();

// root must be a scalar (numel 1).
void backward(const Value& root);

// ---- elementwise (broadcasting where binary) ----
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value div(Value a, Value b);
Value scale(Value a, double c);
Value add_const(Value a, double c);
Value relu(Value a);
Value silu(Value a);
Value sigmoid(Value a);
Value exp(Value a);
Value log(Value a);
Value sqrt(Value a);
Value sin(Value a);
Value cos(Value a);
Value clamp_min(Value a, double c);

// ---- shape ----
Value reshape(Value a, std::vector<int> shape);
Value broadcast_to(Value a, std::vector<int> shape);
Value concat(Value a, Value b, int dim);
// (B,N,C) -> (B,C): pick one row of every batch item.
Value select_row(Value a, int row);
// (B,C,H,W) <-> (B,H*W,C)
Value bchw_to_bnc(Value a);
Value bnc_to_bchw(Value a, int h, int w);
Value upsample_nearest2x(Value a);

// ---- reductions ----
Value sum_all(Value a);
Value mean_all(Value a);
Value sum_lastdim(Value a);           // (..., N) -> (...)
Value sum_hw(Value a);                // (B,C,H,W) -> (B,C)

// ---- linear algebra ----
Value matmul(Value a, Value b, bool trans_a = false, bool trans_b = false);
Value bmm(Value a, Value b, bool trans_a = false, bool trans_b = false);
// x: (N,Din) or (B,N,Din); w: (Dout,Din); b: (Dout) or null.
Value linear(Value x, Value w, Value b);

// ---- neural-net ops ----
// x: (B,Cin,H,W); w: (Cout,Cin/groups,kh,kw); b: (Cout) or null.
Value conv2d(Value x, Value w, Value b, int stride, int pad, int groups = 1);
// x: (B,Cin,H,W); w: (Cin,Cout,kh,kw); b: (Cout) or null.
Value conv_transpose2d(Value x, Value w, Value b, int stride, int pad);
// x: (B,C,H,W); gamma,beta: (C).
Value group_norm(Value x, Value gamma, Value beta, int groups, double eps = 1e-5);
Value softmax_lastdim(Value a);       // rows over the last dim
Value softmax_hw(Value a);            // (B,C,H,W) normalized over H*W per (b,c)
// 2-D discrete-Fourier amplitude per channel plane, unnormalized convention
// (DC bin of a constant plane c equals |c|*H*W).
Value dft_amplitude(Value a);

}  // namespace glesam::ad
