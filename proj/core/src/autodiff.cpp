#include "glesam/autodiff.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <unordered_set>

namespace glesam::ad {

namespace {
thread_local bool g_grad_enabled = true;

Value make_node(Tensor v, std::vector<Value> parents, std::function<void(Node&)> back) {
    bool need = false;
    if (g_grad_enabled)
        for (const Value& p : parents)
            if (p && p->requires_grad) need = true;
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    if (need) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->back = std::move(back);
    }
    return n;
}

void check(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}
}  // namespace

Value leaf(Tensor v, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = requires_grad && g_grad_enabled;
    return n;
}

Value constant(Tensor v) { return leaf(std::move(v), false); }

void accumulate(Node& n, const Tensor& g) {
    if (!n.has_grad()) n.grad = Tensor::zeros(n.val.shape);
    n.grad += g;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Value& root) {
    check(root && root->val.numel() == 1, "backward: root must be a scalar");
    if (!root->requires_grad) return;
    // Iterative post-order DFS for a reverse topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        bool descended = false;
        while (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
                descended = true;
                break;
            }
        }
        if (descended) continue;
        order.push_back(n);
        stack.pop_back();
    }
    root->grad = Tensor::full(root->val.shape, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->back && n->has_grad()) n->back(*n);
    }
}

// ---- elementwise ----

namespace {
Value binary_bc(Value a, Value b, double (*fwd)(double, double),
                // dfa/dfb produce the local partials given (x, y, out_grad)
                double (*dfa)(double, double, double), double (*dfb)(double, double, double)) {
    Tensor out = bc_binary(a->val, b->val, fwd);
    return make_node(out, {a, b}, [a, b, dfa, dfb](Node& self) {
        if (a->requires_grad) {
            Tensor ga(self.grad.shape);
            Tensor lhs_b = bc_binary(a->val, b->val, +[](double x, double) { return x; });
            Tensor rhs_b = bc_binary(a->val, b->val, +[](double, double y) { return y; });
            for (size_t i = 0; i < ga.data.size(); ++i)
                ga.data[i] = dfa(lhs_b.data[i], rhs_b.data[i], self.grad.data[i]);
            accumulate(*a, reduce_to_shape(ga, a->val.shape));
        }
        if (b->requires_grad) {
            Tensor gb(self.grad.shape);
            Tensor lhs_b = bc_binary(a->val, b->val, +[](double x, double) { return x; });
            Tensor rhs_b = bc_binary(a->val, b->val, +[](double, double y) { return y; });
            for (size_t i = 0; i < gb.data.size(); ++i)
                gb.data[i] = dfb(lhs_b.data[i], rhs_b.data[i], self.grad.data[i]);
            accumulate(*b, reduce_to_shape(gb, b->val.shape));
        }
    });
}

Value unary(Value a, const std::function<double(double)>& fwd,
            const std::function<double(double, double)>& dfdx /* (x, y) -> df/dx */) {
    Tensor out = map(a->val, fwd);
    Tensor saved_y = out;
    return make_node(out, {a}, [a, dfdx, saved_y](Node& self) {
        if (!a->requires_grad) return;
        Tensor g(a->val.shape);
        for (size_t i = 0; i < g.data.size(); ++i)
            g.data[i] = self.grad.data[i] * dfdx(a->val.data[i], saved_y.data[i]);
        accumulate(*a, g);
    });
}
}  // namespace

Value add(Value a, Value b) {
    return binary_bc(
        a, b, +[](double x, double y) { return x + y; },
        +[](double, double, double g) { return g; }, +[](double, double, double g) { return g; });
}
Value sub(Value a, Value b) {
    return binary_bc(
        a, b, +[](double x, double y) { return x - y; },
        +[](double, double, double g) { return g; }, +[](double, double, double g) { return -g; });
}
Value mul(Value a, Value b) {
    return binary_bc(
        a, b, +[](double x, double y) { return x * y; },
        +[](double, double y, double g) { return g * y; },
        +[](double x, double, double g) { return g * x; });
}
Value div(Value a, Value b) {
    return binary_bc(
        a, b, +[](double x, double y) { return x / y; },
        +[](double, double y, double g) { return g / y; },
        +[](double x, double y, double g) { return -g * x / (y * y); });
}

Value scale(Value a, double c) {
    return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}
Value add_const(Value a, double c) {
    return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
Value relu(Value a) {
    return unary(a, [](double x) { return x > 0 ? x : 0.0; },
                 [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
Value silu(Value a) {
    return unary(a, [](double x) { return x / (1.0 + std::exp(-x)); },
                 [](double x, double) {
                     double s = 1.0 / (1.0 + std::exp(-x));
                     return s * (1.0 + x * (1.0 - s));
                 });
}
Value sigmoid(Value a) {
    return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                 [](double, double y) { return y * (1.0 - y); });
}
Value exp(Value a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
Value log(Value a) {
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
Value sqrt(Value a) {
    return unary(a, [](double x) { return std::sqrt(x); },
                 [](double, double y) { return 0.5 / y; });
}
Value sin(Value a) {
    return unary(a, [](double x) { return std::sin(x); },
                 [](double x, double) { return std::cos(x); });
}
Value cos(Value a) {
    return unary(a, [](double x) { return std::cos(x); },
                 [](double x, double) { return -std::sin(x); });
}
Value clamp_min(Value a, double c) {
    return unary(a, [c](double x) { return x < c ? c : x; },
                 [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

// ---- shape ----

Value reshape(Value a, std::vector<int> shape) {
    check(numel_of(shape) == a->val.numel(), "reshape: element count mismatch");
    Tensor out = a->val.reshaped(shape);
    return make_node(out, {a}, [a](Node& self) {
        if (a->requires_grad) accumulate(*a, self.grad.reshaped(a->val.shape));
    });
}

Value broadcast_to(Value a, std::vector<int> shape) {
    Tensor z = Tensor::zeros(shape);
    Tensor out = bc_binary(a->val, z, +[](double x, double) { return x; });
    check(out.shape == shape, "broadcast_to: shape not reachable by broadcast");
    return make_node(out, {a}, [a](Node& self) {
        if (a->requires_grad) accumulate(*a, reduce_to_shape(self.grad, a->val.shape));
    });
}

Value concat(Value a, Value b, int dim) {
    const Tensor &A = a->val, &B = b->val;
    check(A.ndim() == B.ndim(), "concat: rank mismatch");
    check(dim >= 0 && dim < A.ndim(), "concat: bad dim");
    for (int i = 0; i < A.ndim(); ++i)
        if (i != dim) check(A.shape[size_t(i)] == B.shape[size_t(i)], "concat: shape mismatch");
    std::vector<int> os = A.shape;
    os[size_t(dim)] += B.shape[size_t(dim)];
    // outer = product of dims before `dim`; inner = product after.
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < dim; ++i) outer *= A.shape[size_t(i)];
    for (int i = dim + 1; i < A.ndim(); ++i) inner *= A.shape[size_t(i)];
    int64_t ca = A.shape[size_t(dim)] * inner, cb = B.shape[size_t(dim)] * inner;
    Tensor out(os);
    for (int64_t o = 0; o < outer; ++o) {
        std::copy_n(A.data.data() + o * ca, ca, out.data.data() + o * (ca + cb));
        std::copy_n(B.data.data() + o * cb, cb, out.data.data() + o * (ca + cb) + ca);
    }
    return make_node(out, {a, b}, [a, b, outer, ca, cb](Node& self) {
        if (a->requires_grad) {
            Tensor g(a->val.shape);
            for (int64_t o = 0; o < outer; ++o)
                std::copy_n(self.grad.data.data() + o * (ca + cb), ca, g.data.data() + o * ca);
            accumulate(*a, g);
        }
        if (b->requires_grad) {
            Tensor g(b->val.shape);
            for (int64_t o = 0; o < outer; ++o)
                std::copy_n(self.grad.data.data() + o * (ca + cb) + ca, cb, g.data.data() + o * cb);
            accumulate(*b, g);
        }
    });
}

Value select_row(Value a, int row) {
    check(a->val.ndim() == 3, "select_row: (B,N,C) required");
    int B = a->val.shape[0], N = a->val.shape[1], C = a->val.shape[2];
    check(row >= 0 && row < N, "select_row: row out of range");
    Tensor out({B, C});
    for (int i = 0; i < B; ++i)
        std::copy_n(a->val.data.data() + (int64_t(i) * N + row) * C, C,
                    out.data.data() + int64_t(i) * C);
    return make_node(out, {a}, [a, row, B, N, C](Node& self) {
        if (!a->requires_grad) return;
        Tensor g(a->val.shape);
        for (int i = 0; i < B; ++i)
            std::copy_n(self.grad.data.data() + int64_t(i) * C, C,
                        g.data.data() + (int64_t(i) * N + row) * C);
        accumulate(*a, g);
    });
}

Value bchw_to_bnc(Value a) {
    check(a->val.ndim() == 4, "bchw_to_bnc: rank-4 required");
    int B = a->val.shape[0], C = a->val.shape[1], H = a->val.shape[2], W = a->val.shape[3];
    int N = H * W;
    Tensor out({B, N, C});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* src = a->val.data.data() + (int64_t(b) * C + c) * N;
            double* dst = out.data.data() + int64_t(b) * N * C + c;
            for (int n = 0; n < N; ++n) dst[int64_t(n) * C] = src[n];
        }
    return make_node(out, {a}, [a, B, C, N](Node& self) {
        if (!a->requires_grad) return;
        Tensor g(a->val.shape);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                double* dst = g.data.data() + (int64_t(b) * C + c) * N;
                const double* src = self.grad.data.data() + int64_t(b) * N * C + c;
                for (int n = 0; n < N; ++n) dst[n] = src[int64_t(n) * C];
            }
        accumulate(*a, g);
    });
}

Value bnc_to_bchw(Value a, int h, int w) {
    check(a->val.ndim() == 3, "bnc_to_bchw: rank-3 required");
    int B = a->val.shape[0], N = a->val.shape[1], C = a->val.shape[2];
    check(N == h * w, "bnc_to_bchw: N != h*w");
    Tensor out({B, C, h, w});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            double* dst = out.data.data() + (int64_t(b) * C + c) * N;
            const double* src = a->val.data.data() + int64_t(b) * N * C + c;
            for (int n = 0; n < N; ++n) dst[n] = src[int64_t(n) * C];
        }
    return make_node(out, {a}, [a, B, C, N](Node& self) {
        if (!a->requires_grad) return;
        Tensor g(a->val.shape);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const double* src = self.grad.data.data() + (int64_t(b) * C + c) * N;
                double* dst = g.data.data() + int64_t(b) * N * C + c;
                for (int n = 0; n < N; ++n) dst[int64_t(n) * C] = src[n];
            }
        accumulate(*a, g);
    });
}

Value upsample_nearest2x(Value a) {
    check(a->val.ndim() == 4, "upsample_nearest2x: rank-4 required");
    int B = a->val.shape[0], C = a->val.shape[1], H = a->val.shape[2], W = a->val.shape[3];
    Tensor out({B, C, 2 * H, 2 * W});
    for (int bc = 0; bc < B * C; ++bc) {
        const double* src = a->val.data.data() + int64_t(bc) * H * W;
        double* dst = out.data.data() + int64_t(bc) * 4 * H * W;
        for (int y = 0; y < 2 * H; ++y)
            for (int x = 0; x < 2 * W; ++x) dst[int64_t(y) * 2 * W + x] = src[int64_t(y / 2) * W + x / 2];
    }
    return make_node(out, {a}, [a, B, C, H, W](Node& self) {
        if (!a->requires_grad) return;
        Tensor g(a->val.shape);
        for (int bc = 0; bc < B * C; ++bc) {
            double* dst = g.data.data() + int64_t(bc) * H * W;
            const double* src = self.grad.data.data() + int64_t(bc) * 4 * H * W;
            for (int y = 0; y < 2 * H; ++y)
                for (int x = 0; x < 2 * W; ++x) dst[int64_t(y / 2) * W + x / 2] += src[int64_t(y) * 2 * W + x];
        }
        accumulate(*a, g);
    });
}

// ---- reductions ----

Value sum_all(Value a) {
    Tensor out = Tensor::scalar(a->val.sum());
    return make_node(out, {a}, [a](Node& self) {
        if (!a->requires_grad) return;
        accumulate(*a, Tensor::full(a->val.shape, self.grad.data[0]));
    });
}

Value mean_all(Value a) {
    double n = double(a->val.numel());
    Tensor out = Tensor::scalar(a->val.sum() / n);
    return make_node(out, {a}, [a, n](Node& self) {
        if (!a->requires_grad) return;
        accumulate(*a, Tensor::full(a->val.shape, self.grad.data[0] / n));
    });
}

Value sum_lastdim(Value a) {
    check(a->val.ndim() >= 1, "sum_lastdim: rank >= 1 required");
    int N = a->val.shape.back();
    std::vector<int> os(a->val.shape.begin(), a->val.shape.end() - 1);
    if (os.empty()) os = {1};
    Tensor out(os);
    int64_t rows = out.numel();
    for (int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int i = 0; i < N; ++i) s += a->val.data[size_t(r * N + i)];
        out.data[size_t(r)] = s;
    }
    return make_node(out, {a}, [a, rows, N](Node& self) {
        if (!a->requires_grad) return;
        Tensor g(a->val.shape);
        for (int64_t r = 0; r < rows; ++r)
            for (int i = 0; i < N; ++i) g.data[size_t(r * N + i)] = self.grad.data[size_t(r)];
        accumulate(*a, g);
    });
}

Value sum_hw(Value a) {
    check(a->val.ndim() == 4, "sum_hw: rank-4 required");
    int B = a->val.shape[0], C = a->val.shape[1];
    int64_t HW = int64_t(a->val.shape[2]) * a->val.shape[3];
    Tensor out({B, C});
    for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
        double s = 0.0;
        const double* src = a->val.data.data() + bc * HW;
        for (int64_t i = 0; i < HW; ++i) s += src[i];
        out.data[size_t(bc)] = s;
    }
    return make_node(out, {a, }, [a, B, C, HW](Node& self) {
        if (!a->requires_grad) return;
        Tensor g(a->val.shape);
        for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
            double gv = self.grad.data[size_t(bc)];
            double* dst = g.data.data() + bc * HW;
            for (int64_t i = 0; i < HW; ++i) dst[i] = gv;
        }
        accumulate(*a, g);
    });
}

// ---- linear algebra ----

Value matmul(Value a, Value b, bool trans_a, bool trans_b) {
    Tensor out = glesam::matmul(a->val, b->val, trans_a, trans_b);
    return make_node(out, {a, b}, [a, b, trans_a, trans_b](Node& self) {
        const Tensor& g = self.grad;
        if (a->requires_grad) {
            Tensor ga = !trans_a ? glesam::matmul(g, b->val, false, !trans_b)
                                 : glesam::matmul(b->val, g, trans_b, true);
            accumulate(*a, ga);
        }
        if (b->requires_grad) {
            Tensor gb = !trans_b ? glesam::matmul(a->val, g, !trans_a, false)
                                 : glesam::matmul(g, a->val, true, trans_a);
            accumulate(*b, gb);
        }
    });
}

Value bmm(Value a, Value b, bool trans_a, bool trans_b) {
    Tensor out = glesam::bmm(a->val, b->val, trans_a, trans_b);
    return make_node(out, {a, b}, [a, b, trans_a, trans_b](Node& self) {
        int B = a->val.shape[0];
        bool b_batched = b->val.ndim() == 3;
        int ar = a->val.shape[1], ac = a->val.shape[2];
        int br = b_batched ? b->val.shape[1] : b->val.shape[0];
        int bc = b_batched ? b->val.shape[2] : b->val.shape[1];
        int gm = self.grad.shape[1], gn = self.grad.shape[2];
        auto slice = [](const Tensor& t, int i, int r, int c) {
            Tensor s({r, c});
            std::copy_n(t.data.data() + int64_t(i) * r * c, int64_t(r) * c, s.data.data());
            return s;
        };
        Tensor ga(a->val.shape);
        Tensor gb(b->val.shape);
        if (!b_batched) gb.fill(0.0);
        for (int i = 0; i < B; ++i) {
            Tensor gi = slice(self.grad, i, gm, gn);
            Tensor ai = slice(a->val, i, ar, ac);
            Tensor bi = b_batched ? slice(b->val, i, br, bc) : b->val;
            if (a->requires_grad) {
                Tensor gai = !trans_a ? glesam::matmul(gi, bi, false, !trans_b)
                                      : glesam::matmul(bi, gi, trans_b, true);
                std::copy_n(gai.data.data(), int64_t(ar) * ac, ga.data.data() + int64_t(i) * ar * ac);
            }
            if (b->requires_grad) {
                Tensor gbi = !trans_b ? glesam::matmul(ai, gi, !trans_a, false)
                                      : glesam::matmul(gi, ai, true, trans_a);
                if (b_batched)
                    std::copy_n(gbi.data.data(), int64_t(br) * bc,
                                gb.data.data() + int64_t(i) * br * bc);
                else
                    gb += gbi;
            }
        }
        if (a->requires_grad) accumulate(*a, ga);
        if (b->requires_grad) accumulate(*b, gb);
    });
}

Value linear(Value x, Value w, Value b) {
    const Tensor& X = x->val;
    check(X.ndim() == 2 || X.ndim() == 3, "linear: x rank 2 or 3");
    check(w->val.ndim() == 2, "linear: w rank 2");
    int Din = w->val.shape[1], Dout = w->val.shape[0];
    check(X.shape.back() == Din, "linear: feature dim mismatch");
    int64_t rows = X.numel() / Din;
    Tensor Xf = X.reshaped({int(rows), Din});
    Tensor out = glesam::matmul(Xf, w->val, false, true);  // (rows, Dout)
    if (b) {
        check(b->val.ndim() == 1 && b->val.shape[0] == Dout, "linear: bias shape");
        for (int64_t r = 0; r < rows; ++r)
            for (int d = 0; d < Dout; ++d) out.data[size_t(r * Dout + d)] += b->val.data[size_t(d)];
    }
    std::vector<int> os = X.shape;
    os.back() = Dout;
    out.shape = os;
    std::vector<Value> parents = b ? std::vector<Value>{x, w, b} : std::vector<Value>{x, w};
    return make_node(out, parents, [x, w, b, rows, Din, Dout](Node& self) {
        Tensor gf = self.grad.reshaped({int(rows), Dout});
        if (x->requires_grad) {
            Tensor gx = glesam::matmul(gf, w->val, false, false);
            accumulate(*x, gx.reshaped(x->val.shape));
        }
        if (w->requires_grad) {
            Tensor Xf = x->val.reshaped({int(rows), Din});
            accumulate(*w, glesam::matmul(gf, Xf, true, false));
        }
        if (b && b->requires_grad) {
            Tensor gb({Dout});
            for (int64_t r = 0; r < rows; ++r)
                for (int d = 0; d < Dout; ++d) gb.data[size_t(d)] += gf.data[size_t(r * Dout + d)];
            accumulate(*b, gb);
        }
    });
}

// ---- conv ----

Value conv2d(Value x, Value w, Value b, int stride, int pad, int groups) {
    const Tensor &X = x->val, &W = w->val;
    check(X.ndim() == 4 && W.ndim() == 4, "conv2d: rank-4 x and w required");
    int B = X.shape[0], Cin = X.shape[1], H = X.shape[2], Wd = X.shape[3];
    int Cout = W.shape[0], Cw = W.shape[1], kh = W.shape[2], kw = W.shape[3];
    check(Cin % groups == 0 && Cout % groups == 0, "conv2d: groups must divide channels");
    check(Cw == Cin / groups, "conv2d: weight in-channels mismatch");
    int oh = conv_out_dim(H, kh, stride, pad), ow = conv_out_dim(Wd, kw, stride, pad);
    int cig = Cin / groups, cog = Cout / groups;
    Tensor out({B, Cout, oh, ow});
    Tensor wm = W.reshaped({Cout, cig * kh * kw});
    for (int i = 0; i < B; ++i) {
        for (int g = 0; g < groups; ++g) {
            // group slice of the input image
            Tensor xi({cig, H, Wd});
            std::copy_n(X.data.data() + (int64_t(i) * Cin + g * cig) * H * Wd,
                        int64_t(cig) * H * Wd, xi.data.data());
            Tensor cols = im2col(xi, kh, kw, stride, pad);
            Tensor wg({cog, cig * kh * kw});
            std::copy_n(wm.data.data() + int64_t(g) * cog * cig * kh * kw,
                        int64_t(cog) * cig * kh * kw, wg.data.data());
            Tensor y = glesam::matmul(wg, cols);  // (cog, oh*ow)
            std::copy_n(y.data.data(), int64_t(cog) * oh * ow,
                        out.data.data() + (int64_t(i) * Cout + g * cog) * oh * ow);
        }
    }
    if (b) {
        check(b->val.ndim() == 1 && b->val.shape[0] == Cout, "conv2d: bias shape");
        for (int i = 0; i < B; ++i)
            for (int c = 0; c < Cout; ++c) {
                double bv = b->val.data[size_t(c)];
                double* dst = out.data.data() + (int64_t(i) * Cout + c) * oh * ow;
                for (int64_t p = 0; p < int64_t(oh) * ow; ++p) dst[p] += bv;
            }
    }
    std::vector<Value> parents = b ? std::vector<Value>{x, w, b} : std::vector<Value>{x, w};
    return make_node(
        out, parents, [x, w, b, stride, pad, groups, B, Cin, H, Wd, Cout, kh, kw, oh, ow](Node& self) {
            int cig = Cin / groups, cog = Cout / groups;
            Tensor wm = w->val.reshaped({Cout, cig * kh * kw});
            Tensor gx, gw;
            if (x->requires_grad) gx = Tensor::zeros(x->val.shape);
            if (w->requires_grad) gw = Tensor::zeros({Cout, cig * kh * kw});
            for (int i = 0; i < B; ++i)
                for (int g = 0; g < groups; ++g) {
                    Tensor gy({cog, oh * ow});
                    std::copy_n(self.grad.data.data() + (int64_t(i) * Cout + g * cog) * oh * ow,
                                int64_t(cog) * oh * ow, gy.data.data());
                    Tensor wg({cog, cig * kh * kw});
                    std::copy_n(wm.data.data() + int64_t(g) * cog * cig * kh * kw,
                                int64_t(cog) * cig * kh * kw, wg.data.data());
                    if (x->requires_grad) {
                        Tensor gcols = glesam::matmul(wg, gy, true, false);  // (cig*k*k, oh*ow)
                        Tensor gxi = col2im(gcols, cig, H, Wd, kh, kw, stride, pad);
                        double* dst = gx.data.data() + (int64_t(i) * Cin + g * cig) * H * Wd;
                        for (int64_t p = 0; p < int64_t(cig) * H * Wd; ++p) dst[p] += gxi.data[size_t(p)];
                    }
                    if (w->requires_grad) {
                        Tensor xi({cig, H, Wd});
                        std::copy_n(x->val.data.data() + (int64_t(i) * Cin + g * cig) * H * Wd,
                                    int64_t(cig) * H * Wd, xi.data.data());
                        Tensor cols = im2col(xi, kh, kw, stride, pad);
                        Tensor gwg = glesam::matmul(gy, cols, false, true);  // (cog, cig*k*k)
                        double* dst = gw.data.data() + int64_t(g) * cog * cig * kh * kw;
                        for (int64_t p = 0; p < int64_t(cog) * cig * kh * kw; ++p)
                            dst[p] += gwg.data[size_t(p)];
                    }
                }
            if (x->requires_grad) accumulate(*x, gx);
            if (w->requires_grad) accumulate(*w, gw.reshaped(w->val.shape));
            if (b && b->requires_grad) {
                Tensor gb({Cout});
                for (int i = 0; i < B; ++i)
                    for (int c = 0; c < Cout; ++c) {
                        const double* src = self.grad.data.data() + (int64_t(i) * Cout + c) * oh * ow;
                        double s = 0.0;
                        for (int64_t p = 0; p < int64_t(oh) * ow; ++p) s += src[p];
                        gb.data[size_t(c)] += s;
                    }
                accumulate(*b, gb);
            }
        });
}

Value conv_transpose2d(Value x, Value w, Value b, int stride, int pad) {
    const Tensor &X = x->val, &W = w->val;
    check(X.ndim() == 4 && W.ndim() == 4, "conv_transpose2d: rank-4 x and w required");
    int B = X.shape[0], Cin = X.shape[1], H = X.shape[2], Wd = X.shape[3];
    check(W.shape[0] == Cin, "conv_transpose2d: weight in-channels mismatch");
    int Cout = W.shape[1], kh = W.shape[2], kw = W.shape[3];
    int oh = (H - 1) * stride - 2 * pad + kh, ow = (Wd - 1) * stride - 2 * pad + kw;
    check(oh > 0 && ow > 0, "conv_transpose2d: empty output");
    // forward = adjoint of conv2d: cols = Wmat^T @ Xmat, image = col2im(cols)
    Tensor wm = W.reshaped({Cin, Cout * kh * kw});
    Tensor out({B, Cout, oh, ow});
    for (int i = 0; i < B; ++i) {
        Tensor xm({Cin, H * Wd});
        std::copy_n(X.data.data() + int64_t(i) * Cin * H * Wd, int64_t(Cin) * H * Wd, xm.data.data());
        Tensor cols = glesam::matmul(wm, xm, true, false);  // (Cout*k*k, H*W)
        Tensor img = col2im(cols, Cout, oh, ow, kh, kw, stride, pad);
        std::copy_n(img.data.data(), int64_t(Cout) * oh * ow,
                    out.data.data() + int64_t(i) * Cout * oh * ow);
    }
    if (b) {
        check(b->val.ndim() == 1 && b->val.shape[0] == Cout, "conv_transpose2d: bias shape");
        for (int i = 0; i < B; ++i)
            for (int c = 0; c < Cout; ++c) {
                double bv = b->val.data[size_t(c)];
                double* dst = out.data.data() + (int64_t(i) * Cout + c) * oh * ow;
                for (int64_t p = 0; p < int64_t(oh) * ow; ++p) dst[p] += bv;
            }
    }
    std::vector<Value> parents = b ? std::vector<Value>{x, w, b} : std::vector<Value>{x, w};
    return make_node(out, parents,
                     [x, w, b, stride, pad, B, Cin, H, Wd, Cout, kh, kw, oh, ow](Node& self) {
                         Tensor wm = w->val.reshaped({Cin, Cout * kh * kw});
                         Tensor gx, gw;
                         if (x->requires_grad) gx = Tensor::zeros(x->val.shape);
                         if (w->requires_grad) gw = Tensor::zeros({Cin, Cout * kh * kw});
                         for (int i = 0; i < B; ++i) {
                             Tensor gyi({Cout, oh, ow});
                             std::copy_n(self.grad.data.data() + int64_t(i) * Cout * oh * ow,
                                         int64_t(Cout) * oh * ow, gyi.data.data());
                             Tensor gcols = im2col(gyi, kh, kw, stride, pad);  // (Cout*k*k, H*W)
                             if (x->requires_grad) {
                                 Tensor gxm = glesam::matmul(wm, gcols);  // (Cin, H*W)
                                 double* dst = gx.data.data() + int64_t(i) * Cin * H * Wd;
                                 for (int64_t p = 0; p < int64_t(Cin) * H * Wd; ++p)
                                     dst[p] += gxm.data[size_t(p)];
                             }
                             if (w->requires_grad) {
                                 Tensor xm({Cin, H * Wd});
                                 std::copy_n(x->val.data.data() + int64_t(i) * Cin * H * Wd,
                                             int64_t(Cin) * H * Wd, xm.data.data());
                                 gw += glesam::matmul(xm, gcols, false, true);  // (Cin, Cout*k*k)
                             }
                         }
                         if (x->requires_grad) accumulate(*x, gx);
                         if (w->requires_grad) accumulate(*w, gw.reshaped(w->val.shape));
                         if (b && b->requires_grad) {
                             Tensor gb({Cout});
                             for (int i = 0; i < B; ++i)
                                 for (int c = 0; c < Cout; ++c) {
                                     const double* src =
                                         self.grad.data.data() + (int64_t(i) * Cout + c) * oh * ow;
                                     double s = 0.0;
                                     for (int64_t p = 0; p < int64_t(oh) * ow; ++p) s += src[p];
                                     gb.data[size_t(c)] += s;
                                 }
                             accumulate(*b, gb);
                         }
                     });
}

// ---- normalization / attention pieces ----

Value group_norm(Value x, Value gamma, Value beta, int groups, double eps) {
    const Tensor& X = x->val;
    check(X.ndim() == 4, "group_norm: rank-4 required");
    int B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
    check(C % groups == 0, "group_norm: groups must divide C");
    check(gamma->val.ndim() == 1 && gamma->val.shape[0] == C, "group_norm: gamma shape");
    check(beta->val.ndim() == 1 && beta->val.shape[0] == C, "group_norm: beta shape");
    int cg = C / groups;
    int64_t gsz = int64_t(cg) * H * W;
    Tensor xhat(X.shape);
    Tensor inv_std({B, groups});
    for (int i = 0; i < B; ++i)
        for (int g = 0; g < groups; ++g) {
            const double* src = X.data.data() + (int64_t(i) * C + g * cg) * H * W;
            double mu = 0.0;
            for (int64_t p = 0; p < gsz; ++p) mu += src[p];
            mu /= double(gsz);
            double var = 0.0;
            for (int64_t p = 0; p < gsz; ++p) var += (src[p] - mu) * (src[p] - mu);
            var /= double(gsz);
            double is = 1.0 / std::sqrt(var + eps);
            inv_std.data[size_t(i * groups + g)] = is;
            double* dst = xhat.data.data() + (int64_t(i) * C + g * cg) * H * W;
            for (int64_t p = 0; p < gsz; ++p) dst[p] = (src[p] - mu) * is;
        }
    Tensor out(X.shape);
    for (int i = 0; i < B; ++i)
        for (int c = 0; c < C; ++c) {
            double ga = gamma->val.data[size_t(c)], be = beta->val.data[size_t(c)];
            const double* src = xhat.data.data() + (int64_t(i) * C + c) * H * W;
            double* dst = out.data.data() + (int64_t(i) * C + c) * H * W;
            for (int64_t p = 0; p < int64_t(H) * W; ++p) dst[p] = ga * src[p] + be;
        }
    return make_node(out, {x, gamma, beta},
                     [x, gamma, beta, groups, B, C, H, W, cg, gsz, xhat, inv_std](Node& self) {
                         const Tensor& gy = self.grad;
                         if (gamma->requires_grad || beta->requires_grad) {
                             Tensor gg({C}), gb({C});
                             for (int i = 0; i < B; ++i)
                                 for (int c = 0; c < C; ++c) {
                                     const double* g = gy.data.data() + (int64_t(i) * C + c) * H * W;
                                     const double* xh = xhat.data.data() + (int64_t(i) * C + c) * H * W;
                                     double sg = 0.0, sb = 0.0;
                                     for (int64_t p = 0; p < int64_t(H) * W; ++p) {
                                         sg += g[p] * xh[p];
                                         sb += g[p];
                                     }
                                     gg.data[size_t(c)] += sg;
                                     gb.data[size_t(c)] += sb;
                                 }
                             if (gamma->requires_grad) accumulate(*gamma, gg);
                             if (beta->requires_grad) accumulate(*beta, gb);
                         }
                         if (!x->requires_grad) return;
                         Tensor gx(x->val.shape);
                         for (int i = 0; i < B; ++i)
                             for (int g = 0; g < groups; ++g) {
                                 // dxhat = gy * gamma (per channel within the group)
                                 double sum_d = 0.0, sum_dx = 0.0;
                                 const double* xh = xhat.data.data() + (int64_t(i) * C + g * cg) * H * W;
                                 std::vector<double> dxh(size_t(gsz), 0.0);
                                 for (int cc = 0; cc < cg; ++cc) {
                                     double ga = gamma->val.data[size_t(g * cg + cc)];
                                     const double* gp =
                                         gy.data.data() + (int64_t(i) * C + g * cg + cc) * H * W;
                                     for (int64_t p = 0; p < int64_t(H) * W; ++p) {
                                         double d = gp[p] * ga;
                                         dxh[size_t(cc * H * W + p)] = d;
                                         sum_d += d;
                                         sum_dx += d * xh[size_t(cc * H * W + p)];
                                     }
                                 }
                                 double is = inv_std.data[size_t(i * groups + g)];
                                 double* dst = gx.data.data() + (int64_t(i) * C + g * cg) * H * W;
                                 for (int64_t p = 0; p < gsz; ++p)
                                     dst[p] = is / double(gsz) *
                                              (double(gsz) * dxh[size_t(p)] - sum_d -
                                               xh[size_t(p)] * sum_dx);
                             }
                         accumulate(*x, gx);
                     });
}

namespace {
// softmax over contiguous rows of length N; shared by both softmax variants
void softmax_rows(const double* src, double* dst, int64_t rows, int64_t N) {
    for (int64_t r = 0; r < rows; ++r) {
        const double* s = src + r * N;
        double* d = dst + r * N;
        double m = s[0];
        for (int64_t i = 1; i < N; ++i) m = std::max(m, s[i]);
        double z = 0.0;
        for (int64_t i = 0; i < N; ++i) {
            d[i] = std::exp(s[i] - m);
            z += d[i];
        }
        for (int64_t i = 0; i < N; ++i) d[i] /= z;
    }
}

Value softmax_impl(Value a, int64_t rows, int64_t N) {
    Tensor out(a->val.shape);
    softmax_rows(a->val.data.data(), out.data.data(), rows, N);
    Tensor y = out;
    return make_node(out, {a}, [a, y, rows, N](Node& self) {
        if (!a->requires_grad) return;
        Tensor g(a->val.shape);
        for (int64_t r = 0; r < rows; ++r) {
            const double* gy = self.grad.data.data() + r * N;
            const double* yr = y.data.data() + r * N;
            double dot = 0.0;
            for (int64_t i = 0; i < N; ++i) dot += gy[i] * yr[i];
            double* d = g.data.data() + r * N;
            for (int64_t i = 0; i < N; ++i) d[i] = yr[i] * (gy[i] - dot);
        }
        accumulate(*a, g);
    });
}
}  // namespace

Value softmax_lastdim(Value a) {
    int64_t N = a->val.shape.back();
    return softmax_impl(a, a->val.numel() / N, N);
}

Value softmax_hw(Value a) {
    check(a->val.ndim() == 4, "softmax_hw: rank-4 required");
    int64_t N = int64_t(a->val.shape[2]) * a->val.shape[3];
    return softmax_impl(a, int64_t(a->val.shape[0]) * a->val.shape[1], N);
}

// ---- Fourier amplitude ----

namespace {
struct DftBasis {
    Tensor c, s;  // (N,N): c[u,n] = cos(2*pi*u*n/N), s[u,n] = sin(...)
};

const DftBasis& dft_basis(int n) {
    static std::map<int, DftBasis> cache;
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    DftBasis b{Tensor({n, n}), Tensor({n, n})};
    for (int u = 0; u < n; ++u)
        for (int k = 0; k < n; ++k) {
            double a = 2.0 * std::numbers::pi * double(u) * double(k) / double(n);
            b.c.data[size_t(u * n + k)] = std::cos(a);
            b.s.data[size_t(u * n + k)] = std::sin(a);
        }
    return cache.emplace(n, std::move(b)).first->second;
}
}  // namespace

Value dft_amplitude(Value a) {
    const Tensor& X = a->val;
    check(X.ndim() == 4, "dft_amplitude: rank-4 required");
    int B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
    const DftBasis &bh = dft_basis(H), &bw = dft_basis(W);
    Tensor out(X.shape), fre(X.shape), fim(X.shape);
    for (int bc = 0; bc < B * C; ++bc) {
        Tensor xp({H, W});
        std::copy_n(X.data.data() + int64_t(bc) * H * W, int64_t(H) * W, xp.data.data());
        // F = (Ch - i Sh) X (Cw - i Sw)^T
        Tensor cx = glesam::matmul(bh.c, xp), sx = glesam::matmul(bh.s, xp);
        Tensor re = glesam::sub(glesam::matmul(cx, bw.c, false, true),
                                glesam::matmul(sx, bw.s, false, true));
        Tensor im = glesam::scale(glesam::add(glesam::matmul(sx, bw.c, false, true),
                                              glesam::matmul(cx, bw.s, false, true)),
                                  -1.0);
        for (int64_t p = 0; p < int64_t(H) * W; ++p) {
            double r = re.data[size_t(p)], i2 = im.data[size_t(p)];
            fre.data[size_t(bc * H * W + p)] = r;
            fim.data[size_t(bc * H * W + p)] = i2;
            out.data[size_t(bc * H * W + p)] = std::hypot(r, i2);
        }
    }
    Tensor amp = out;
    return make_node(out, {a}, [a, fre, fim, amp, B, C, H, W](Node& self) {
        if (!a->requires_grad) return;
        const DftBasis &bh = dft_basis(H), &bw = dft_basis(W);
        Tensor gx(a->val.shape);
        for (int bc = 0; bc < B * C; ++bc) {
            Tensor dre({H, W}), dim({H, W});
            for (int64_t p = 0; p < int64_t(H) * W; ++p) {
                double m = amp.data[size_t(bc * H * W + p)];
                double gm = self.grad.data[size_t(bc * H * W + p)];
                if (m > 0.0) {
                    dre.data[size_t(p)] = gm * fre.data[size_t(bc * H * W + p)] / m;
                    dim.data[size_t(p)] = gm * fim.data[size_t(bc * H * W + p)] / m;
                }
            }
            // dX = Ch^T dRe Cw - Sh^T dRe Sw - Sh^T dIm Cw - Ch^T dIm Sw
            Tensor t1 = glesam::matmul(glesam::matmul(bh.c, dre, true, false), bw.c);
            Tensor t2 = glesam::matmul(glesam::matmul(bh.s, dre, true, false), bw.s);
            Tensor t3 = glesam::matmul(glesam::matmul(bh.s, dim, true, false), bw.c);
            Tensor t4 = glesam::matmul(glesam::matmul(bh.c, dim, true, false), bw.s);
            for (int64_t p = 0; p < int64_t(H) * W; ++p)
                gx.data[size_t(bc * H * W + p)] = t1.data[size_t(p)] - t2.data[size_t(p)] -
                                                  t3.data[size_t(p)] - t4.data[size_t(p)];
        }
        accumulate(*a, gx);
    });
}

}  // namespace glesam::ad
