#include "glesam/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace glesam {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

Tensor::Tensor(std::vector<int> shp, double fill) : shape(std::move(shp)) {
    for (int d : shape)
        if (d <= 0) throw std::invalid_argument("Tensor: non-positive dim in " + shape_str());
    data.assign(size_t(numel_of(shape)), fill);
}

Tensor Tensor::from(std::vector<int> shp, std::vector<double> vals) {
    Tensor t;
    t.shape = std::move(shp);
    if (int64_t(vals.size()) != numel_of(t.shape))
        throw std::invalid_argument("Tensor::from: value count does not match shape");
    t.data = std::move(vals);
    return t;
}

Tensor Tensor::randn(Rng& rng, std::vector<int> shp, double sd) {
    Tensor t(std::move(shp));
    for (double& v : t.data) v = rng.normal(0.0, sd);
    return t;
}

Tensor Tensor::rand_uniform(Rng& rng, std::vector<int> shp, double lo, double hi) {
    Tensor t(std::move(shp));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

int64_t Tensor::numel() const { return int64_t(data.size()); }

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

namespace {
int64_t lin_index(const std::vector<int>& shape, std::initializer_list<int> idx) {
    if (idx.size() != shape.size()) throw std::out_of_range("Tensor::at: rank mismatch");
    int64_t lin = 0;
    int i = 0;
    for (int v : idx) {
        if (v < 0 || v >= shape[size_t(i)]) throw std::out_of_range("Tensor::at: index out of range");
        lin = lin * shape[size_t(i)] + v;
        ++i;
    }
    return lin;
}
}  // namespace

double& Tensor::at(std::initializer_list<int> idx) { return data[size_t(lin_index(shape, idx))]; }

double Tensor::at(std::initializer_list<int> idx) const {
    return data[size_t(lin_index(shape, idx))];
}

Tensor Tensor::reshaped(std::vector<int> shp) const {
    if (numel_of(shp) != numel())
        throw std::invalid_argument("reshaped: element count mismatch " + shape_str());
    Tensor t = *this;
    t.shape = std::move(shp);
    return t;
}

Tensor& Tensor::operator+=(const Tensor& o) {
    if (!same_shape(o)) throw std::invalid_argument("operator+=: shape mismatch");
    for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    return *this;
}

Tensor& Tensor::operator*=(double c) {
    for (double& v : data) v *= c;
    return *this;
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data) s += v;
    return s;
}

double Tensor::min() const {
    return *std::min_element(data.begin(), data.end());
}

double Tensor::max() const {
    return *std::max_element(data.begin(), data.end());
}

double Tensor::abs_max() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::fabs(v));
    return m;
}

double Tensor::std() const {
    double mu = mean(), s = 0.0;
    for (double v : data) s += (v - mu) * (v - mu);
    return std::sqrt(s / double(numel()));
}

// ---- broadcasting ----

std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
    size_t n = std::max(a.size(), b.size());
    std::vector<int> out(n, 1);
    for (size_t i = 0; i < n; ++i) {
        int da = i < n - a.size() ? 1 : a[i - (n - a.size())];
        int db = i < n - b.size() ? 1 : b[i - (n - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("broadcast_shape: incompatible dims");
        out[i] = std::max(da, db);
    }
    return out;
}

namespace {

// Row-major strides, with stride 0 on broadcast (size-1) dims after
// right-aligning `shape` against rank `n`.
std::array<int64_t, 4> bc_strides(const std::vector<int>& shape, size_t n) {
    std::array<int64_t, 4> st{0, 0, 0, 0};
    int64_t s = 1;
    for (size_t i = shape.size(); i-- > 0;) {
        size_t o = i + (n - shape.size());
        st[o] = (shape[i] == 1) ? 0 : s;
        s *= shape[i];
    }
    return st;
}

}  // namespace

Tensor bc_binary(const Tensor& a, const Tensor& b, double (*op)(double, double)) {
    if (a.shape == b.shape) {  // fast path
        Tensor out(a.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = op(a.data[i], b.data[i]);
        return out;
    }
    std::vector<int> os = broadcast_shape(a.shape, b.shape);
    size_t n = os.size();
    if (n > 4) throw std::invalid_argument("bc_binary: rank > 4 unsupported");
    auto sa = bc_strides(a.shape, n), sb = bc_strides(b.shape, n);
    std::array<int, 4> dims{1, 1, 1, 1};
    for (size_t i = 0; i < n; ++i) dims[4 - n + i] = os[i];
    // shift strides so everything is rank-4 aligned
    std::array<int64_t, 4> sa4{0, 0, 0, 0}, sb4{0, 0, 0, 0};
    for (size_t i = 0; i < n; ++i) {
        sa4[4 - n + i] = sa[i];
        sb4[4 - n + i] = sb[i];
    }
    Tensor out(os);
    int64_t w = 0;
    for (int i0 = 0; i0 < dims[0]; ++i0)
        for (int i1 = 0; i1 < dims[1]; ++i1)
            for (int i2 = 0; i2 < dims[2]; ++i2) {
                int64_t oa = i0 * sa4[0] + i1 * sa4[1] + i2 * sa4[2];
                int64_t ob = i0 * sb4[0] + i1 * sb4[1] + i2 * sb4[2];
                for (int i3 = 0; i3 < dims[3]; ++i3)
                    out.data[size_t(w++)] =
                        op(a.data[size_t(oa + i3 * sa4[3])], b.data[size_t(ob + i3 * sb4[3])]);
            }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    return bc_binary(a, b, +[](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
    return bc_binary(a, b, +[](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
    return bc_binary(a, b, +[](double x, double y) { return x * y; });
}
Tensor div(const Tensor& a, const Tensor& b) {
    return bc_binary(a, b, +[](double x, double y) { return x / y; });
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = a;
    out *= c;
    return out;
}

Tensor map(const Tensor& a, const std::function<double(double)>& f) {
    Tensor out = a;
    for (double& v : out.data) v = f(v);
    return out;
}

Tensor reduce_to_shape(const Tensor& g, const std::vector<int>& shape) {
    if (g.shape == shape) return g;
    size_t n = g.shape.size();
    if (shape.size() > n) throw std::invalid_argument("reduce_to_shape: rank grew");
    auto st = bc_strides(shape, n);
    std::array<int, 4> dims{1, 1, 1, 1};
    std::array<int64_t, 4> st4{0, 0, 0, 0};
    for (size_t i = 0; i < n; ++i) {
        dims[4 - n + i] = g.shape[i];
        st4[4 - n + i] = st[i];
    }
    Tensor out(shape);
    int64_t r = 0;
    for (int i0 = 0; i0 < dims[0]; ++i0)
        for (int i1 = 0; i1 < dims[1]; ++i1)
            for (int i2 = 0; i2 < dims[2]; ++i2) {
                int64_t ot = i0 * st4[0] + i1 * st4[1] + i2 * st4[2];
                for (int i3 = 0; i3 < dims[3]; ++i3)
                    out.data[size_t(ot + i3 * st4[3])] += g.data[size_t(r++)];
            }
    return out;
}

// ---- GEMM ----

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw std::invalid_argument("matmul: rank-2 required");
    int am = trans_a ? a.shape[1] : a.shape[0], ak = trans_a ? a.shape[0] : a.shape[1];
    int bk = trans_b ? b.shape[1] : b.shape[0], bm = trans_b ? b.shape[0] : b.shape[1];
    if (ak != bk) throw std::invalid_argument("matmul: inner dim mismatch");
    Tensor out({am, bm});
    ECMap A(a.data.data(), a.shape[0], a.shape[1]);
    ECMap B(b.data.data(), b.shape[0], b.shape[1]);
    EMap O(out.data.data(), am, bm);
    if (!trans_a && !trans_b) O.noalias() = A * B;
    else if (trans_a && !trans_b) O.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) O.noalias() = A * B.transpose();
    else O.noalias() = A.transpose() * B.transpose();
    return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    if (a.ndim() != 3) throw std::invalid_argument("bmm: lhs must be rank 3");
    bool b_batched = b.ndim() == 3;
    if (!b_batched && b.ndim() != 2) throw std::invalid_argument("bmm: rhs rank 2 or 3");
    int B = a.shape[0];
    if (b_batched && b.shape[0] != B) throw std::invalid_argument("bmm: batch mismatch");
    int ar = a.shape[1], ac = a.shape[2];
    int br = b_batched ? b.shape[1] : b.shape[0], bc = b_batched ? b.shape[2] : b.shape[1];
    int am = trans_a ? ac : ar, ak = trans_a ? ar : ac;
    int bk = trans_b ? bc : br, bn = trans_b ? br : bc;
    if (ak != bk) throw std::invalid_argument("bmm: inner dim mismatch");
    Tensor out({B, am, bn});
    for (int i = 0; i < B; ++i) {
        ECMap A(a.data.data() + int64_t(i) * ar * ac, ar, ac);
        ECMap Bm(b.data.data() + (b_batched ? int64_t(i) * br * bc : 0), br, bc);
        EMap O(out.data.data() + int64_t(i) * am * bn, am, bn);
        if (!trans_a && !trans_b) O.noalias() = A * Bm;
        else if (trans_a && !trans_b) O.noalias() = A.transpose() * Bm;
        else if (!trans_a && trans_b) O.noalias() = A * Bm.transpose();
        else O.noalias() = A.transpose() * Bm.transpose();
    }
    return out;
}

// ---- conv lowering ----

int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

Tensor im2col(const Tensor& img, int kh, int kw, int stride, int pad) {
    if (img.ndim() != 3) throw std::invalid_argument("im2col: (C,H,W) required");
    int C = img.shape[0], H = img.shape[1], W = img.shape[2];
    int oh = conv_out_dim(H, kh, stride, pad), ow = conv_out_dim(W, kw, stride, pad);
    Tensor cols({C * kh * kw, oh * ow});
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                int row = (c * kh + ky) * kw + kx;
                double* dst = cols.data.data() + int64_t(row) * oh * ow;
                const double* src = img.data.data() + int64_t(c) * H * W;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        dst += ow;
                        continue;
                    }
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        *dst++ = (ix < 0 || ix >= W) ? 0.0 : src[int64_t(iy) * W + ix];
                    }
                }
            }
    return cols;
}

Tensor col2im(const Tensor& cols, int C, int H, int W, int kh, int kw, int stride, int pad) {
    int oh = conv_out_dim(H, kh, stride, pad), ow = conv_out_dim(W, kw, stride, pad);
    if (cols.ndim() != 2 || cols.shape[0] != C * kh * kw || cols.shape[1] != oh * ow)
        throw std::invalid_argument("col2im: bad column shape");
    Tensor img({C, H, W});
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                int row = (c * kh + ky) * kw + kx;
                const double* src = cols.data.data() + int64_t(row) * oh * ow;
                double* dst = img.data.data() + int64_t(c) * H * W;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        src += ow;
                        continue;
                    }
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride - pad + kx;
                        double v = *src++;
                        if (ix >= 0 && ix < W) dst[int64_t(iy) * W + ix] += v;
                    }
                }
            }
    return img;
}

}  // namespace glesam
