#pragma once
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "glesam/rng.hpp"

namespace glesam {

// Dense row-major double tensor, rank 0..4. Double precision everywhere keeps
// finite-difference gradient checks meaningful; weights are narrowed to f32
// only at checkpoint-serialization time.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> shp, double fill = 0.0);

    static Tensor zeros(std::vector<int> shp) { return Tensor(std::move(shp), 0.0); }
    static Tensor full(std::vector<int> shp, double v) { return Tensor(std::move(shp), v); }
    static Tensor scalar(double v) { return Tensor({1}, v); }
    static Tensor from(std::vector<int> shp, std::vector<double> vals);
    static Tensor randn(Rng& rng, std::vector<int> shp, double sd = 1.0);
    static Tensor rand_uniform(Rng& rng, std::vector<int> shp, double lo, double hi);

    int ndim() const { return int(shape.size()); }
    int64_t numel() const;
    int dim(int i) const { return shape[size_t(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    std::string shape_str() const;

    double& operator[](int64_t i) { return data[size_t(i)]; }
    double operator[](int64_t i) const { return data[size_t(i)]; }

    // Multi-index access, bounds-checked.
    double& at(std::initializer_list<int> idx);
    double at(std::initializer_list<int> idx) const;

    Tensor reshaped(std::vector<int> shp) const;

    // In-place helpers.
    Tensor& operator+=(const Tensor& o);
    Tensor& operator*=(double c);
    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    double sum() const;
    double mean() const { return numel() ? sum() / double(numel()) : 0.0; }
    double min() const;
    double max() const;
    double abs_max() const;
    // Uncorrected standard deviation over all elements.
    double std() const;
};

// ---- shape utilities ----
int64_t numel_of(const std::vector<int>& shape);
// NumPy-style broadcast of two shapes (right-aligned, dims equal or 1).
// Throws std::invalid_argument when incompatible.
std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b);

// ---- pure tensor math (no autodiff; these also back the op library) ----
// Elementwise with broadcasting.
Tensor bc_binary(const Tensor& a, const Tensor& b, double (*op)(double, double));
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor map(const Tensor& a, const std::function<double(double)>& f);

// Sum a broadcasted gradient back down to `shape` (the broadcast adjoint).
Tensor reduce_to_shape(const Tensor& g, const std::vector<int>& shape);

// GEMM-backed matrix products (Eigen inside).
// matmul: (N,K)x(K,M). bmm: (B,N,K)x(B,K,M) or (B,N,K)x(K,M).
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// im2col/col2im for NCHW conv lowering. Columns are laid out
// (C*kh*kw, outH*outW) for a single image (C,H,W).
Tensor im2col(const Tensor& img, int kh, int kw, int stride, int pad);
Tensor col2im(const Tensor& cols, int C, int H, int W, int kh, int kw, int stride, int pad);
int conv_out_dim(int in, int k, int stride, int pad);

}  // namespace glesam
