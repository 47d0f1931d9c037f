#include "glesam/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace glesam {

namespace {
void check_pair(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(who) + ": shape mismatch");
}
}  // namespace

double iou(const Tensor& pred, const Tensor& truth) {
    check_pair(pred, truth, "iou");
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        bool p = pred.data[i] > 0, t = truth.data[i] > 0;
        inter += p && t;
        uni += p || t;
    }
    return uni == 0 ? 1.0 : double(inter) / double(uni);
}

double dice_coef(const Tensor& pred, const Tensor& truth) {
    check_pair(pred, truth, "dice_coef");
    int64_t inter = 0, pa = 0, ta = 0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        bool p = pred.data[i] > 0, t = truth.data[i] > 0;
        inter += p && t;
        pa += p;
        ta += t;
    }
    return (pa + ta) == 0 ? 1.0 : 2.0 * double(inter) / double(pa + ta);
}

double pixel_acc(const Tensor& pred, const Tensor& truth) {
    check_pair(pred, truth, "pixel_acc");
    int64_t agree = 0;
    for (size_t i = 0; i < pred.data.size(); ++i)
        agree += (pred.data[i] > 0) == (truth.data[i] > 0);
    return double(agree) / double(pred.numel());
}

double psnr(const Tensor& a, const Tensor& b, double peak) {
    check_pair(a, b, "psnr");
    double mse = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= double(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

}  // namespace glesam
