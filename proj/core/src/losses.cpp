#include "glesam/losses.hpp"

#include <stdexcept>

namespace glesam {

namespace av = glesam::ad;

ad::Value mse_loss(ad::Value pred, ad::Value target) {
    if (!pred->val.same_shape(target->val))
        throw std::invalid_argument("mse_loss: shape mismatch " + pred->val.shape_str() + " vs " +
                                    target->val.shape_str());
    av::Value d = av::sub(pred, target);
    return av::mean_all(av::mul(d, d));
}

ad::Value dice_loss(ad::Value logits, ad::Value target, double smooth) {
    if (!logits->val.same_shape(target->val))
        throw std::invalid_argument("dice_loss: shape mismatch");
    if (logits->val.ndim() != 3) throw std::invalid_argument("dice_loss: (B,H,W) required");
    int B = logits->val.shape[0];
    int64_t hw = logits->val.numel() / B;
    av::Value p = av::sigmoid(av::reshape(logits, {B, int(hw)}));
    av::Value m = av::reshape(target, {B, int(hw)});
    av::Value inter = av::sum_lastdim(av::mul(p, m));                    // (B,)
    av::Value denom = av::add(av::sum_lastdim(p), av::sum_lastdim(m));   // (B,)
    av::Value frac = av::div(av::add_const(av::scale(inter, 2.0), smooth), av::add_const(denom, smooth));
    return av::mean_all(av::add_const(av::scale(frac, -1.0), 1.0));
}

ad::Value focal_loss(ad::Value logits, ad::Value target, double alpha) {
    if (!logits->val.same_shape(target->val))
        throw std::invalid_argument("focal_loss: shape mismatch");
    av::Value p = av::sigmoid(logits);
    av::Value m = target;
    // p_t = p*m + (1-p)*(1-m); alpha_t = alpha*m + (1-alpha)*(1-m)
    av::Value one_m = av::add_const(av::scale(m, -1.0), 1.0);
    av::Value pt = av::add(av::mul(p, m), av::mul(av::add_const(av::scale(p, -1.0), 1.0), one_m));
    av::Value at = av::add_const(av::scale(m, 2.0 * alpha - 1.0), 1.0 - alpha);
    av::Value miss = av::add_const(av::scale(pt, -1.0), 1.0);
    av::Value term = av::mul(av::mul(at, av::mul(miss, miss)), av::log(av::clamp_min(pt, 1e-8)));
    return av::scale(av::mean_all(term), -1.0);
}

ad::Value seg_loss(ad::Value logits, ad::Value target) {
    return av::add(dice_loss(logits, target), focal_loss(logits, target));
}

}  // namespace glesam
