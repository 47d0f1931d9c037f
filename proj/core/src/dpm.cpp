#include "glesam/dpm.hpp"

#include <cmath>
#include <stdexcept>

namespace glesam {

void init_dpm(ParamStore& ps, const DpmConfig& cfg, Rng& rng) {
    const int c = cfg.channels, h = cfg.hidden;
    ps.add("dpm/dw.w", Tensor::randn(rng, {c, 1, 3, 3}, std::sqrt(2.0 / 9.0)), true);
    ps.add("dpm/dw.b", Tensor::zeros({c}), true);
    ps.add("dpm/fr.w", Tensor::randn(rng, {c, c, 3, 3}, std::sqrt(2.0 / double(c * 9))), true);
    ps.add("dpm/fr.b", Tensor::zeros({c}), true);
    ps.add("dpm/sq.w", Tensor::randn(rng, {1, c, 1, 1}, std::sqrt(2.0 / double(c))), true);
    ps.add("dpm/sq.b", Tensor::zeros({1}), true);
    ps.add("dpm/m1.w", Tensor::randn(rng, {h, 2 * c}, std::sqrt(1.0 / double(2 * c))), true);
    ps.add("dpm/m1.b", Tensor::zeros({h}), true);
    ps.add("dpm/m2.w", Tensor::randn(rng, {1, h}, std::sqrt(1.0 / double(h))), true);
    ps.add("dpm/m2.b", Tensor::zeros({1}), true);
}

ad::Value predict_score(const ParamStore& ps, const DpmConfig& cfg, ad::Value z) {
    if (z->val.ndim() != 4 || z->val.shape[1] != cfg.channels)
        throw std::invalid_argument("scorer expects (B," + std::to_string(cfg.channels) +
                                    ",H,W), got " + z->val.shape_str());
    const int b = z->val.shape[0];
    ad::Value fsp = ad::conv2d(z, ps.get("dpm/dw.w"), ps.get("dpm/dw.b"), 1, 1, cfg.channels);
    ad::Value ffr = ad::conv2d(ad::dft_amplitude(z), ps.get("dpm/fr.w"), ps.get("dpm/fr.b"), 1, 1);
    ad::Value fused = ad::add(fsp, ffr);
    ad::Value att = ad::softmax_hw(ad::conv2d(fused, ps.get("dpm/sq.w"), ps.get("dpm/sq.b"), 1, 0));
    ad::Value dsp = ad::sum_hw(ad::mul(att, fsp));  // (B,C)
    ad::Value dfr = ad::sum_hw(ad::mul(att, ffr));  // (B,C)
    ad::Value hmid = ad::relu(ad::linear(ad::concat(dsp, dfr, 1), ps.get("dpm/m1.w"),
                                         ps.get("dpm/m1.b")));
    ad::Value s = ad::sigmoid(ad::linear(hmid, ps.get("dpm/m2.w"), ps.get("dpm/m2.b")));
    return ad::reshape(s, {b});
}

std::vector<double> score_latents(const ParamStore& ps, const DpmConfig& cfg, const Tensor& z) {
    ad::NoGradGuard guard;
    Tensor s = predict_score(ps, cfg, ad::constant(z))->val;
    return s.data;
}

}  // namespace glesam
