#include "glesam/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace glesam {

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 1 || t > steps())
        throw std::out_of_range("NoiseSchedule: t must be in [1," + std::to_string(steps()) + "]");
    return alpha_bars[size_t(t - 1)];
}

NoiseSchedule build_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw std::invalid_argument("build_schedule: steps must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw std::invalid_argument("build_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule ns;
    ns.betas.resize(size_t(steps));
    ns.alphas.resize(size_t(steps));
    ns.alpha_bars.resize(size_t(steps));
    double prod = 1.0;
    for (int i = 0; i < steps; ++i) {
        double beta = steps == 1 ? beta_start
                                 : beta_start + (beta_end - beta_start) * double(i) / double(steps - 1);
        ns.betas[size_t(i)] = beta;
        ns.alphas[size_t(i)] = 1.0 - beta;
        prod *= 1.0 - beta;
        ns.alpha_bars[size_t(i)] = prod;
    }
    return ns;
}

Tensor forward_noise(const NoiseSchedule& ns, const Tensor& z0, int t, const Tensor& eps) {
    if (!z0.same_shape(eps)) throw std::invalid_argument("forward_noise: z0/eps shape mismatch");
    double ab = ns.alpha_bar(t);
    double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    Tensor out(z0.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = sa * z0.data[i] + sb * eps.data[i];
    return out;
}

Tensor one_step_denoise(const NoiseSchedule& ns, const Tensor& z_t, const Tensor& eps_hat, int t) {
    if (!z_t.same_shape(eps_hat))
        throw std::invalid_argument("one_step_denoise: z_t/eps_hat shape mismatch");
    double ab = ns.alpha_bar(t);
    double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    Tensor out(z_t.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = (z_t.data[i] - sb * eps_hat.data[i]) / sa;
    return out;
}

Tensor gle(const NoiseSchedule& ns, const DenoiseFn& eps_fn, const Tensor& z_l, int t) {
    return gle_fda(ns, eps_fn, z_l, t, 1.0);
}

Tensor gle_fda(const NoiseSchedule& ns, const DenoiseFn& eps_fn, const Tensor& z_l, int t,
               double gamma) {
    if (!(gamma > 0.0)) throw std::invalid_argument("gle_fda: gamma must be positive");
    double ab = ns.alpha_bar(t);
    double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    Tensor u = scale(z_l, gamma);
    Tensor eps = eps_fn(u, t);
    if (!eps.same_shape(z_l)) throw std::invalid_argument("gle_fda: denoiser changed shape");
    Tensor out(z_l.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = (u.data[i] - sb * eps.data[i]) / (gamma * sa);
    return out;
}

DaeRange DaeRange::from_schedule(const NoiseSchedule& ns, int t_min, int t_max) {
    if (t_min >= t_max) throw std::invalid_argument("DaeRange: t_min must be < t_max");
    return DaeRange{ns.beta_bar(t_min), ns.beta_bar(t_max)};
}

double eta_from_score(double s, const DaeRange& range) {
    if (!(s >= 0.0 && s <= 1.0))
        throw std::domain_error("eta_from_score: score outside [0,1]: " + std::to_string(s));
    return (1.0 - s) * range.beta_bar_min + s * range.beta_bar_max;
}

Tensor gle_dae(const DenoiseFn& eps_fn, const Tensor& z_l, const std::vector<double>& eta,
               double gamma, int t) {
    if (z_l.ndim() != 4) throw std::invalid_argument("gle_dae: (B,C,H,W) required");
    int B = z_l.shape[0];
    if (int(eta.size()) != B) throw std::invalid_argument("gle_dae: eta size must match batch");
    for (double e : eta)
        if (!(e > 0.0 && e < 1.0)) throw std::domain_error("gle_dae: eta must lie in (0,1)");
    if (!(gamma > 0.0)) throw std::invalid_argument("gle_dae: gamma must be positive");
    Tensor u = scale(z_l, gamma);
    Tensor eps = eps_fn(u, t);
    if (!eps.same_shape(z_l)) throw std::invalid_argument("gle_dae: denoiser changed shape");
    int64_t per = z_l.numel() / B;
    Tensor out(z_l.shape);
    for (int b = 0; b < B; ++b) {
        double se = std::sqrt(eta[size_t(b)]), sc = gamma * std::sqrt(1.0 - eta[size_t(b)]);
        for (int64_t i = 0; i < per; ++i) {
            int64_t k = int64_t(b) * per + i;
            out.data[size_t(k)] = (u.data[size_t(k)] - se * eps.data[size_t(k)]) / sc;
        }
    }
    return out;
}

ad::Value eta_from_score(ad::Value s, const DaeRange& range) {
    for (double v : s->val.data)
        if (!(v >= 0.0 && v <= 1.0))
            throw std::domain_error("eta_from_score: score outside [0,1]: " + std::to_string(v));
    // (1-s)*min + s*max, composed so the endpoints stay bit-exact
    ad::Value one_minus = ad::add_const(ad::scale(s, -1.0), 1.0);
    return ad::add(ad::scale(one_minus, range.beta_bar_min), ad::scale(s, range.beta_bar_max));
}

ad::Value gle_dae(const DenoiseGraphFn& eps_fn, ad::Value z_l, ad::Value eta, double gamma, int t) {
    if (z_l->val.ndim() != 4) throw std::invalid_argument("gle_dae: (B,C,H,W) required");
    int B = z_l->val.shape[0];
    if (eta->val.numel() != B) throw std::invalid_argument("gle_dae: eta size must match batch");
    ad::Value u = ad::scale(z_l, gamma);
    ad::Value eps = eps_fn(u, t);
    ad::Value e4 = ad::reshape(eta, {B, 1, 1, 1});
    ad::Value num = ad::sub(u, ad::mul(ad::sqrt(e4), eps));
    ad::Value den = ad::scale(ad::sqrt(ad::add_const(ad::scale(e4, -1.0), 1.0)), gamma);
    return ad::div(num, den);
}

}  // namespace glesam
