#pragma once
#include <functional>
#include <vector>

#include "glesam/autodiff.hpp"
#include "glesam/tensor.hpp"

namespace glesam {

// Linear-beta diffusion schedule. Timesteps are 1-based: t in [1, steps],
// alpha_bar(t) = prod_{i<=t} (1 - beta_i).
struct NoiseSchedule {
    std::vector<double> betas;       // betas[t-1]
    std::vector<double> alphas;      // 1 - beta
    std::vector<double> alpha_bars;  // cumulative product

    int steps() const { return int(betas.size()); }
    double alpha_bar(int t) const;
    double beta_bar(int t) const { return 1.0 - alpha_bar(t); }
};

NoiseSchedule build_schedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps
Tensor forward_noise(const NoiseSchedule& ns, const Tensor& z0, int t, const Tensor& eps);

// Single-jump reconstruction given a noise estimate:
// z0_hat = (z_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)
Tensor one_step_denoise(const NoiseSchedule& ns, const Tensor& z_t, const Tensor& eps_hat, int t);

// A denoiser queried as eps_hat = f(z, t).
using DenoiseFn = std::function<Tensor(const Tensor& z, int t)>;

// Latent enhancement: treat a degraded latent as if it sat at step t of the
// forward process and jump straight back.
Tensor gle(const NoiseSchedule& ns, const DenoiseFn& eps_fn, const Tensor& z_l, int t);

// Amplitude-aligned variant: the degraded latent is scaled by gamma before
// denoising so its magnitude matches the corpus the denoiser was trained on,
// and the output is scaled back.
// z_hat = (gamma z_l - sqrt(1 - alpha_bar_t) eps_hat(gamma z_l; t)) / (gamma sqrt(alpha_bar_t))
Tensor gle_fda(const NoiseSchedule& ns, const DenoiseFn& eps_fn, const Tensor& z_l, int t,
               double gamma);

// Denoising-strength range for score-adaptive enhancement, expressed as
// cumulative noise levels beta_bar = 1 - alpha_bar at two anchor timesteps.
struct DaeRange {
    double beta_bar_min = 0.0;
    double beta_bar_max = 0.0;

    static DaeRange from_schedule(const NoiseSchedule& ns, int t_min = 100, int t_max = 900);
};

// eta = (1 - s) * beta_bar_min + s * beta_bar_max.
// The two-product form keeps the endpoints exact: s=0 returns beta_bar_min
// bit-for-bit and s=1 returns beta_bar_max bit-for-bit.
// Throws std::domain_error when s is outside [0,1] or not finite.
double eta_from_score(double s, const DaeRange& range);

// Score-adaptive enhancement with a per-sample strength eta in (0,1):
// z_hat = (gamma z_l - sqrt(eta) eps_hat(gamma z_l; t)) / (gamma sqrt(1 - eta))
// eta.size() must equal the batch dim of z_l.
Tensor gle_dae(const DenoiseFn& eps_fn, const Tensor& z_l, const std::vector<double>& eta,
               double gamma, int t);

// ---- graph-building variants used by the trainers ----
using DenoiseGraphFn = std::function<ad::Value(ad::Value z, int t)>;

// Same mapping as eta_from_score for a (B,) score tensor.
ad::Value eta_from_score(ad::Value s, const DaeRange& range);
// Same mapping as gle_dae with per-sample eta (B,), differentiable in both
// z_l and eta.
ad::Value gle_dae(const DenoiseGraphFn& eps_fn, ad::Value z_l, ad::Value eta, double gamma, int t);

}  // namespace glesam
