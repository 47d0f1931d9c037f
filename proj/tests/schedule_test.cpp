#include <doctest.h>

#include <glesam/gradcheck.hpp>
#include <glesam/rng.hpp>
#include <glesam/schedule.hpp>

using namespace glesam;
namespace av = glesam::ad;

TEST_CASE("two-step schedule matches hand-computed cumulative products") {
    NoiseSchedule ns = build_schedule(2, 0.1, 0.2);
    CHECK(ns.betas[0] == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(ns.betas[1] == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(ns.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(ns.alpha_bar(2) == doctest::Approx(0.9 * 0.8).epsilon(1e-15));
}

TEST_CASE("default 1000-step schedule endpoints") {
    NoiseSchedule ns = build_schedule();
    CHECK(ns.steps() == 1000);
    CHECK(ns.betas.front() == doctest::Approx(1e-4).epsilon(1e-15));
    CHECK(ns.betas.back() == doctest::Approx(0.02).epsilon(1e-15));
    // frozen expected value for the terminal cumulative product
    CHECK(ns.alpha_bar(1000) == doctest::Approx(4.035829765375676e-05).epsilon(1e-10));
    CHECK(ns.alpha_bar(1000) < 0.01);
    // anchor levels used by the adaptive-strength defaults
    CHECK(ns.beta_bar(100) == doctest::Approx(0.10298185432504003).epsilon(1e-12));
    CHECK(ns.beta_bar(500) == doctest::Approx(0.9214127571182218).epsilon(1e-12));
    CHECK(ns.beta_bar(900) == doctest::Approx(0.9997247940880966).epsilon(1e-12));
}

TEST_CASE("build_schedule validates its arguments") {
    CHECK_THROWS(build_schedule(0));
    CHECK_THROWS(build_schedule(10, 0.0, 0.5));
    CHECK_THROWS(build_schedule(10, 0.2, 0.1));
    CHECK_THROWS(build_schedule(10, 0.5, 1.0));
}

TEST_CASE("one_step_denoise exactly inverts forward_noise given the true noise") {
    NoiseSchedule ns = build_schedule();
    Rng rng(42);
    Tensor z0 = Tensor::randn(rng, {2, 4, 8, 8});
    for (int t : {1, 100, 500, 999, 1000}) {
        Tensor eps = Tensor::randn(rng, z0.shape);
        Tensor zt = forward_noise(ns, z0, t, eps);
        Tensor rec = one_step_denoise(ns, zt, eps, t);
        double err = sub(rec, z0).abs_max();
        CHECK(err < 1e-5);
    }
}

TEST_CASE("gle with an oracle denoiser recovers the clean latent") {
    // If the denoiser returns the exact residual-implied noise, enhancement
    // must reproduce the clean latent no matter what the degradation was.
    NoiseSchedule ns = build_schedule();
    Rng rng(7);
    Tensor zh = Tensor::randn(rng, {1, 4, 8, 8});
    Tensor zl = add(scale(zh, 0.8), Tensor::randn(rng, zh.shape));  // arbitrary degradation
    int t = 500;
    double gamma = 5.0;
    double ab = ns.alpha_bar(t);
    // eps* = (gamma z_l - gamma sqrt(ab) z_h) / sqrt(1-ab)  [solves the jump for z_h]
    DenoiseFn oracle = [&](const Tensor& u, int) {
        Tensor num = sub(u, scale(zh, gamma * std::sqrt(ab)));
        return scale(num, 1.0 / std::sqrt(1.0 - ab));
    };
    Tensor out = gle_fda(ns, oracle, zl, t, gamma);
    CHECK(sub(out, zh).abs_max() < 1e-9);
    // gamma=1 entry point
    Tensor out1 = gle(ns, oracle, scale(zl, gamma), t);
    (void)out1;
}

TEST_CASE("gle_fda equals gle_dae at eta = beta_bar(t)") {
    NoiseSchedule ns = build_schedule();
    Rng rng(3);
    Tensor zl = Tensor::randn(rng, {3, 4, 8, 8});
    Tensor fake_eps = Tensor::randn(rng, zl.shape);
    DenoiseFn f = [&](const Tensor& u, int) { return fake_eps; };
    int t = 500;
    double gamma = 5.0;
    Tensor a = gle_fda(ns, f, zl, t, gamma);
    std::vector<double> eta(3, ns.beta_bar(t));
    Tensor b = gle_dae(f, zl, eta, gamma, t);
    CHECK(sub(a, b).abs_max() < 1e-12);
}

TEST_CASE("eta_from_score endpoints are bit-exact and the map is affine") {
    NoiseSchedule ns = build_schedule();
    DaeRange r = DaeRange::from_schedule(ns);  // t_min=100, t_max=900
    CHECK(eta_from_score(0.0, r) == r.beta_bar_min);  // exact equality on purpose
    CHECK(eta_from_score(1.0, r) == r.beta_bar_max);
    double mid = eta_from_score(0.5, r);
    CHECK(mid == doctest::Approx(0.5 * (r.beta_bar_min + r.beta_bar_max)).epsilon(1e-12));
    CHECK_THROWS_AS(eta_from_score(-0.01, r), std::domain_error);
    CHECK_THROWS_AS(eta_from_score(1.01, r), std::domain_error);
    CHECK_THROWS_AS(eta_from_score(std::nan(""), r), std::domain_error);
}

TEST_CASE("graph eta_from_score matches the scalar map bit-for-bit") {
    NoiseSchedule ns = build_schedule();
    DaeRange r = DaeRange::from_schedule(ns);
    Tensor s = Tensor::from({4}, {0.0, 0.25, 0.75, 1.0});
    av::Value v = eta_from_score(av::leaf(s), r);
    for (int i = 0; i < 4; ++i) CHECK(v->val.data[i] == eta_from_score(s.data[i], r));
    CHECK(v->val.data[0] == r.beta_bar_min);
    CHECK(v->val.data[3] == r.beta_bar_max);
}

TEST_CASE("graph gle_dae matches the tensor version and differentiates in eta") {
    NoiseSchedule ns = build_schedule();
    Rng rng(5);
    Tensor zl = Tensor::randn(rng, {2, 3, 4, 4});
    Tensor fake = Tensor::randn(rng, zl.shape);
    int t = 500;
    double gamma = 5.0;
    std::vector<double> eta_v{0.3, 0.8};
    DenoiseFn f = [&](const Tensor& u, int) { return fake; };
    Tensor want = gle_dae(f, zl, eta_v, gamma, t);

    DenoiseGraphFn fg = [&](av::Value u, int) { return av::constant(fake); };
    av::Value eta = av::leaf(Tensor::from({2}, {0.3, 0.8}), true);
    av::Value zv = av::leaf(zl, true);
    av::Value out = gle_dae(fg, zv, eta, gamma, t);
    CHECK(sub(out->val, want).abs_max() < 1e-12);

    auto loss = [&]() {
        av::Value o = gle_dae(fg, zv, eta, gamma, t);
        return av::mean_all(av::mul(o, o));
    };
    Rng cr(9);
    auto rep = grad_check(loss, {{"eta", eta}, {"zl", zv}}, 8, cr);
    CHECK(rep.max_err < 1e-6);
}

TEST_CASE("gle_dae rejects out-of-range eta and mismatched sizes") {
    Rng rng(6);
    Tensor zl = Tensor::randn(rng, {2, 3, 4, 4});
    DenoiseFn f = [](const Tensor& u, int) { return u; };
    CHECK_THROWS(gle_dae(f, zl, {0.5}, 5.0, 500));
    CHECK_THROWS_AS(gle_dae(f, zl, {0.5, 1.0}, 5.0, 500), std::domain_error);
    CHECK_THROWS_AS(gle_dae(f, zl, {0.0, 0.5}, 5.0, 500), std::domain_error);
}

TEST_CASE("amplitude scaling identity: Var(gamma z) = gamma^2 Var(z)") {
    Rng rng(8);
    Tensor z = Tensor::randn(rng, {4, 4, 16, 16});
    for (double gamma : {2.0, 5.0, 9.0}) {
        Tensor g = scale(z, gamma);
        double vz = z.std() * z.std();
        double vg = g.std() * g.std();
        CHECK(std::fabs(vg - gamma * gamma * vz) / (gamma * gamma * vz) < 1e-9);
    }
}
