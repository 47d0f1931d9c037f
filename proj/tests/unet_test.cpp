#include <cmath>
#include <functional>

#include "doctest.h"
#include "glesam/gradcheck.hpp"
#include "glesam/schedule.hpp"
#include "glesam/unet.hpp"

using namespace glesam;

namespace {

// Small but structurally complete configuration for tests.
UNetConfig tiny_cfg() {
    UNetConfig cfg;
    cfg.in_channels = 2;
    cfg.base_width = 8;
    cfg.mid_width = 16;
    cfg.time_dim = 8;
    cfg.norm_groups = 4;
    return cfg;
}

Tensor tile_groups(const Tensor& x, int k) {
    int b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    Tensor out = Tensor::zeros({b, c * k, h, w});
    int64_t plane = int64_t(h) * w;
    for (int bi = 0; bi < b; ++bi)
        for (int g = 0; g < k; ++g)
            for (int ci = 0; ci < c; ++ci)
                for (int64_t i = 0; i < plane; ++i)
                    out.data[size_t(((bi * c * k + g * c + ci) * plane) + i)] =
                        x.data[size_t((bi * c + ci) * plane + i)];
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace

TEST_CASE("fresh denoiser predicts exactly zero noise (zero-initialized output conv)") {
    ParamStore ps;
    UNetConfig cfg = tiny_cfg();
    Rng rng(11);
    init_mini_unet(ps, cfg, rng);
    ad::NoGradGuard guard;
    Tensor z = Tensor::randn(rng, {2, 2, 16, 16});
    Tensor out = predict_noise(ps, cfg, ad::constant(z), {1, 400})->val;
    CHECK(out.same_shape(z));
    CHECK(out.abs_max() == 0.0);
}

TEST_CASE("denoiser forward is deterministic and validates its inputs") {
    ParamStore ps;
    UNetConfig cfg = tiny_cfg();
    Rng rng(12);
    init_mini_unet(ps, cfg, rng);
    ad::NoGradGuard guard;
    Tensor z = Tensor::randn(rng, {1, 2, 16, 16});
    Tensor a = predict_noise(ps, cfg, ad::constant(z), {9})->val;
    Tensor b = predict_noise(ps, cfg, ad::constant(z), {9})->val;
    CHECK(max_abs_diff(a, b) == 0.0);

    CHECK_THROWS_AS((void)predict_noise(ps, cfg, ad::constant(Tensor::zeros({1, 3, 16, 16})), {1}),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)predict_noise(ps, cfg, ad::constant(z), {1, 2}), std::invalid_argument);
    CHECK_THROWS_AS((void)predict_noise(ps, cfg, ad::constant(z), {0}), std::invalid_argument);
    CHECK_THROWS_AS((void)predict_noise(ps, cfg, ad::constant(Tensor::zeros({2, 16, 16})), {1}),
                    std::invalid_argument);
}

TEST_CASE("replicate expansion: head tiling is exact filter reuse") {
    ParamStore ps;
    UNetConfig cfg = tiny_cfg();
    Rng rng(13);
    init_mini_unet(ps, cfg, rng);
    // Give head a nonzero bias so the identity exercises it.
    for (auto& v : ps.value("unet/head.b").data) v = rng.normal(0.0, 0.3);
    Tensor w_orig = ps.value("unet/head.w");
    Tensor b_orig = ps.value("unet/head.b");

    const int k = 3;
    cre_expand(ps, cfg, k, CreMode::kReplicate);
    CHECK(cfg.io_channels() == 6);
    CHECK(ps.value("unet/head.w").shape == std::vector<int>{8, 6, 3, 3});
    CHECK_FALSE(ps.trainable("unet/head.w"));
    CHECK_FALSE(ps.trainable("unet/tail.w"));
    CHECK_FALSE(ps.trainable("unet/tail.b"));

    // On group-replicated input the tiled head's pre-activation equals
    // k * (conv result without bias) + bias of the original filters.
    ad::NoGradGuard guard;
    Tensor x = Tensor::randn(rng, {1, 2, 5, 5});
    Tensor lhs = ad::conv2d(ad::constant(tile_groups(x, k)), ps.get("unet/head.w"),
                            ps.get("unet/head.b"), 1, 1)
                     ->val;
    Tensor rhs = ad::add(ad::scale(ad::conv2d(ad::constant(x), ad::constant(w_orig), nullptr, 1, 1),
                                   double(k)),
                         ad::reshape(ad::constant(b_orig), {1, 8, 1, 1}))
                     ->val;
    CHECK(max_abs_diff(lhs, rhs) <= 1e-12);
}

TEST_CASE("replicate expansion: output consists of identical channel groups") {
    ParamStore ps;
    UNetConfig cfg = tiny_cfg();
    Rng rng(14);
    init_mini_unet(ps, cfg, rng);
    // Non-zero tail so the group structure is visible.
    ps.value("unet/tail.w") = Tensor::randn(rng, {2, 8, 3, 3}, 0.1);
    ps.value("unet/tail.b") = Tensor::randn(rng, {2}, 0.1);
    const int k = 3;
    cre_expand(ps, cfg, k, CreMode::kReplicate);

    ad::NoGradGuard guard;
    Tensor z = Tensor::randn(rng, {1, 6, 16, 16});  // arbitrary, not group-tiled
    Tensor out = predict_noise(ps, cfg, ad::constant(z), {25})->val;
    CHECK(out.abs_max() > 0.0);
    int64_t plane = 16 * 16;
    double worst = 0.0;
    for (int g = 1; g < k; ++g)
        for (int c = 0; c < 2; ++c)
            for (int64_t i = 0; i < plane; ++i) {
                double d = std::fabs(out.data[size_t(((g * 2 + c) * plane) + i)] -
                                     out.data[size_t((c * plane) + i)]);
                worst = std::max(worst, d);
            }
    CHECK(worst == 0.0);  // same filters, same inputs, same summation order

    // and the expanded net rejects unexpanded input
    CHECK_THROWS_AS((void)predict_noise(ps, cfg, ad::constant(Tensor::zeros({1, 2, 16, 16})), {1}),
                    std::invalid_argument);
}

TEST_CASE("adapter-codec expansion starts as the pretrained net on tiled input") {
    ParamStore ps;
    UNetConfig cfg = tiny_cfg();
    Rng rng(15);
    init_mini_unet(ps, cfg, rng);
    ps.value("unet/tail.w") = Tensor::randn(rng, {2, 8, 3, 3}, 0.1);
    Tensor z = Tensor::randn(rng, {1, 2, 16, 16});
    Tensor base_out;
    {
        ad::NoGradGuard guard;
        base_out = predict_noise(ps, cfg, ad::constant(z), {5})->val;
    }
    const int k = 3;
    cre_expand(ps, cfg, k, CreMode::kAdapterCodec);
    CHECK(ps.trainable("unet/cre_in.w"));
    CHECK(ps.trainable("unet/cre_out.w"));
    CHECK_FALSE(ps.trainable("unet/head.w"));

    ad::NoGradGuard guard;
    Tensor out = predict_noise(ps, cfg, ad::constant(tile_groups(z, k)), {5})->val;
    CHECK(out.shape == std::vector<int>{1, 6, 16, 16});
    int64_t plane = 16 * 16;
    double worst = 0.0;
    for (int g = 0; g < k; ++g)
        for (int c = 0; c < 2; ++c)
            for (int64_t i = 0; i < plane; ++i) {
                double d = std::fabs(out.data[size_t(((g * 2 + c) * plane) + i)] -
                                     base_out.data[size_t(c * plane + i)]);
                worst = std::max(worst, d);
            }
    CHECK(worst <= 1e-12);
}

TEST_CASE("new-head-tail expansion installs fresh trainable ends") {
    ParamStore ps;
    UNetConfig cfg = tiny_cfg();
    Rng rng(16);
    init_mini_unet(ps, cfg, rng);
    cre_expand(ps, cfg, 4, CreMode::kNewHeadTail);
    CHECK(ps.value("unet/head.w").shape == std::vector<int>{8, 8, 3, 3});
    CHECK(ps.value("unet/tail.w").shape == std::vector<int>{8, 8, 3, 3});
    CHECK(ps.trainable("unet/head.w"));
    CHECK(ps.trainable("unet/tail.b"));
    ad::NoGradGuard guard;
    Tensor out = predict_noise(ps, cfg, ad::constant(Tensor::randn(rng, {1, 8, 16, 16})), {3})->val;
    CHECK(out.shape == std::vector<int>{1, 8, 16, 16});
}

TEST_CASE("expansion guards") {
    ParamStore ps;
    UNetConfig cfg = tiny_cfg();
    Rng rng(17);
    init_mini_unet(ps, cfg, rng);
    CHECK_THROWS_AS(cre_expand(ps, cfg, 0, CreMode::kReplicate), std::invalid_argument);
    cre_expand(ps, cfg, 2, CreMode::kReplicate);
    CHECK_THROWS_AS(cre_expand(ps, cfg, 2, CreMode::kReplicate), std::logic_error);
    NoiseSchedule ns = build_schedule(10, 1e-4, 0.02);
    DenoiserPretrainOpts opts;
    CHECK_THROWS_AS((void)pretrain_denoiser(ps, cfg, ns, opts, rng), std::logic_error);
    CHECK(cre_mode_from_string("replicate") == CreMode::kReplicate);
    CHECK(to_string(CreMode::kAdapterCodec) == "adapter_codec");
    CHECK_THROWS_AS((void)cre_mode_from_string("nope"), std::invalid_argument);
}

TEST_CASE("low-rank adapters: exact no-op at attach time") {
    ParamStore ps;
    UNetConfig cfg = tiny_cfg();
    Rng rng(18);
    init_mini_unet(ps, cfg, rng);
    ps.value("unet/tail.w") = Tensor::randn(rng, {2, 8, 3, 3}, 0.1);
    Tensor z = Tensor::randn(rng, {1, 2, 16, 16});
    Tensor before;
    {
        ad::NoGradGuard guard;
        before = predict_noise(ps, cfg, ad::constant(z), {40})->val;
    }
    attach_lora(ps, cfg, LoraConfig{}, rng);
    CHECK(has_lora(ps));
    CHECK(ps.has("unet/attn1.q.lora_A"));
    CHECK(ps.has("unet/attnu1.o.lora_B"));
    CHECK(ps.value("unet/lora.scale").data[0] == doctest::Approx(1.0));
    Tensor after;
    {
        ad::NoGradGuard guard;
        after = predict_noise(ps, cfg, ad::constant(z), {40})->val;
    }
    CHECK(max_abs_diff(before, after) <= 1e-7);  // B starts at zero
    CHECK(max_abs_diff(before, after) == 0.0);
}

TEST_CASE("low-rank adapters: gradient reaches B while frozen base gets none") {
    ParamStore ps;
    UNetConfig cfg = tiny_cfg();
    Rng rng(19);
    init_mini_unet(ps, cfg, rng);
    ps.value("unet/tail.w") = Tensor::randn(rng, {2, 8, 3, 3}, 0.1);
    attach_lora(ps, cfg, LoraConfig{}, rng);
    for (const std::string& n : ps.names("unet/"))
        ps.set_trainable(n, n.find(".lora_") != std::string::npos);

    Tensor z = Tensor::randn(rng, {1, 2, 16, 16});
    ps.zero_grad();
    ad::Value out = predict_noise(ps, cfg, ad::constant(z), {12});
    ad::backward(ad::mean_all(ad::mul(out, out)));
    CHECK(ps.get("unet/attn1.q.lora_B")->has_grad());
    CHECK(ps.get("unet/attn1.q.lora_B")->grad.abs_max() > 0.0);
    // dL/dA flows through B, which is zero at attach time
    if (ps.get("unet/attn1.q.lora_A")->has_grad())
        CHECK(ps.get("unet/attn1.q.lora_A")->grad.abs_max() == 0.0);
    CHECK_FALSE(ps.get("unet/head.w")->has_grad());
    CHECK_FALSE(ps.get("unet/mid0.c1.w")->has_grad());
}

TEST_CASE("finite-difference check through the full expanded+adapted net") {
    ParamStore ps;
    UNetConfig cfg = tiny_cfg();
    Rng rng(20);
    init_mini_unet(ps, cfg, rng);
    ps.value("unet/tail.w") = Tensor::randn(rng, {2, 8, 3, 3}, 0.05);
    cre_expand(ps, cfg, 2, CreMode::kReplicate);
    attach_lora(ps, cfg, LoraConfig{}, rng);
    // make the adapters active so their gradients are nontrivial
    for (const char* which : {".q", ".k", ".v", ".o"}) {
        Tensor& b = ps.value(std::string("unet/attn1") + which + ".lora_B");
        b = Tensor::randn(rng, b.shape, 0.05);
    }

    Tensor z = Tensor::randn(rng, {1, 4, 16, 16});
    Tensor mask = Tensor::randn(rng, {1, 4, 16, 16});
    auto loss_fn = [&] {
        ad::Value out = predict_noise(ps, cfg, ad::constant(z), {33});
        return ad::sum_all(ad::mul(out, ad::constant(mask)));
    };
    std::vector<std::pair<std::string, ad::Value>> checked;
    for (const std::string& n :
         {std::string("unet/attn1.q.lora_A"), std::string("unet/attn1.q.lora_B"),
          std::string("unet/res0.c1.w"), std::string("unet/temb.fc1.w"),
          std::string("unet/mid0.t.w"), std::string("unet/tail.n.g"),
          std::string("unet/resu1.skip.w"), std::string("unet/up0c.w"),
          std::string("unet/attnm.v.w"), std::string("unet/resu0.n2.b")})
        checked.push_back({n, ps.get(n)});
    ps.zero_grad();
    GradCheckReport rep = grad_check(loss_fn, checked, 2, rng);
    CAPTURE(rep.worst);
    CHECK(rep.checked == 20);
    CHECK(rep.max_err < 1e-6);
}

TEST_CASE("denoiser closures match the graph forward") {
    ParamStore ps;
    UNetConfig cfg = tiny_cfg();
    Rng rng(21);
    init_mini_unet(ps, cfg, rng);
    ps.value("unet/tail.w") = Tensor::randn(rng, {2, 8, 3, 3}, 0.1);
    Tensor z = Tensor::randn(rng, {2, 2, 16, 16});
    Tensor want;
    {
        ad::NoGradGuard guard;
        want = predict_noise(ps, cfg, ad::constant(z), {77, 77})->val;
    }
    DenoiseFn fn = make_denoiser(ps, cfg);
    CHECK(max_abs_diff(fn(z, 77), want) == 0.0);
    DenoiseGraphFn gfn = make_denoiser_graph(ps, cfg);
    ad::Value gv = gfn(ad::constant(z), 77);
    CHECK(max_abs_diff(gv->val, want) == 0.0);
}

TEST_CASE("denoiser pretraining reduces the noise-regression loss") {
    ParamStore ps;
    UNetConfig cfg = tiny_cfg();
    Rng rng(22);
    init_mini_unet(ps, cfg, rng);
    NoiseSchedule ns = build_schedule(50, 1e-4, 0.02);
    DenoiserPretrainOpts opts;
    opts.iters = 120;
    opts.batch = 4;
    opts.lr = 1e-3;
    opts.corpus_size = 12;
    opts.corpus_std = 1.0;
    opts.log_every = 1000;
    double final_loss = pretrain_denoiser(ps, cfg, ns, opts, rng);
    // zero-initialized tail starts at E||eps||^2 ~= 1
    CHECK(std::isfinite(final_loss));
    CHECK(final_loss < 0.9);
    ad::NoGradGuard guard;
    Tensor out = predict_noise(ps, cfg, ad::constant(Tensor::randn(rng, {1, 2, 16, 16})), {10})->val;
    CHECK(out.abs_max() > 0.0);
}
