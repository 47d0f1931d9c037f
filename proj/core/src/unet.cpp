#include "glesam/unet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "glesam/losses.hpp"

namespace glesam {
namespace {

using ad::Value;

Value gn(const ParamStore& ps, const std::string& prefix, Value x, int groups) {
    return ad::group_norm(x, ps.get(prefix + ".g"), ps.get(prefix + ".b"), groups);
}

Value conv3(const ParamStore& ps, const std::string& prefix, Value x, int stride) {
    return ad::conv2d(x, ps.get(prefix + ".w"), ps.get(prefix + ".b"), stride, 1);
}

Value conv1(const ParamStore& ps, const std::string& prefix, Value x) {
    Value b = ps.has(prefix + ".b") ? ps.get(prefix + ".b") : nullptr;
    return ad::conv2d(x, ps.get(prefix + ".w"), b, 1, 0);
}

// Residual block: GN -> SiLU -> conv3 -> +time bias -> GN -> SiLU -> conv3,
// plus a 1x1 projection on the skip path when channel counts differ.
Value res_block(const ParamStore& ps, const std::string& p, Value x, Value temb, int groups) {
    Value h = ad::silu(gn(ps, p + ".n1", x, groups));
    h = conv3(ps, p + ".c1", h, 1);
    Value tb = ad::linear(temb, ps.get(p + ".t.w"), ps.get(p + ".t.b"));  // (B,co)
    int b = tb->val.shape[0], co = tb->val.shape[1];
    h = ad::add(h, ad::reshape(tb, {b, co, 1, 1}));
    h = ad::silu(gn(ps, p + ".n2", h, groups));
    h = conv3(ps, p + ".c2", h, 1);
    Value skip = ps.has(p + ".skip.w") ? conv1(ps, p + ".skip", x) : x;
    return ad::add(h, skip);
}

// Linear projection with an optional low-rank adapter on top of the (usually
// frozen) base weight: y = x W^T + b + s * (x A^T) B^T.
Value proj(const ParamStore& ps, const std::string& p, Value x, double lora_scale) {
    Value y = ad::linear(x, ps.get(p + ".w"), ps.get(p + ".b"));
    if (ps.has(p + ".lora_A")) {
        Value d = ad::linear(ad::linear(x, ps.get(p + ".lora_A"), nullptr),
                             ps.get(p + ".lora_B"), nullptr);
        y = ad::add(y, ad::scale(d, lora_scale));
    }
    return y;
}

// Single-head self-attention over the H*W token grid, pre-norm, residual.
Value attn_block(const ParamStore& ps, const std::string& p, Value x, int groups,
                 double lora_scale) {
    int h = x->val.shape[2], w = x->val.shape[3], c = x->val.shape[1];
    Value tok = ad::bchw_to_bnc(gn(ps, p + ".n", x, groups));
    Value q = proj(ps, p + ".q", tok, lora_scale);
    Value k = proj(ps, p + ".k", tok, lora_scale);
    Value v = proj(ps, p + ".v", tok, lora_scale);
    Value att = ad::softmax_lastdim(ad::scale(ad::bmm(q, k, false, true), 1.0 / std::sqrt(double(c))));
    Value out = proj(ps, p + ".o", ad::bmm(att, v), lora_scale);
    return ad::add(x, ad::bnc_to_bchw(out, h, w));
}

// Sinusoidal embedding of integer timesteps, (B, dim), no gradient.
Tensor time_embedding(const std::vector<int>& t, int dim) {
    int half = dim / 2;
    Tensor e = Tensor::zeros({int(t.size()), dim});
    for (size_t b = 0; b < t.size(); ++b) {
        for (int j = 0; j < half; ++j) {
            double f = (half > 1) ? std::exp(-std::log(10000.0) * double(j) / double(half - 1)) : 1.0;
            e.data[b * dim + j] = std::sin(double(t[b]) * f);
            e.data[b * dim + half + j] = std::cos(double(t[b]) * f);
        }
    }
    return e;
}

void reg_conv(ParamStore& ps, Rng& rng, const std::string& p, int co, int ci, int k) {
    double sd = std::sqrt(2.0 / double(ci * k * k));
    ps.add(p + ".w", Tensor::randn(rng, {co, ci, k, k}, sd), true);
    ps.add(p + ".b", Tensor::zeros({co}), true);
}

void reg_gn(ParamStore& ps, const std::string& p, int c) {
    ps.add(p + ".g", Tensor::full({c}, 1.0), true);
    ps.add(p + ".b", Tensor::zeros({c}), true);
}

void reg_linear(ParamStore& ps, Rng& rng, const std::string& p, int dout, int din) {
    ps.add(p + ".w", Tensor::randn(rng, {dout, din}, std::sqrt(1.0 / double(din))), true);
    ps.add(p + ".b", Tensor::zeros({dout}), true);
}

void reg_res(ParamStore& ps, Rng& rng, const std::string& p, int ci, int co, int tdim) {
    reg_gn(ps, p + ".n1", ci);
    reg_conv(ps, rng, p + ".c1", co, ci, 3);
    reg_linear(ps, rng, p + ".t", co, tdim);
    reg_gn(ps, p + ".n2", co);
    reg_conv(ps, rng, p + ".c2", co, co, 3);
    if (ci != co) {
        double sd = std::sqrt(2.0 / double(ci));
        ps.add(p + ".skip.w", Tensor::randn(rng, {co, ci, 1, 1}, sd), true);
    }
}

void reg_attn(ParamStore& ps, Rng& rng, const std::string& p, int c) {
    reg_gn(ps, p + ".n", c);
    for (const char* which : {".q", ".k", ".v", ".o"}) reg_linear(ps, rng, p + which, c, c);
}

// Tile `src` n times along dimension `dim` (0 or 1 of a rank-1/4 tensor).
Tensor tile_dim(const Tensor& src, int dim, int n) {
    std::vector<int> shp = src.shape;
    shp[dim] *= n;
    Tensor out = Tensor::zeros(shp);
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < dim; ++d) outer *= src.shape[d];
    for (size_t d = dim + 1; d < src.shape.size(); ++d) inner *= src.shape[d];
    int64_t block = src.shape[dim] * inner;
    for (int64_t o = 0; o < outer; ++o)
        for (int g = 0; g < n; ++g)
            for (int64_t i = 0; i < block; ++i)
                out.data[(o * n + g) * block + i] = src.data[o * block + i];
    return out;
}

double lora_scale_of(const ParamStore& ps) {
    return ps.has("unet/lora.scale") ? ps.value("unet/lora.scale").data[0] : 1.0;
}

}  // namespace

int UNetConfig::io_channels() const { return in_channels * cre_k; }

CreMode cre_mode_from_string(const std::string& s) {
    if (s == "replicate") return CreMode::kReplicate;
    if (s == "new_head_tail") return CreMode::kNewHeadTail;
    if (s == "adapter_codec") return CreMode::kAdapterCodec;
    throw std::invalid_argument("unknown channel-expansion mode: " + s);
}

std::string to_string(CreMode m) {
    switch (m) {
        case CreMode::kReplicate: return "replicate";
        case CreMode::kNewHeadTail: return "new_head_tail";
        case CreMode::kAdapterCodec: return "adapter_codec";
    }
    throw std::logic_error("bad CreMode");
}

std::vector<std::string> attention_prefixes() {
    return {"unet/attn1", "unet/attnm", "unet/attnu1"};
}

void init_mini_unet(ParamStore& ps, const UNetConfig& cfg, Rng& rng) {
    if (cfg.time_dim % 2 != 0) throw std::invalid_argument("time_dim must be even");
    if (cfg.base_width % cfg.norm_groups != 0 || cfg.mid_width % cfg.norm_groups != 0)
        throw std::invalid_argument("widths must be divisible by norm_groups");
    const int w0 = cfg.base_width, w1 = cfg.mid_width, td = cfg.time_dim;
    reg_linear(ps, rng, "unet/temb.fc1", td, td);
    reg_linear(ps, rng, "unet/temb.fc2", td, td);
    reg_conv(ps, rng, "unet/head", w0, cfg.in_channels, 3);
    reg_res(ps, rng, "unet/res0", w0, w0, td);
    reg_conv(ps, rng, "unet/down0", w1, w0, 3);
    reg_res(ps, rng, "unet/res1", w1, w1, td);
    reg_attn(ps, rng, "unet/attn1", w1);
    reg_conv(ps, rng, "unet/down1", w1, w1, 3);
    reg_res(ps, rng, "unet/mid0", w1, w1, td);
    reg_attn(ps, rng, "unet/attnm", w1);
    reg_res(ps, rng, "unet/mid1", w1, w1, td);
    reg_conv(ps, rng, "unet/up1c", w1, w1, 3);
    reg_res(ps, rng, "unet/resu1", 2 * w1, w1, td);
    reg_attn(ps, rng, "unet/attnu1", w1);
    reg_conv(ps, rng, "unet/up0c", w0, w1, 3);
    reg_res(ps, rng, "unet/resu0", 2 * w0, w0, td);
    reg_gn(ps, "unet/tail.n", w0);
    // Zero-initialized output conv: an untrained net predicts zero noise.
    ps.add("unet/tail.w", Tensor::zeros({cfg.in_channels, w0, 3, 3}), true);
    ps.add("unet/tail.b", Tensor::zeros({cfg.in_channels}), true);
}

void cre_expand(ParamStore& ps, UNetConfig& cfg, int k, CreMode mode) {
    if (k < 1) throw std::invalid_argument("expansion factor must be >= 1");
    if (cfg.cre_k != 1) throw std::logic_error("channel expansion already applied");
    const int cin = cfg.in_channels, w0 = cfg.base_width;
    switch (mode) {
        case CreMode::kReplicate: {
            // Head: tile pretrained filters across the k input groups, so the
            // pre-activation on group-replicated input is k*(orig - bias) + bias.
            ps.replace("unet/head.w", tile_dim(ps.value("unet/head.w"), 1, k), false);
            ps.set_trainable("unet/head.b", false);
            // Tail: replicate filters and biases across the k output groups;
            // the expanded net emits k identical channel groups.
            ps.replace("unet/tail.w", tile_dim(ps.value("unet/tail.w"), 0, k), false);
            ps.replace("unet/tail.b", tile_dim(ps.value("unet/tail.b"), 0, k), false);
            break;
        }
        case CreMode::kNewHeadTail: {
            Rng rng(0x9e3779b97f4a7c15ULL ^ uint64_t(k));
            double sd_h = std::sqrt(2.0 / double(cin * k * 9));
            ps.replace("unet/head.w", Tensor::randn(rng, {w0, cin * k, 3, 3}, sd_h), true);
            ps.replace("unet/head.b", Tensor::zeros({w0}), true);
            double sd_t = std::sqrt(2.0 / double(w0 * 9));
            ps.replace("unet/tail.w", Tensor::randn(rng, {cin * k, w0, 3, 3}, sd_t), true);
            ps.replace("unet/tail.b", Tensor::zeros({cin * k}), true);
            break;
        }
        case CreMode::kAdapterCodec: {
            // Frozen pretrained head/tail; trainable 1x1 codec around them,
            // initialized so the initial function matches replicate mode up to
            // the k-vs-mean head scaling (group average in, group copies out).
            ps.set_trainable("unet/head.w", false);
            ps.set_trainable("unet/head.b", false);
            ps.set_trainable("unet/tail.w", false);
            ps.set_trainable("unet/tail.b", false);
            Tensor win = Tensor::zeros({cin, cin * k, 1, 1});
            for (int j = 0; j < cin; ++j)
                for (int g = 0; g < k; ++g) win.data[j * (cin * k) + g * cin + j] = 1.0 / k;
            Tensor wout = Tensor::zeros({cin * k, cin, 1, 1});
            for (int g = 0; g < k; ++g)
                for (int j = 0; j < cin; ++j) wout.data[(g * cin + j) * cin + j] = 1.0;
            ps.add("unet/cre_in.w", std::move(win), true);
            ps.add("unet/cre_in.b", Tensor::zeros({cin}), true);
            ps.add("unet/cre_out.w", std::move(wout), true);
            ps.add("unet/cre_out.b", Tensor::zeros({cin * k}), true);
            break;
        }
    }
    cfg.cre_k = k;
    cfg.cre_mode = mode;
}

void attach_lora(ParamStore& ps, const UNetConfig& cfg, const LoraConfig& lora, Rng& rng) {
    if (lora.rank < 1) throw std::invalid_argument("lora rank must be >= 1");
    const int c = cfg.mid_width;
    for (const std::string& p : attention_prefixes()) {
        for (const char* which : {".q", ".k", ".v", ".o"}) {
            ps.add(p + which + ".lora_A", Tensor::randn(rng, {lora.rank, c}, lora.init_sd), true);
            ps.add(p + which + ".lora_B", Tensor::zeros({c, lora.rank}), true);
        }
    }
    ps.add("unet/lora.scale", Tensor::scalar(lora.alpha / double(lora.rank)), false);
}

bool has_lora(const ParamStore& ps) { return ps.has("unet/lora.scale"); }

ad::Value predict_noise(const ParamStore& ps, const UNetConfig& cfg, Value z,
                        const std::vector<int>& t) {
    if (z->val.ndim() != 4) throw std::invalid_argument("denoiser input must be (B,C,H,W)");
    if (z->val.shape[1] != cfg.io_channels())
        throw std::invalid_argument("denoiser input has " + std::to_string(z->val.shape[1]) +
                                    " channels, expected " + std::to_string(cfg.io_channels()));
    if (int(t.size()) != z->val.shape[0])
        throw std::invalid_argument("need one timestep per batch item");
    for (int ti : t)
        if (ti < 1) throw std::invalid_argument("timesteps are 1-based");

    const int g = cfg.norm_groups;
    const double ls = lora_scale_of(ps);
    Value temb = ad::constant(time_embedding(t, cfg.time_dim));
    temb = ad::linear(ad::silu(ad::linear(temb, ps.get("unet/temb.fc1.w"),
                                          ps.get("unet/temb.fc1.b"))),
                      ps.get("unet/temb.fc2.w"), ps.get("unet/temb.fc2.b"));

    Value x = z;
    if (cfg.cre_mode == CreMode::kAdapterCodec && ps.has("unet/cre_in.w"))
        x = conv1(ps, "unet/cre_in", x);
    x = conv3(ps, "unet/head", x, 1);
    Value h0 = res_block(ps, "unet/res0", x, temb, g);
    Value h1 = conv3(ps, "unet/down0", h0, 2);
    h1 = res_block(ps, "unet/res1", h1, temb, g);
    h1 = attn_block(ps, "unet/attn1", h1, g, ls);
    Value m = conv3(ps, "unet/down1", h1, 2);
    m = res_block(ps, "unet/mid0", m, temb, g);
    m = attn_block(ps, "unet/attnm", m, g, ls);
    m = res_block(ps, "unet/mid1", m, temb, g);
    Value u1 = conv3(ps, "unet/up1c", ad::upsample_nearest2x(m), 1);
    u1 = res_block(ps, "unet/resu1", ad::concat(u1, h1, 1), temb, g);
    u1 = attn_block(ps, "unet/attnu1", u1, g, ls);
    Value u0 = conv3(ps, "unet/up0c", ad::upsample_nearest2x(u1), 1);
    u0 = res_block(ps, "unet/resu0", ad::concat(u0, h0, 1), temb, g);
    Value out = conv3(ps, "unet/tail", ad::silu(gn(ps, "unet/tail.n", u0, g)), 1);
    if (cfg.cre_mode == CreMode::kAdapterCodec && ps.has("unet/cre_out.w"))
        out = conv1(ps, "unet/cre_out", out);
    return out;
}

DenoiseFn make_denoiser(const ParamStore& ps, const UNetConfig& cfg) {
    return [&ps, cfg](const Tensor& z, int t) {
        ad::NoGradGuard guard;
        std::vector<int> ts(size_t(z.shape.at(0)), t);
        return predict_noise(ps, cfg, ad::constant(z), ts)->val;
    };
}

DenoiseGraphFn make_denoiser_graph(const ParamStore& ps, const UNetConfig& cfg) {
    return [&ps, cfg](ad::Value z, int t) {
        std::vector<int> ts(size_t(z->val.shape.at(0)), t);
        return predict_noise(ps, cfg, z, ts);
    };
}

namespace {

// Smooth zero-mean random field, (c,h,w), overall std = target_sd. Gaussian
// white noise blurred with a separable kernel (replicate padding).
Tensor smooth_field(Rng& rng, int c, int h, int w, double sigma, double target_sd) {
    Tensor x = Tensor::randn(rng, {c, h, w});
    int r = std::max(1, int(std::ceil(3.0 * sigma)));
    std::vector<double> k(size_t(2 * r + 1), 0.0);
    double s = 0.0;
    for (int i = -r; i <= r; ++i) s += (k[size_t(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma)));
    for (double& v : k) v /= s;
    Tensor tmp = Tensor::zeros({c, h, w}), out = Tensor::zeros({c, h, w});
    auto at = [&](Tensor& tns, int ci, int y, int xx) -> double& {
        return tns.data[size_t((ci * h + y) * w + xx)];
    };
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[size_t(i + r)] * at(x, ci, y, std::clamp(xx + i, 0, w - 1));
                at(tmp, ci, y, xx) = acc;
            }
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[size_t(i + r)] * at(tmp, ci, std::clamp(y + i, 0, h - 1), xx);
                at(out, ci, y, xx) = acc;
            }
    double mean = out.mean();
    for (double& v : out.data) v -= mean;
    double sd = out.std();
    if (sd > 1e-12)
        for (double& v : out.data) v *= target_sd / sd;
    return out;
}

}  // namespace

double pretrain_denoiser(ParamStore& ps, const UNetConfig& cfg, const NoiseSchedule& ns,
                         const DenoiserPretrainOpts& opts, Rng& rng, bool verbose) {
    if (cfg.cre_k != 1)
        throw std::logic_error("pretraining runs on the base net, before channel expansion");
    const int hh = 16, ww = 16, c = cfg.in_channels;
    std::vector<Tensor> corpus;
    corpus.reserve(size_t(opts.corpus_size));
    for (int i = 0; i < opts.corpus_size; ++i)
        corpus.push_back(smooth_field(rng, c, hh, ww, opts.smooth_sigma, opts.corpus_std));

    ps.set_trainable_prefix("unet/", true);
    AdamW opt;
    opt.lr = opts.lr;
    const int steps = int(ns.betas.size());
    double running = -1.0;
    for (int it = 1; it <= opts.iters; ++it) {
        const int b = opts.batch;
        Tensor zt = Tensor::zeros({b, c, hh, ww});
        Tensor eps = Tensor::zeros({b, c, hh, ww});
        std::vector<int> ts(size_t(b), 0);
        const int64_t n = int64_t(c) * hh * ww;
        for (int i = 0; i < b; ++i) {
            const Tensor& x0 = corpus[size_t(rng.uniform_int(int(corpus.size())))];
            int t = 1 + rng.uniform_int(steps);
            ts[size_t(i)] = t;
            double sa = std::sqrt(ns.alpha_bar(t)), sb = std::sqrt(1.0 - ns.alpha_bar(t));
            for (int64_t j = 0; j < n; ++j) {
                double e = rng.normal();
                eps.data[size_t(i * n + j)] = e;
                zt.data[size_t(i * n + j)] = sa * x0.data[size_t(j)] + sb * e;
            }
        }
        ad::Value pred = predict_noise(ps, cfg, ad::constant(zt), ts);
        ad::Value loss = mse_loss(pred, ad::constant(eps));
        ps.zero_grad();
        ad::backward(loss);
        clip_grad_norm(ps, opts.clip_norm);
        opt.step(ps);
        double l = loss->val.data[0];
        running = (running < 0.0) ? l : 0.98 * running + 0.02 * l;
        if (verbose && (it % opts.log_every == 0 || it == 1))
            std::fprintf(stderr, "[denoiser-pretrain] iter %d/%d loss %.4f (avg %.4f)\n", it,
                         opts.iters, l, running);
    }
    return running;
}

}  // namespace glesam
