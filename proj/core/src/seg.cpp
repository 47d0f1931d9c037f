#include "glesam/seg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "glesam/losses.hpp"

namespace glesam {


namespace {

Tensor he_conv(Rng& rng, int co, int ci, int k) {
  return Tensor::randn(rng, {co, ci, k, k}, std::sqrt(2.0 / double(ci * k * k)));
}

Tensor lin_init(Rng& rng, int out, int in) {
  return Tensor::randn(rng, {out, in}, 1.0 / std::sqrt(double(in)));
}

// Fixed sinusoidal position code (C,h,h), four planes per frequency octave.
Tensor make_posenc(int c, int h) {
  Tensor pe({c, h, h});
  for (int i = 0; i < c / 4; ++i) {
    const double f = std::pow(2.0, i) * std::numbers::pi / h;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < h; ++x) {
        pe.at({4 * i, y, x}) = std::sin(f * y);
        pe.at({4 * i + 1, y, x}) = std::cos(f * y);
        pe.at({4 * i + 2, y, x}) = std::sin(f * x);
        pe.at({4 * i + 3, y, x}) = std::cos(f * x);
      }
    }
  }
  return pe;
}

void check_cfg(const SegConfig& cfg) {
  if (cfg.image_size % 4 != 0) throw std::invalid_argument("segmenter: image size must be divisible by 4");
  if (cfg.channels % 4 != 0) throw std::invalid_argument("segmenter: channel width must be divisible by 4");
  if (cfg.channels % 2 != 0) throw std::invalid_argument("segmenter: channel width must be even");
}

// Fourier features for normalized coordinates: (B,P,2) -> (B,P,C), then a
// type embedding row is added by the callers.
ad::Value fourier_embed(const ParamStore& ps, const SegConfig& cfg, ad::Value pts) {
  ad::Value ang = ad::scale(ad::bmm(pts, ps.get("seg/pen.fr")), 2.0 * std::numbers::pi);
  return ad::concat(ad::sin(ang), ad::cos(ang), 2);
}

ad::Value type_row(const ParamStore& ps, const SegConfig& cfg, int row) {
  ad::Value tp = ad::reshape(ps.get("seg/pen.tp"), {1, 3, cfg.channels});
  return ad::reshape(ad::select_row(tp, row), {1, 1, cfg.channels});
}

}  // namespace

void init_segmenter(ParamStore& ps, const SegConfig& cfg, Rng& rng) {
  check_cfg(cfg);
  const int C = cfg.channels;
  const int M = cfg.enc_mid;
  const int U = cfg.up_mid;
  const int Hc = cfg.hyper_ch;

  // Image encoder: two stride-2 stages and a fusing conv, SiLU activations.
  ps.add("seg/enc.c1.w", he_conv(rng, M, 3, 3), true);
  ps.add("seg/enc.c1.b", Tensor({M}), true);
  ps.add("seg/enc.c2.w", he_conv(rng, C, M, 3), true);
  ps.add("seg/enc.c2.b", Tensor({C}), true);
  ps.add("seg/enc.c3.w", he_conv(rng, C, C, 3), true);
  ps.add("seg/enc.c3.b", Tensor({C}), true);

  // Prompt encoder: random Fourier frequencies + per-role type embeddings
  // (row 0: point, rows 1/2: box corners).
  ps.add("seg/pen.fr", Tensor::randn(rng, {2, C / 2}, 1.0), true);
  ps.add("seg/pen.tp", Tensor::randn(rng, {3, C}, 0.5), true);

  // Mask decoder: one cross-attention block (mask token + prompts attending
  // to latent cells), a token MLP, an upsampling trunk, and a hypernetwork
  // head that turns the mask token into per-channel mixing weights.
  ps.add("seg/dec.token", Tensor::randn(rng, {C}, 0.5), true);
  for (const char* nm : {"q", "k", "v", "o", "m1", "m2", "h1"}) {
    ps.add(std::string("seg/dec.") + nm + ".w", lin_init(rng, C, C), true);
    ps.add(std::string("seg/dec.") + nm + ".b", Tensor({C}), true);
  }
  ps.add("seg/dec.h2.w", lin_init(rng, Hc, C), true);
  ps.add("seg/dec.h2.b", Tensor({Hc}), true);
  ps.add("seg/dec.up1.w", Tensor::randn(rng, {C, U, 4, 4}, std::sqrt(2.0 / double(C * 16))), true);
  ps.add("seg/dec.up1.b", Tensor({U}), true);
  ps.add("seg/dec.up2.w", Tensor::randn(rng, {U, Hc, 4, 4}, std::sqrt(2.0 / double(U * 16))), true);
  ps.add("seg/dec.up2.b", Tensor({Hc}), true);
  ps.add("seg/dec.pos_gain", Tensor::full({1}, 1.0), true);
  ps.add("seg/dec.ob", Tensor({1}), true);
}

ad::Value encode_image(const ParamStore& ps, const SegConfig& cfg, ad::Value img) {
  if (img->val.ndim() != 4 || img->val.dim(1) != 3 ||
      img->val.dim(2) != cfg.image_size || img->val.dim(3) != cfg.image_size) {
    throw std::invalid_argument("encode_image: expected (B,3,S,S) with S = configured size");
  }
  ad::Value h = ad::conv2d(img, ps.get("seg/enc.c1.w"), ps.get("seg/enc.c1.b"), 2, 1);
  h = ad::silu(h);
  h = ad::conv2d(h, ps.get("seg/enc.c2.w"), ps.get("seg/enc.c2.b"), 2, 1);
  h = ad::silu(h);
  return ad::conv2d(h, ps.get("seg/enc.c3.w"), ps.get("seg/enc.c3.b"), 1, 1);
}

Tensor encode_image_t(const ParamStore& ps, const SegConfig& cfg, const Tensor& img) {
  ad::NoGradGuard guard;
  return encode_image(ps, cfg, ad::constant(img))->val;
}

ad::Value encode_points(const ParamStore& ps, const SegConfig& cfg, ad::Value pts) {
  const Tensor& t = pts->val;
  if (t.ndim() != 3 || t.dim(2) != 2) {
    throw std::invalid_argument("encode_points: expected (B,P,2)");
  }
  ad::Value emb = fourier_embed(ps, cfg, pts);
  ad::Value tp = ad::broadcast_to(type_row(ps, cfg, 0), {t.dim(0), t.dim(1), cfg.channels});
  return ad::add(emb, tp);
}

ad::Value encode_box(const ParamStore& ps, const SegConfig& cfg, ad::Value box) {
  const Tensor& t = box->val;
  if (t.ndim() != 2 || t.dim(1) != 4) {
    throw std::invalid_argument("encode_box: expected (B,4) as (x0,y0,x1,y1)");
  }
  const int B = t.dim(0);
  ad::Value corners = ad::reshape(box, {B, 2, 2});
  ad::Value emb = fourier_embed(ps, cfg, corners);
  ad::Value tp = ad::broadcast_to(
      ad::concat(type_row(ps, cfg, 1), type_row(ps, cfg, 2), 1), {B, 2, cfg.channels});
  return ad::add(emb, tp);
}

ad::Value decode_mask(const ParamStore& ps, const SegConfig& cfg, ad::Value z,
                       ad::Value prompts) {
  const Tensor& zt = z->val;
  const int hw = cfg.latent_hw();
  if (zt.ndim() != 4 || zt.dim(1) != cfg.channels || zt.dim(2) != hw || zt.dim(3) != hw) {
    throw std::invalid_argument("decode_mask: latent must be (B,C,S/4,S/4)");
  }
  const Tensor& pt = prompts->val;
  if (pt.ndim() != 3 || pt.dim(0) != zt.dim(0) || pt.dim(2) != cfg.channels) {
    throw std::invalid_argument("decode_mask: prompts must be (B,P,C) with matching batch");
  }
  const int B = zt.dim(0);
  const int C = cfg.channels;

  ad::Value pe = ad::constant(make_posenc(C, hw).reshaped({1, C, hw, hw}));
  ad::Value zp = ad::add(z, ad::mul(ad::broadcast_to(pe, {B, C, hw, hw}),
                                       ps.get("seg/dec.pos_gain")));

  ad::Value toks = ad::concat(
      ad::broadcast_to(ad::reshape(ps.get("seg/dec.token"), {1, 1, C}), {B, 1, C}), prompts, 1);

  ad::Value kv = ad::bchw_to_bnc(zp);
  ad::Value q = ad::linear(toks, ps.get("seg/dec.q.w"), ps.get("seg/dec.q.b"));
  ad::Value k = ad::linear(kv, ps.get("seg/dec.k.w"), ps.get("seg/dec.k.b"));
  ad::Value v = ad::linear(kv, ps.get("seg/dec.v.w"), ps.get("seg/dec.v.b"));
  ad::Value att = ad::softmax_lastdim(ad::scale(ad::bmm(q, k, false, true),
                                                   1.0 / std::sqrt(double(C))));
  toks = ad::add(toks, ad::linear(ad::bmm(att, v), ps.get("seg/dec.o.w"),
                                    ps.get("seg/dec.o.b")));
  toks = ad::add(toks, ad::linear(ad::relu(ad::linear(toks, ps.get("seg/dec.m1.w"),
                                                          ps.get("seg/dec.m1.b"))),
                                    ps.get("seg/dec.m2.w"), ps.get("seg/dec.m2.b")));

  // Hypernetwork: the mask token becomes the channel-mixing vector applied to
  // the upsampled per-pixel embeddings.
  ad::Value tok0 = ad::select_row(toks, 0);
  ad::Value hvec = ad::linear(ad::relu(ad::linear(tok0, ps.get("seg/dec.h1.w"),
                                                      ps.get("seg/dec.h1.b"))),
                                ps.get("seg/dec.h2.w"), ps.get("seg/dec.h2.b"));

  ad::Value u = ad::conv_transpose2d(zp, ps.get("seg/dec.up1.w"), ps.get("seg/dec.up1.b"), 2, 1);
  u = ad::relu(u);
  u = ad::conv_transpose2d(u, ps.get("seg/dec.up2.w"), ps.get("seg/dec.up2.b"), 2, 1);

  ad::Value prod = ad::mul(u, ad::reshape(hvec, {B, cfg.hyper_ch, 1, 1}));
  ad::Value logits = ad::reshape(ad::sum_lastdim(ad::bchw_to_bnc(prod)),
                                   {B, cfg.image_size, cfg.image_size});
  return ad::add(logits, ps.get("seg/dec.ob"));
}

Tensor sample_point_prompts(const Tensor& mask, int n, Rng& rng) {
  if (mask.ndim() != 2) throw std::invalid_argument("sample_point_prompts: mask must be (H,W)");
  if (n < 1) throw std::invalid_argument("sample_point_prompts: need n >= 1");
  const int H = mask.dim(0), W = mask.dim(1);
  std::vector<std::pair<int, int>> fg;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (mask.at({y, x}) > 0.0) fg.emplace_back(y, x);
    }
  }
  if (static_cast<int>(fg.size()) < n) {
    throw std::runtime_error("sample_point_prompts: mask has fewer foreground pixels than requested");
  }
  // Partial Fisher-Yates gives n distinct picks.
  for (int i = 0; i < n; ++i) {
    const int j = i + rng.uniform_int(int(fg.size()) - i);
    std::swap(fg[size_t(i)], fg[size_t(j)]);
  }
  Tensor pts({n, 2});
  for (int i = 0; i < n; ++i) {
    pts.at({i, 0}) = (fg[size_t(i)].second + 0.5) / double(W);
    pts.at({i, 1}) = (fg[size_t(i)].first + 0.5) / double(H);
  }
  return pts;
}

Tensor box_from_mask(const Tensor& mask) {
  if (mask.ndim() != 2) throw std::invalid_argument("box_from_mask: mask must be (H,W)");
  const int H = mask.dim(0), W = mask.dim(1);
  int x0 = W, y0 = H, x1 = -1, y1 = -1;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (mask.at({y, x}) > 0.0) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
    }
  }
  if (x1 < 0) throw std::runtime_error("box_from_mask: empty mask");
  Tensor box({4});
  box[0] = x0 / double(W);
  box[1] = y0 / double(H);
  box[2] = (x1 + 1) / double(W);
  box[3] = (y1 + 1) / double(H);
  return box;
}

Tensor noise_box(const Tensor& box, double scale, Rng& rng) {
  if (box.ndim() != 1 || box.dim(0) != 4) throw std::invalid_argument("noise_box: box must be (4,)");
  if (scale < 0.0) throw std::invalid_argument("noise_box: scale must be non-negative");
  const double w = box[2] - box[0], h = box[3] - box[1];
  if (w <= 0.0 || h <= 0.0) throw std::invalid_argument("noise_box: degenerate input box");
  double cx = 0.5 * (box[0] + box[2]) + rng.uniform(-scale, scale) * 0.5 * w;
  double cy = 0.5 * (box[1] + box[3]) + rng.uniform(-scale, scale) * 0.5 * h;
  const double nw = w * (1.0 + rng.uniform(-scale, scale));
  const double nh = h * (1.0 + rng.uniform(-scale, scale));
  Tensor out({4});
  out[0] = std::clamp(cx - 0.5 * nw, 0.0, 1.0);
  out[1] = std::clamp(cy - 0.5 * nh, 0.0, 1.0);
  out[2] = std::clamp(cx + 0.5 * nw, 0.0, 1.0);
  out[3] = std::clamp(cy + 0.5 * nh, 0.0, 1.0);
  if (out[2] - out[0] < 1e-6 || out[3] - out[1] < 1e-6) {
    throw std::runtime_error("noise_box: jittered box degenerated after clipping");
  }
  return out;
}

double pretrain_segmenter(ParamStore& ps, const SegConfig& cfg,
                          const std::vector<Tensor>& images,
                          const std::vector<Tensor>& masks,
                          const SegPretrainOpts& opts, Rng& rng) {
  if (images.size() != masks.size()) {
    throw std::invalid_argument("pretrain_segmenter: image/mask count mismatch");
  }
  if (opts.iters > 0 && images.empty()) {
    throw std::invalid_argument("pretrain_segmenter: no training samples");
  }
  const int S = cfg.image_size;
  AdamW opt;
  opt.lr = opts.lr;
  double ema = 0.0;
  bool ema_init = false;
  for (int it = 0; it < opts.iters; ++it) {
    const int B = std::min<int>(opts.batch, int(images.size()));
    Tensor xb({B, 3, S, S});
    Tensor mb({B, S, S});
    Tensor pb({B, cfg.n_points, 2});
    for (int b = 0; b < B; ++b) {
      const size_t idx = size_t(rng.uniform_int(int(images.size())));
      const Tensor& im = images[idx];
      const Tensor& mk = masks[idx];
      std::copy(im.data.begin(), im.data.end(), xb.data.begin() + int64_t(b) * im.numel());
      std::copy(mk.data.begin(), mk.data.end(), mb.data.begin() + int64_t(b) * mk.numel());
      Tensor pts = sample_point_prompts(mk, cfg.n_points, rng);
      std::copy(pts.data.begin(), pts.data.end(), pb.data.begin() + int64_t(b) * pts.numel());
    }
    ad::Value z = encode_image(ps, cfg, ad::constant(xb));
    ad::Value pe = encode_points(ps, cfg, ad::constant(pb));
    ad::Value logits = decode_mask(ps, cfg, z, pe);
    ad::Value loss = seg_loss(logits, ad::constant(mb));
    ps.zero_grad();
    ad::backward(loss);
    clip_grad_norm(ps, opts.clip_norm);
    opt.step(ps);
    const double lv = loss->val[0];
    ema = ema_init ? 0.98 * ema + 0.02 * lv : lv;
    ema_init = true;
    if (opts.verbose && (it % opts.log_every == 0 || it + 1 == opts.iters)) {
      std::fprintf(stderr, "[seg-pretrain] iter %d loss %.4f (ema %.4f)\n", it, lv, ema);
    }
  }
  // The latent space is now fixed: everything downstream (denoiser corpus,
  // enhancement, scoring) assumes these two stay frozen.
  ps.set_trainable_prefix("seg/enc.", false);
  ps.set_trainable_prefix("seg/pen.", false);
  return ema;
}

}  // namespace glesam
