#include <cmath>
#include <functional>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include "doctest.h"
#include "glesam/gradcheck.hpp"
#include "glesam/losses.hpp"
#include "glesam/metrics.hpp"
#include "glesam/seg.hpp"
#include "glesam/synth.hpp"

using namespace glesam;

namespace {

// Small configuration so graph-heavy checks stay fast.
SegConfig tiny_cfg() {
  SegConfig cfg;
  cfg.image_size = 16;
  cfg.channels = 8;
  cfg.enc_mid = 4;
  cfg.up_mid = 4;
  cfg.hyper_ch = 4;
  cfg.n_points = 2;
  return cfg;
}

Tensor batch_of(const std::vector<Tensor>& items) {
  std::vector<int> shape = items[0].shape;
  shape.insert(shape.begin(), int(items.size()));
  Tensor out(shape);
  int64_t per = items[0].numel();
  for (size_t i = 0; i < items.size(); ++i) {
    std::copy(items[i].data.begin(), items[i].data.end(),
              out.data.begin() + int64_t(i) * per);
  }
  return out;
}

}  // namespace

TEST_CASE("segmenter shapes: latent grid, prompt tokens, mask logits") {
  ParamStore ps;
  SegConfig cfg = tiny_cfg();
  Rng rng(5);
  init_segmenter(ps, cfg, rng);

  ad::NoGradGuard guard;
  Tensor img = Tensor::rand_uniform(rng, {2, 3, 16, 16}, 0.0, 1.0);
  Tensor z = encode_image(ps, cfg, ad::constant(img))->val;
  CHECK(z.shape == std::vector<int>{2, 8, 4, 4});

  Tensor z2 = encode_image_t(ps, cfg, img);
  for (int64_t i = 0; i < z.numel(); ++i) CHECK(z[i] == z2[i]);

  Tensor pts = Tensor::rand_uniform(rng, {2, 3, 2}, 0.0, 1.0);
  Tensor pe = encode_points(ps, cfg, ad::constant(pts))->val;
  CHECK(pe.shape == std::vector<int>{2, 3, 8});

  Tensor box({2, 4});
  box.data = {0.1, 0.2, 0.6, 0.8, 0.3, 0.3, 0.9, 0.7};
  Tensor be = encode_box(ps, cfg, ad::constant(box))->val;
  CHECK(be.shape == std::vector<int>{2, 2, 8});  // exactly two corner tokens

  Tensor logits = decode_mask(ps, cfg, ad::constant(z), ad::constant(pe))->val;
  CHECK(logits.shape == std::vector<int>{2, 16, 16});
  Tensor logits_box = decode_mask(ps, cfg, ad::constant(z), ad::constant(be))->val;
  CHECK(logits_box.shape == std::vector<int>{2, 16, 16});

  // Determinism.
  Tensor logits_again = decode_mask(ps, cfg, ad::constant(z), ad::constant(pe))->val;
  for (int64_t i = 0; i < logits.numel(); ++i) CHECK(logits[i] == logits_again[i]);

  // Validation.
  CHECK_THROWS_AS((void)encode_image(ps, cfg, ad::constant(Tensor::zeros({2, 3, 8, 8}))),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)encode_points(ps, cfg, ad::constant(Tensor::zeros({2, 3}))),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)encode_box(ps, cfg, ad::constant(Tensor::zeros({2, 3}))),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      (void)decode_mask(ps, cfg, ad::constant(Tensor::zeros({2, 8, 5, 5})), ad::constant(pe)),
      std::invalid_argument);
  CHECK_THROWS_AS(
      (void)decode_mask(ps, cfg, ad::constant(z), ad::constant(Tensor::zeros({3, 2, 8}))),
      std::invalid_argument);
}

TEST_CASE("point prompts: distinct foreground pixels, errors when short") {
  Tensor mask({8, 8});
  std::vector<std::pair<int, int>> fg = {{1, 2}, {3, 4}, {6, 1}, {7, 7}};
  for (auto [y, x] : fg) mask.at({y, x}) = 1.0;

  Rng rng(7);
  Tensor pts = sample_point_prompts(mask, 4, rng);
  CHECK(pts.shape == std::vector<int>{4, 2});
  std::set<std::pair<int, int>> seen;
  for (int i = 0; i < 4; ++i) {
    const int x = int(pts.at({i, 0}) * 8.0);  // centers at (x+0.5)/8
    const int y = int(pts.at({i, 1}) * 8.0);
    CHECK(mask.at({y, x}) == 1.0);
    seen.insert({y, x});
  }
  CHECK(seen.size() == 4);  // no replacement

  CHECK_THROWS_AS(sample_point_prompts(mask, 5, rng), std::runtime_error);
  CHECK_THROWS_AS(sample_point_prompts(Tensor({8, 8}), 1, rng), std::runtime_error);
  CHECK_THROWS_AS(sample_point_prompts(mask, 0, rng), std::invalid_argument);

  // Determinism per seed.
  Rng r1(11), r2(11);
  Tensor a = sample_point_prompts(mask, 3, r1);
  Tensor b = sample_point_prompts(mask, 3, r2);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("box prompts: tight bounds, jitter stays valid, degenerate rejected") {
  Tensor mask({10, 10});
  for (int y = 2; y <= 5; ++y) {
    for (int x = 3; x <= 7; ++x) mask.at({y, x}) = 1.0;
  }
  Tensor box = box_from_mask(mask);
  CHECK(box[0] == doctest::Approx(0.3));
  CHECK(box[1] == doctest::Approx(0.2));
  CHECK(box[2] == doctest::Approx(0.8));
  CHECK(box[3] == doctest::Approx(0.6));

  CHECK_THROWS_AS(box_from_mask(Tensor({10, 10})), std::runtime_error);

  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor nb = noise_box(box, 0.2, rng);
    CHECK(nb[0] >= 0.0);
    CHECK(nb[1] >= 0.0);
    CHECK(nb[2] <= 1.0);
    CHECK(nb[3] <= 1.0);
    CHECK(nb[2] > nb[0]);
    CHECK(nb[3] > nb[1]);
    // center shift bounded by scale * half-extent (0.2 * 0.25 / 0.2 * 0.2),
    // size rescale bounded by [0.8, 1.2]
    CHECK(std::abs((nb[0] + nb[2]) / 2 - 0.55) <= 0.2 * 0.25 + 1e-9);
    CHECK(std::abs((nb[1] + nb[3]) / 2 - 0.40) <= 0.2 * 0.20 + 1e-9);
    CHECK(nb[2] - nb[0] <= 0.5 * 1.2 + 1e-9);
    CHECK(nb[2] - nb[0] >= 0.5 * 0.8 - 1e-9);
  }
  // scale 0 reproduces the box
  Tensor same = noise_box(box, 0.0, rng);
  for (int i = 0; i < 4; ++i) CHECK(same[i] == doctest::Approx(box[i]));

  Tensor degenerate({4});
  degenerate.data = {0.5, 0.5, 0.5, 0.5};
  CHECK_THROWS(noise_box(degenerate, 0.2, rng));
}

TEST_CASE("mask threshold is monotone: higher cutoff never adds pixels") {
  ParamStore ps;
  SegConfig cfg = tiny_cfg();
  Rng rng(13);
  init_segmenter(ps, cfg, rng);
  ad::NoGradGuard guard;
  Tensor img = Tensor::rand_uniform(rng, {1, 3, 16, 16}, 0.0, 1.0);
  Tensor pts = Tensor::rand_uniform(rng, {1, 2, 2}, 0.2, 0.8);
  Tensor logits = decode_mask(ps, cfg, encode_image(ps, cfg, ad::constant(img)),
                              encode_points(ps, cfg, ad::constant(pts)))->val;
  int prev = 1 << 30;
  for (double thr : {-1.0, -0.1, 0.0, 0.1, 1.0}) {
    int count = 0;
    for (double v : logits.data) count += v > thr ? 1 : 0;
    CHECK(count <= prev);
    prev = count;
  }
}

TEST_CASE("segmenter gradients: finite differences through the whole stack") {
  ParamStore ps;
  SegConfig cfg = tiny_cfg();
  Rng rng(17);
  init_segmenter(ps, cfg, rng);

  Tensor img = Tensor::rand_uniform(rng, {2, 3, 16, 16}, 0.05, 0.95);
  Tensor pts = Tensor::rand_uniform(rng, {2, 2, 2}, 0.1, 0.9);
  Tensor target({2, 16, 16});
  for (auto& v : target.data) v = rng.uniform() < 0.4 ? 1.0 : 0.0;

  auto loss_fn = [&] {
    ad::Value z = encode_image(ps, cfg, ad::constant(img));
    ad::Value pe = encode_points(ps, cfg, ad::constant(pts));
    ad::Value logits = decode_mask(ps, cfg, z, pe);
    return seg_loss(logits, ad::constant(target));
  };
  std::vector<std::pair<std::string, ad::Value>> checked;
  for (const std::string& n : ps.names("seg/")) checked.push_back({n, ps.get(n)});
  REQUIRE(checked.size() >= 25);
  ps.zero_grad();
  GradCheckReport rep = grad_check(loss_fn, checked, 2, rng);
  CAPTURE(rep.worst);
  CHECK(rep.checked >= 50);
  CHECK(rep.max_err < 1e-4);  // decoder path pins 1e-4; everything beats it
  CHECK(rep.max_err < 1e-6);
}

TEST_CASE("segmenter pretraining: loss falls on a small overfit set, then freezes encoders") {
  ParamStore ps;
  SegConfig cfg;  // full-size pipeline config
  Rng rng(23);
  init_segmenter(ps, cfg, rng);

  std::vector<Tensor> images, masks;
  for (uint64_t s = 0; s < 16; ++s) {
    auto [img, mask] = gen_shape_sample(s, cfg.image_size);
    images.push_back(img);
    masks.push_back(mask);
  }

  // steps=0: weights untouched, but the encoders still come out frozen.
  ParamStore ps0;
  Rng rng0(23);
  init_segmenter(ps0, cfg, rng0);
  SegPretrainOpts none;
  none.iters = 0;
  pretrain_segmenter(ps0, cfg, images, masks, none, rng0);
  for (const std::string& n : ps0.names("seg/")) {
    const Tensor& a = ps0.value(n);
    const Tensor& b = ps.value(n);
    REQUIRE(a.numel() == b.numel());
    for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == b[i]);
  }
  CHECK(!ps0.trainable("seg/enc.c1.w"));
  CHECK(!ps0.trainable("seg/pen.fr"));
  CHECK(ps0.trainable("seg/dec.token"));

  // First 100 steps of a 16-sample overfit: smoothed loss drops.
  SegPretrainOpts opts;
  opts.iters = 100;
  opts.batch = 8;
  Rng probe(31);
  auto eval_loss = [&] {
    ad::NoGradGuard guard;
    Tensor xb = batch_of(images);
    Tensor mb = batch_of(masks);
    Tensor pb({int(images.size()), cfg.n_points, 2});
    Rng fixed(99);
    for (size_t b = 0; b < images.size(); ++b) {
      Tensor p = sample_point_prompts(masks[b], cfg.n_points, fixed);
      std::copy(p.data.begin(), p.data.end(), pb.data.begin() + int64_t(b) * p.numel());
    }
    ad::Value logits = decode_mask(ps, cfg, encode_image(ps, cfg, ad::constant(xb)),
                                   encode_points(ps, cfg, ad::constant(pb)));
    return seg_loss(logits, ad::constant(mb))->val[0];
  };
  const double before = eval_loss();
  pretrain_segmenter(ps, cfg, images, masks, opts, probe);
  const double after = eval_loss();
  CHECK(after < before);

  CHECK(!ps.trainable("seg/enc.c1.w"));
  CHECK(!ps.trainable("seg/enc.c3.b"));
  CHECK(!ps.trainable("seg/pen.tp"));
  CHECK(ps.trainable("seg/dec.q.w"));
}
