#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "glesam/autodiff.hpp"
#include "glesam/params.hpp"
#include "glesam/rng.hpp"
#include "glesam/tensor.hpp"

namespace glesam {

// Toy promptable segmenter: a small convolutional image encoder (frozen after
// pretraining), a Fourier-feature prompt encoder, and a cross-attention mask
// decoder with a hypernetwork head. Parameters live under "seg/".

struct SegConfig {
  int image_size = 64;
  int channels = 32;   // latent and token width; the latent grid is image_size/4
  int enc_mid = 16;    // encoder stem width
  int up_mid = 16;     // first upsampling width in the decoder
  int hyper_ch = 8;    // per-pixel embedding width for the hypernetwork head
  int n_points = 3;    // default point prompts per mask
  int latent_hw() const { return image_size / 4; }
};

// Registers all segmenter parameters: "seg/enc.*" (image encoder),
// "seg/pen.*" (prompt encoder), "seg/dec.*" (mask decoder).
void init_segmenter(ParamStore& ps, const SegConfig& cfg, Rng& rng);

// (B,3,S,S) image in [0,1] -> latent (B,C,S/4,S/4).
ad::Value encode_image(const ParamStore& ps, const SegConfig& cfg, ad::Value img);
// Convenience: forward without building a graph.
Tensor encode_image_t(const ParamStore& ps, const SegConfig& cfg, const Tensor& img);

// Point prompts (B,P,2), normalized (x,y) in [0,1] -> tokens (B,P,C).
ad::Value encode_points(const ParamStore& ps, const SegConfig& cfg, ad::Value pts);
// Box prompt (B,4) as normalized (x0,y0,x1,y1) -> exactly two corner tokens (B,2,C).
ad::Value encode_box(const ParamStore& ps, const SegConfig& cfg, ad::Value box);

// Latent (B,C,S/4,S/4) + prompt tokens (B,P,C) -> mask logits (B,S,S).
// Foreground is logit > 0.
ad::Value decode_mask(const ParamStore& ps, const SegConfig& cfg, ad::Value z,
                      ad::Value prompts);

// ---- prompt synthesis ----

// n distinct foreground pixel centers as normalized (x,y) rows, shape (n,2),
// sampled without replacement. Throws when the mask has fewer foreground
// pixels than n.
Tensor sample_point_prompts(const Tensor& mask, int n, Rng& rng);

// Tight normalized (x0,y0,x1,y1) around the foreground; throws on an empty mask.
Tensor box_from_mask(const Tensor& mask);

// Jittered box: the center moves by up to ±scale·half-extent and each side
// rescales by a factor in [1-scale, 1+scale], independently per axis; the
// result is clipped to [0,1]. Throws when the jittered box degenerates.
Tensor noise_box(const Tensor& box, double scale, Rng& rng);

// ---- pretraining ----

struct SegPretrainOpts {
  int iters = 1500;
  int batch = 8;
  double lr = 1e-3;
  double clip_norm = 1.0;
  int log_every = 300;
  bool verbose = false;
};

// Joint pretraining of encoder + prompt encoder + decoder on clean scenes
// with point prompts under the segmentation loss. Afterwards the image and
// prompt encoders are marked frozen (their weights define the latent space
// every later stage builds on); iters=0 changes no weights but still applies
// the freeze. Returns a smoothed final loss.
double pretrain_segmenter(ParamStore& ps, const SegConfig& cfg,
                          const std::vector<Tensor>& images,
                          const std::vector<Tensor>& masks,
                          const SegPretrainOpts& opts, Rng& rng);

}  // namespace glesam
