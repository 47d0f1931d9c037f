#pragma once
#include "glesam/params.hpp"
#include "glesam/rng.hpp"

namespace glesam {

// Degradation scorer: maps a (possibly degraded) latent to a quality score
// s in (0,1), higher = more degraded. Two branches share an attention map:
// a depthwise spatial branch and a Fourier-amplitude branch are fused by
// addition, squeezed to per-pixel logits, softmax-normalized over the grid,
// and used to pool both branches; the pooled pair feeds a small MLP.
struct DpmConfig {
    int channels = 32;  // latent channels the scorer consumes
    int hidden = 32;    // MLP hidden width
};

void init_dpm(ParamStore& ps, const DpmConfig& cfg, Rng& rng);

// z: (B, channels, H, W) -> scores (B,), each strictly inside (0,1).
ad::Value predict_score(const ParamStore& ps, const DpmConfig& cfg, ad::Value z);

// Convenience: scores for a plain tensor, no graph.
std::vector<double> score_latents(const ParamStore& ps, const DpmConfig& cfg, const Tensor& z);

}  // namespace glesam
