#pragma once
#include <string>
#include <vector>

#include "glesam/params.hpp"
#include "glesam/rng.hpp"
#include "glesam/schedule.hpp"

namespace glesam {

// Channel expansion strategy for adapting the base denoiser (in_channels I/O)
// to a k-times wider feature latent.
enum class CreMode {
    kReplicate,    // tile pretrained head along input channels and tail along
                   // output channels; both stay frozen
    kNewHeadTail,  // fresh, trainable head/tail at the expanded width
    kAdapterCodec  // keep the original head/tail frozen; trainable 1x1
                   // down/up adapters around them
};

CreMode cre_mode_from_string(const std::string& s);
std::string to_string(CreMode m);

// Compact diffusion U-Net: 16x16 -> 8x8 -> 4x4 with residual blocks,
// self-attention at 8x8 and in the middle, sinusoidal time embedding.
struct UNetConfig {
    int in_channels = 4;   // base I/O channels (pre-expansion)
    int base_width = 32;   // channels at 16x16
    int mid_width = 64;    // channels at 8x8 and 4x4
    int time_dim = 64;
    int norm_groups = 8;
    // set by cre_expand:
    int cre_k = 1;
    CreMode cre_mode = CreMode::kReplicate;

    int io_channels() const;  // in_channels * cre_k
};

struct LoraConfig {
    int rank = 8;
    double alpha = 8.0;
    double init_sd = 0.01;  // for the A factor; B starts at zero
};

// Registers all base U-Net parameters under "unet/". The final conv starts at
// zero so an untrained net predicts zero noise.
void init_mini_unet(ParamStore& ps, const UNetConfig& cfg, Rng& rng);

// Expands the pretrained base so it consumes/produces io_channels() = k * in.
// Mutates the store and the config. Must be called before attach_lora.
void cre_expand(ParamStore& ps, UNetConfig& cfg, int k, CreMode mode);

// Adds low-rank adapters (trainable) to every attention projection (q,k,v,o)
// of every attention block. The base weights' trainable flags are untouched.
void attach_lora(ParamStore& ps, const UNetConfig& cfg, const LoraConfig& lora, Rng& rng);
bool has_lora(const ParamStore& ps);

// Names of the attention blocks carrying LoRA targets, as store prefixes.
std::vector<std::string> attention_prefixes();

// eps_hat = UNet(z, t). z: (B, io_channels, 16, 16); t: one timestep per
// batch item, each in [1, schedule steps].
ad::Value predict_noise(const ParamStore& ps, const UNetConfig& cfg, ad::Value z,
                        const std::vector<int>& t);

// Convenience adapters for the enhancement entry points (fixed t per call).
DenoiseFn make_denoiser(const ParamStore& ps, const UNetConfig& cfg);
DenoiseGraphFn make_denoiser_graph(const ParamStore& ps, const UNetConfig& cfg);

// Denoiser pretraining on an in-memory corpus of smooth random fields whose
// amplitude matches `corpus_std`. Standard DDPM objective: sample t and eps,
// noise the field, regress eps with MSE. Returns the final running loss.
struct DenoiserPretrainOpts {
    int iters = 1500;
    int batch = 8;
    double lr = 2e-4;
    double corpus_std = 1.5;
    int corpus_size = 256;
    double smooth_sigma = 2.0;  // gaussian smoothing of the corpus fields
    double clip_norm = 1.0;
    int log_every = 200;
};
double pretrain_denoiser(ParamStore& ps, const UNetConfig& cfg, const NoiseSchedule& ns,
                         const DenoiserPretrainOpts& opts, Rng& rng, bool verbose = false);

}  // namespace glesam
