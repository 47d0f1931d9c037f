#pragma once
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "glesam/autodiff.hpp"

namespace glesam {

// Named parameter registry. Parameters are long-lived autodiff leaves; the
// name hierarchy ("unet/...", "dpm/...", "seg/...") is what checkpoints,
// trainable-subset selection, and the optimizer key off.
class ParamStore {
public:
    ad::Value add(const std::string& name, Tensor init, bool trainable);
    // Replace an existing entry (keeps registration order semantics simple:
    // map is ordered by name anyway).
    ad::Value replace(const std::string& name, Tensor value, bool trainable);
    void remove(const std::string& name);

    bool has(const std::string& name) const { return params_.count(name) != 0; }
    ad::Value get(const std::string& name) const;       // throws if missing
    Tensor& value(const std::string& name);             // throws if missing
    const Tensor& value(const std::string& name) const;

    void set_trainable(const std::string& name, bool trainable);
    void set_trainable_prefix(const std::string& prefix, bool trainable);
    bool trainable(const std::string& name) const;

    std::vector<std::string> names(const std::string& prefix = "") const;
    std::vector<std::string> trainable_names(const std::string& prefix = "") const;
    int64_t numel(const std::string& prefix = "", bool trainable_only = false) const;

    void zero_grad();

private:
    std::map<std::string, ad::Value> params_;
    std::map<std::string, bool> trainable_;
};

// AdamW with decoupled weight decay; state is keyed by parameter name so it
// survives trainable-set changes.
struct AdamW {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;

    void step(ParamStore& store);

private:
    int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

// Global-norm gradient clipping over the trainable set; returns the
// pre-clipping norm.
double clip_grad_norm(ParamStore& store, double max_norm);

// ---- checkpoints ----
// Binary flat archive ("GLCK" magic, f32 payload) plus a JSON sidecar
// (<path>.json) carrying run metadata and per-parameter trainable flags.
struct CheckpointMeta {
    std::string config_hash;
    std::string stage;        // e.g. "denoiser-pretrain", "stage1", "stage2"
    int64_t iteration = 0;
    std::map<std::string, std::string> extra;  // free-form (e.g. cre_k, lora_rank)
};

void save_checkpoint(const std::string& path, const ParamStore& store, const CheckpointMeta& meta);

// Loads into an existing store: every archive entry must match a registered
// parameter in name and shape, and vice versa (restricted by `prefix` when
// non-empty). Throws std::runtime_error with a precise message otherwise.
CheckpointMeta load_checkpoint(const std::string& path, ParamStore& store,
                               const std::string& prefix = "");

// Reads only the sidecar metadata.
CheckpointMeta read_checkpoint_meta(const std::string& path);

}  // namespace glesam
