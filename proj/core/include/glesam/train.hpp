#pragma once
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "glesam/dpm.hpp"
#include "glesam/params.hpp"
#include "glesam/rng.hpp"
#include "glesam/schedule.hpp"
#include "glesam/seg.hpp"
#include "glesam/synth.hpp"
#include "glesam/tensor.hpp"
#include "glesam/unet.hpp"

namespace glesam {

// Experiment orchestration: run configuration, the two training stages,
// inference, evaluation with reports/plots, and the component study presets.

// ---- configuration ----------------------------------------------------------

// Which decoder parameters the second stage updates.
enum class FtMode {
  kDecoder,  // the whole mask decoder
  kToken     // only the learned mask token
};
FtMode ft_mode_from_string(const std::string& s);
std::string to_string(FtMode m);

enum class PromptMode { kPoints, kBox, kNoisyBox };
PromptMode prompt_mode_from_string(const std::string& s);
std::string to_string(PromptMode m);

// Switches selecting which enhancement mechanisms are active.
struct AblationSwitches {
  bool gle = true;    // false: bypass enhancement entirely (frozen baseline)
  CreMode cre = CreMode::kReplicate;  // channel-expansion strategy
  bool fda = true;    // false: no amplitude alignment (gamma behaves as 1)
  bool dae = true;    // false: fixed eta = beta_bar(t_step) for every input
  bool direct_score = false;  // true: eta := s, skipping the interpolation
};

// Everything a run needs; every field has a default, and the hash of the
// serialized form is stamped into checkpoints and reports.
struct RunConfig {
  // diffusion schedule
  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  // networks
  UNetConfig unet;   // base denoiser, pre-expansion
  LoraConfig lora;
  DpmConfig dpm;
  SegConfig seg;
  // enhancement strength
  double gamma = 5.0;  // amplitude alignment factor
  int t_step = 50;     // denoiser conditioning step; anchors the eta floor
  int t_max = 900;     // anchors the eta ceiling
  // training
  int n1 = 5000;  // enhancer adaptation iterations (stage 1)
  int n2 = 2000;  // decoder fine-tune iterations (stage 2)
  double lr = 2e-4;
  int batch = 4;
  double clip_norm = 1.0;
  FtMode ft_mode = FtMode::kDecoder;
  // prompts
  PromptMode prompt_mode = PromptMode::kPoints;
  int n_points = 3;
  double box_noise = 0.2;
  // pretraining
  SegPretrainOpts seg_pretrain;
  DenoiserPretrainOpts den_pretrain;
  // data + seeds
  std::string data_dir = "data/lqseg";
  uint64_t seed = 7;
  // mechanism switches
  AblationSwitches ablation;

  DaeRange dae_range(const NoiseSchedule& ns) const {
    return DaeRange::from_schedule(ns, t_step, t_max);
  }
  NoiseSchedule schedule() const { return build_schedule(schedule_steps, beta_start, beta_end); }

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  // 64-bit FNV-1a over the canonical serialized form, as 16 hex digits.
  std::string hash() const;
};

// ---- data access ------------------------------------------------------------

// One split fully loaded into memory: entry i across all vectors refers to the
// same underlying scene; lq holds one aligned vector per degradation level.
struct SampleSet {
  std::vector<std::string> ids;
  std::vector<Tensor> hq;    // (3,S,S) each
  std::vector<Tensor> mask;  // (S,S) each
  std::vector<int> levels;   // sorted distinct levels present
  std::map<int, std::vector<Tensor>> lq;

  int size() const { return int(ids.size()); }
};

// Loads every record of `split`. With `missing` null any unreadable file
// throws; otherwise the affected sample is skipped and its path recorded, and
// loading continues.
SampleSet load_split(const DatasetManifest& man, const std::string& root,
                     const std::string& split, std::vector<std::string>* missing = nullptr);

// Deep copy: fresh parameter leaves with copied values and trainable flags.
ParamStore clone_store(const ParamStore& src);

// ---- enhancement ------------------------------------------------------------

// The configured latent enhancement, no graph: score the batch (when the
// adaptive path is on), map scores to per-sample eta, reconstruct in one step.
struct Enhanced {
  Tensor z;                   // enhanced (or passed-through) latent (B,C,h,h)
  std::vector<double> score;  // empty when the scorer is not consulted
  std::vector<double> eta;    // empty when enhancement is bypassed
};
Enhanced enhance_latent(const ParamStore& ps, const RunConfig& cfg, const NoiseSchedule& ns,
                        const Tensor& z_l);

// ---- training ---------------------------------------------------------------

struct TrainCurve {
  std::vector<double> losses;  // one entry per iteration
  double first_window = 0.0;   // mean over the first 50 iterations
  double last_window = 0.0;    // mean over the last 50 iterations
};

// Stage 1, "adapt the enhancer": for n1 iterations, draw scene batches mixed
// uniformly over {clean, each level}, encode both sides with the frozen
// encoder, predict the score, map to eta, reconstruct, and minimize the MSE
// against the clean latent. Exactly the low-rank adapters and the scorer
// train; every other parameter is frozen for the duration. A non-finite loss
// aborts via std::runtime_error with the store rolled back to the last
// finite-loss iterate. Requires ablation.gle.
TrainCurve train_unet_stage(ParamStore& ps, const RunConfig& cfg, const NoiseSchedule& ns,
                            const SampleSet& train, Rng& rng, bool verbose = false);

// Stage 2, "adapt the decoder": for n2 iterations, alternate clean and
// degraded batches (half/half), enhance their latents with the frozen stage-1
// result (clean ones too — the decoder must tolerate the enhancer's imprint
// on already-clean inputs), sample fresh prompts each iteration, and minimize
// the segmentation loss. Trains the decoder (kDecoder) or only the mask token
// (kToken); encoder, prompt encoder, denoiser, and scorer stay bit-identical.
TrainCurve train_decoder_stage(ParamStore& ps, const RunConfig& cfg, const NoiseSchedule& ns,
                               const SampleSet& train, Rng& rng, bool verbose = false);

// ---- inference --------------------------------------------------------------

struct InferOut {
  Tensor mask;         // (S,S) binary
  double score = 0.0;  // 0 when the scorer is not consulted
  double eta = 0.0;    // 0 when enhancement is bypassed
};

// Promptable inference on one image: encode, enhance, decode, threshold at 0.
// `prompt` is (P,2) normalized points in kPoints mode, else a (4,) normalized
// box. Deterministic.
InferOut infer(const ParamStore& ps, const RunConfig& cfg, const NoiseSchedule& ns,
               const Tensor& image, const Tensor& prompt);

// ---- evaluation -------------------------------------------------------------

struct EvalRow {
  std::string id;
  int level = 0;  // 0 = clean
  std::string prompt_mode;
  double iou = 0.0, dice = 0.0, pixel_acc = 0.0;
  double score = 0.0, eta = 0.0;
};

struct EvalAggregate {
  int level = 0;
  std::string prompt_mode;
  int count = 0;
  double iou = 0.0, dice = 0.0, pixel_acc = 0.0, mean_score = 0.0;
};

struct EvalReport {
  std::string config_hash;
  double wall_seconds = 0.0;
  std::vector<std::string> missing;  // inputs skipped during loading
  std::vector<EvalRow> rows;
  std::vector<EvalAggregate> aggregates;  // means of rows per level x mode

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
};

// Runs inference over the whole set at level 0 (clean) plus every degradation
// level, once per prompt mode. Prompts are seeded per sample id, so two calls
// produce identical reports. Aggregates are computed from the rows.
EvalReport evaluate(const ParamStore& ps, const RunConfig& cfg, const NoiseSchedule& ns,
                    const SampleSet& test, const std::vector<PromptMode>& modes,
                    const std::vector<std::string>& missing = {});

void save_eval_report(const EvalReport& report, const std::string& json_path);
// Summary plots: metric-vs-level curves per prompt mode and per-level score
// histograms, written as PNGs under out_dir.
void save_report_plots(const EvalReport& report, const std::string& out_dir);

// ---- component study --------------------------------------------------------

enum class AblationPreset {
  kBaseline,    // enhancement off
  kGleCre,      // reconstruction on, no amplitude alignment, fixed eta
  kFda,         // + amplitude alignment
  kDae,         // + score-adaptive eta
  kDirectScore  // adaptive, but eta := s
};
std::vector<AblationPreset> standard_presets();  // the five rows above
std::string to_string(AblationPreset p);
AblationSwitches switches_for(AblationPreset p);

struct AblationRow {
  std::string preset;
  double lq_top_iou = 0.0;             // IoU at the strongest level
  std::map<int, double> mean_score;    // level -> mean score (adaptive rows)
  double clean_score = 0.0;            // mean score on clean inputs
};

// Runs stage 1 once per preset, starting each run from a deep copy of the
// same pretrained store and an identical seed, then evaluates IoU at the
// strongest level with the *original* decoder (no stage 2), so rows differ
// only in the enhancement mechanism.
std::vector<AblationRow> run_ablation(const ParamStore& pretrained, const RunConfig& cfg,
                                      const NoiseSchedule& ns, const SampleSet& train,
                                      const SampleSet& test, bool verbose = false);

}  // namespace glesam
