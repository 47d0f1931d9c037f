// glesam: desk-scale latent-enhancement segmentation pipeline.
//
//   glesam <verb> [--config run.json] [overrides...]
//
// Verbs: synth, pretrain-denoiser, pretrain-seg, train-unet, train-decoder,
// eval, infer, ablate, report. A JSON config file is the source of truth for
// run parameters; command-line flags override individual fields. Checkpoints
// are flat binary archives with a JSON sidecar; each stage reads the previous
// stage's archive and writes its own.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "glesam/dpm.hpp"
#include "glesam/image.hpp"
#include "glesam/params.hpp"
#include "glesam/seg.hpp"
#include "glesam/synth.hpp"
#include "glesam/train.hpp"
#include "glesam/unet.hpp"

namespace fs = std::filesystem;
using namespace glesam;

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

// Optional per-field overrides applied on top of the config file.
struct Overrides {
  std::optional<uint64_t> seed;
  std::optional<std::string> data_dir;
  std::optional<double> gamma;
  std::optional<int> t_step, t_max, n1, n2, batch, n_points;
  std::optional<double> lr, box_noise;
  std::optional<std::string> ft_mode, prompt_mode, cre;
  bool no_gle = false, no_fda = false, no_dae = false, direct_score = false;

  void apply(RunConfig& cfg) const {
    if (seed) cfg.seed = *seed;
    if (data_dir) cfg.data_dir = *data_dir;
    if (gamma) cfg.gamma = *gamma;
    if (t_step) cfg.t_step = *t_step;
    if (t_max) cfg.t_max = *t_max;
    if (n1) cfg.n1 = *n1;
    if (n2) cfg.n2 = *n2;
    if (batch) cfg.batch = *batch;
    if (n_points) {
      cfg.n_points = *n_points;
      cfg.seg.n_points = *n_points;
    }
    if (lr) cfg.lr = *lr;
    if (box_noise) cfg.box_noise = *box_noise;
    if (ft_mode) cfg.ft_mode = ft_mode_from_string(*ft_mode);
    if (prompt_mode) cfg.prompt_mode = prompt_mode_from_string(*prompt_mode);
    if (cre) cfg.ablation.cre = cre_mode_from_string(*cre);
    if (no_gle) cfg.ablation.gle = false;
    if (no_fda) cfg.ablation.fda = false;
    if (no_dae) cfg.ablation.dae = false;
    if (direct_score) cfg.ablation.direct_score = true;
  }
};

void add_override_flags(CLI::App* cmd, Overrides& ov) {
  cmd->add_option("--seed", ov.seed, "RNG seed");
  cmd->add_option("--data-dir", ov.data_dir, "dataset root");
  cmd->add_option("--gamma", ov.gamma, "latent scaling factor");
  cmd->add_option("--t-step", ov.t_step, "one-step denoising timestep");
  cmd->add_option("--t-max", ov.t_max, "upper calibration timestep");
  cmd->add_option("--n1", ov.n1, "stage-1 iterations");
  cmd->add_option("--n2", ov.n2, "stage-2 iterations");
  cmd->add_option("--lr", ov.lr, "learning rate");
  cmd->add_option("--batch", ov.batch, "batch size");
  cmd->add_option("--n-points", ov.n_points, "point prompts per sample");
  cmd->add_option("--box-noise", ov.box_noise, "noisy-box jitter scale");
  cmd->add_option("--ft-mode", ov.ft_mode, "stage-2 target: decoder|token");
  cmd->add_option("--prompt-mode", ov.prompt_mode, "points|box|noisy-box");
  cmd->add_option("--cre", ov.cre, "channel expansion: replicate|new-head-tail|adapter");
  cmd->add_flag("--no-gle", ov.no_gle, "disable latent enhancement");
  cmd->add_flag("--no-fda", ov.no_fda, "disable frequency-distribution alignment");
  cmd->add_flag("--no-dae", ov.no_dae, "disable adaptive enhancement strength");
  cmd->add_flag("--direct-s", ov.direct_score, "use the raw score as the strength");
}

RunConfig make_config(const std::string& config_path, const Overrides& ov) {
  RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::from_json(read_file(config_path));
  ov.apply(cfg);
  return cfg;
}

// ---- checkpoint plumbing ----------------------------------------------------

// The sidecar's `extra` records which component groups the archive holds, so a
// fresh process can rebuild the exact store layout before loading weights.
void save_store(const std::string& path, const ParamStore& ps, const RunConfig& cfg,
                const std::string& stage, int64_t iteration) {
  CheckpointMeta meta;
  meta.config_hash = cfg.hash();
  meta.stage = stage;
  meta.iteration = iteration;
  meta.extra["cre_k"] = std::to_string(cfg.unet.cre_k);
  meta.extra["cre_mode"] = to_string(cfg.unet.cre_mode);
  if (has_lora(ps)) meta.extra["lora"] = "1";
  if (!ps.names("dpm/").empty()) meta.extra["dpm"] = "1";
  if (!ps.names("seg/").empty()) meta.extra["seg"] = "1";
  if (fs::path(path).has_parent_path()) {
    fs::create_directories(fs::path(path).parent_path());
  }
  save_checkpoint(path, ps, meta);
}

ParamStore load_store(const std::string& path, RunConfig& cfg, CheckpointMeta* meta_out = nullptr) {
  const CheckpointMeta meta = read_checkpoint_meta(path);
  ParamStore ps;
  Rng rng(cfg.seed ^ 0x10adu);  // shapes only; values are overwritten by the load
  init_mini_unet(ps, cfg.unet, rng);
  if (meta.extra.count("cre_k")) {
    const int k = std::stoi(meta.extra.at("cre_k"));
    if (k > 1 && cfg.unet.cre_k == 1) {
      const CreMode mode = meta.extra.count("cre_mode")
                               ? cre_mode_from_string(meta.extra.at("cre_mode"))
                               : cfg.ablation.cre;
      cre_expand(ps, cfg.unet, k, mode);
    }
  }
  if (meta.extra.count("lora")) attach_lora(ps, cfg.unet, cfg.lora, rng);
  if (meta.extra.count("dpm")) init_dpm(ps, cfg.dpm, rng);
  if (meta.extra.count("seg")) init_segmenter(ps, cfg.seg, rng);
  load_checkpoint(path, ps);
  if (!meta.config_hash.empty() && meta.config_hash != cfg.hash()) {
    std::fprintf(stderr,
                 "note: config hash %s differs from checkpoint hash %s "
                 "(flag overrides or an edited config)\n",
                 cfg.hash().c_str(), meta.config_hash.c_str());
  }
  if (meta_out) *meta_out = meta;
  return ps;
}

std::vector<int> parse_levels(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

std::vector<PromptMode> parse_modes(const std::string& csv) {
  std::vector<PromptMode> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(prompt_mode_from_string(item));
  return out;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "preset     IoU@strongest  clean-score  per-level mean scores\n";
  for (const auto& r : rows) {
    char line[160];
    std::snprintf(line, sizeof line, "%-10s %13.4f  %11.4f  ", r.preset.c_str(), r.lq_top_iou,
                  r.clean_score);
    out << line;
    for (const auto& [lvl, s] : r.mean_score) {
      std::snprintf(line, sizeof line, "L%d=%.4f ", lvl, s);
      out << line;
    }
    out << "\n";
  }
  return out.str();
}

std::string aggregate_table(const EvalReport& rep) {
  std::ostringstream out;
  out << "prompt-mode  level  count    IoU   Dice     PA  mean-score\n";
  for (const auto& a : rep.aggregates) {
    char line[160];
    std::snprintf(line, sizeof line, "%-11s  %5d  %5d  %5.3f  %5.3f  %5.3f  %10.4f\n",
                  a.prompt_mode.c_str(), a.level, a.count, a.iou, a.dice, a.pixel_acc,
                  a.mean_score);
    out << line;
  }
  if (!rep.missing.empty()) {
    out << "skipped samples (unreadable files):\n";
    for (const auto& m : rep.missing) out << "  " << m << "\n";
  }
  return out.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent-enhanced prompt segmentation pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  bool verbose = false;
  app.add_option("--config", config_path, "JSON run-config file")->check(CLI::ExistingFile);
  app.add_flag("-v,--verbose", verbose, "log training progress to stderr");

  Overrides ov;

  // synth
  auto* c_synth = app.add_subcommand("synth", "generate the degradation dataset");
  std::string synth_out;
  int n_train = 160, n_test = 48;
  std::string levels_csv = "1,2,3";
  c_synth->add_option("--out", synth_out, "output directory (default: config data_dir)");
  c_synth->add_option("--n-train", n_train, "training samples");
  c_synth->add_option("--n-test", n_test, "held-out samples");
  c_synth->add_option("--levels", levels_csv, "comma-separated degradation levels");

  // pretrain-denoiser
  auto* c_pden = app.add_subcommand("pretrain-denoiser", "pretrain the narrow denoiser");
  std::string pden_out = "ckpt/denoiser.glck";
  c_pden->add_option("--out", pden_out, "checkpoint to write");

  // pretrain-seg
  auto* c_pseg = app.add_subcommand("pretrain-seg", "pretrain the promptable segmenter");
  std::string pseg_in, pseg_out = "ckpt/pretrained.glck";
  c_pseg->add_option("--in", pseg_in, "denoiser checkpoint to extend")->check(CLI::ExistingFile);
  c_pseg->add_option("--out", pseg_out, "checkpoint to write");

  // train-unet
  auto* c_s1 = app.add_subcommand("train-unet", "stage 1: adapters + degradation scorer");
  std::string s1_in = "ckpt/pretrained.glck", s1_out = "ckpt/stage1.glck";
  c_s1->add_option("--in", s1_in, "pretrained checkpoint")->check(CLI::ExistingFile);
  c_s1->add_option("--out", s1_out, "checkpoint to write");

  // train-decoder
  auto* c_s2 = app.add_subcommand("train-decoder", "stage 2: decoder fine-tune");
  std::string s2_in = "ckpt/stage1.glck", s2_out = "ckpt/stage2.glck";
  c_s2->add_option("--in", s2_in, "stage-1 checkpoint")->check(CLI::ExistingFile);
  c_s2->add_option("--out", s2_out, "checkpoint to write");

  // eval
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string ev_in = "ckpt/stage2.glck", ev_split = "test", ev_modes = "points";
  std::string ev_report = "reports/eval.json", ev_plots;
  c_eval->add_option("--in", ev_in, "checkpoint")->check(CLI::ExistingFile);
  c_eval->add_option("--split", ev_split, "train|test");
  c_eval->add_option("--modes", ev_modes, "comma-separated prompt modes");
  c_eval->add_option("--report", ev_report, "report JSON path");
  c_eval->add_option("--plots", ev_plots, "directory for chart PNGs");

  // infer
  auto* c_inf = app.add_subcommand("infer", "segment one image");
  std::string in_ckpt = "ckpt/stage2.glck", in_image, in_prompt, in_out = "mask.png";
  c_inf->add_option("--in", in_ckpt, "checkpoint")->check(CLI::ExistingFile);
  c_inf->add_option("--image", in_image, "input PNG")->required()->check(CLI::ExistingFile);
  c_inf->add_option("--prompt", in_prompt, "prompt JSON ({\"points\":[[x,y],..]} or {\"box\":[..]})")
      ->required()
      ->check(CLI::ExistingFile);
  c_inf->add_option("--out", in_out, "mask PNG to write");

  // ablate
  auto* c_abl = app.add_subcommand("ablate", "run the component study");
  std::string abl_in = "ckpt/pretrained.glck", abl_out = "reports/ablation.json";
  c_abl->add_option("--in", abl_in, "pretrained checkpoint")->check(CLI::ExistingFile);
  c_abl->add_option("--out", abl_out, "result JSON path");

  // report
  auto* c_rep = app.add_subcommand("report", "tables + plots from an eval report");
  std::string rep_in = "reports/eval.json", rep_dir = "reports";
  c_rep->add_option("--in", rep_in, "eval report JSON")->check(CLI::ExistingFile);
  c_rep->add_option("--out-dir", rep_dir, "output directory");

  for (auto* cmd : {c_synth, c_pden, c_pseg, c_s1, c_s2, c_eval, c_inf, c_abl, c_rep}) {
    add_override_flags(cmd, ov);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = make_config(config_path, ov);
    const NoiseSchedule ns = cfg.schedule();

    if (c_synth->parsed()) {
      const std::string out = synth_out.empty() ? cfg.data_dir : synth_out;
      SynthConfig scfg;
      scfg.image_size = cfg.seg.image_size;
      const DatasetManifest man =
          build_dataset(n_train, n_test, parse_levels(levels_csv), cfg.seed, out, scfg);
      std::printf("wrote %zu records to %s (train %d, test %d)\n", man.records.size(),
                  out.c_str(), n_train, n_test);
      return 0;
    }

    if (c_pden->parsed()) {
      ParamStore ps;
      Rng rng = Rng(cfg.seed).fork(fnv1a("pretrain-denoiser"));
      init_mini_unet(ps, cfg.unet, rng);
      const double loss = pretrain_denoiser(ps, cfg.unet, ns, cfg.den_pretrain, rng, verbose);
      save_store(pden_out, ps, cfg, "denoiser-pretrain", cfg.den_pretrain.iters);
      std::printf("denoiser pretrained (final loss %.4f) -> %s\n", loss, pden_out.c_str());
      return 0;
    }

    if (c_pseg->parsed()) {
      ParamStore ps;
      Rng rng = Rng(cfg.seed).fork(fnv1a("pretrain-seg"));
      if (!pseg_in.empty()) {
        ps = load_store(pseg_in, cfg);
      } else {
        init_mini_unet(ps, cfg.unet, rng);
      }
      // expand the denoiser to the segmenter's channel count before the
      // adapters so a single archive carries the whole model from here on
      if (cfg.unet.cre_k == 1) {
        cre_expand(ps, cfg.unet, cfg.seg.channels / cfg.unet.in_channels, cfg.ablation.cre);
      }
      if (!has_lora(ps)) attach_lora(ps, cfg.unet, cfg.lora, rng);
      if (ps.names("dpm/").empty()) init_dpm(ps, cfg.dpm, rng);
      init_segmenter(ps, cfg.seg, rng);

      const DatasetManifest man = DatasetManifest::load(cfg.data_dir + "/manifest.json");
      const SampleSet train = load_split(man, cfg.data_dir, "train");
      SegPretrainOpts opts = cfg.seg_pretrain;
      opts.verbose = verbose;
      const double loss = pretrain_segmenter(ps, cfg.seg, train.hq, train.mask, opts, rng);
      save_store(pseg_out, ps, cfg, "seg-pretrain", opts.iters);
      std::printf("segmenter pretrained (final loss %.4f) -> %s\n", loss, pseg_out.c_str());
      return 0;
    }

    if (c_s1->parsed()) {
      ParamStore ps = load_store(s1_in, cfg);
      const DatasetManifest man = DatasetManifest::load(cfg.data_dir + "/manifest.json");
      const SampleSet train = load_split(man, cfg.data_dir, "train");
      Rng rng = Rng(cfg.seed).fork(fnv1a("stage1"));
      const TrainCurve curve = train_unet_stage(ps, cfg, ns, train, rng, verbose);
      save_store(s1_out, ps, cfg, "stage1", cfg.n1);
      std::printf("stage 1 done: recon loss %.5f -> %.5f over %d iters -> %s\n",
                  curve.first_window, curve.last_window, cfg.n1, s1_out.c_str());
      return 0;
    }

    if (c_s2->parsed()) {
      ParamStore ps = load_store(s2_in, cfg);
      const DatasetManifest man = DatasetManifest::load(cfg.data_dir + "/manifest.json");
      const SampleSet train = load_split(man, cfg.data_dir, "train");
      Rng rng = Rng(cfg.seed).fork(fnv1a("stage2"));
      const TrainCurve curve = train_decoder_stage(ps, cfg, ns, train, rng, verbose);
      save_store(s2_out, ps, cfg, "stage2", cfg.n2);
      std::printf("stage 2 done: seg loss %.4f -> %.4f over %d iters -> %s\n",
                  curve.first_window, curve.last_window, cfg.n2, s2_out.c_str());
      return 0;
    }

    if (c_eval->parsed()) {
      ParamStore ps = load_store(ev_in, cfg);
      const DatasetManifest man = DatasetManifest::load(cfg.data_dir + "/manifest.json");
      std::vector<std::string> missing;
      const SampleSet split = load_split(man, cfg.data_dir, ev_split, &missing);
      const EvalReport rep = evaluate(ps, cfg, ns, split, parse_modes(ev_modes), missing);
      save_eval_report(rep, ev_report);
      if (!ev_plots.empty()) save_report_plots(rep, ev_plots);
      std::fputs(aggregate_table(rep).c_str(), stdout);
      std::printf("report -> %s\n", ev_report.c_str());
      return 0;
    }

    if (c_inf->parsed()) {
      ParamStore ps = load_store(in_ckpt, cfg);
      const Tensor image = load_image_png(in_image);
      const nlohmann::json pj = nlohmann::json::parse(read_file(in_prompt));
      Tensor prompt;
      if (pj.contains("points")) {
        const auto pts = pj["points"].get<std::vector<std::vector<double>>>();
        cfg.prompt_mode = PromptMode::kPoints;
        cfg.n_points = int(pts.size());
        prompt = Tensor({int(pts.size()), 2});
        for (size_t i = 0; i < pts.size(); ++i) {
          prompt[int64_t(2 * i)] = pts[i].at(0);
          prompt[int64_t(2 * i + 1)] = pts[i].at(1);
        }
      } else if (pj.contains("box")) {
        const auto box = pj["box"].get<std::vector<double>>();
        if (box.size() != 4) throw std::runtime_error("prompt box must have 4 numbers");
        cfg.prompt_mode = PromptMode::kBox;
        prompt = Tensor({4});
        for (int i = 0; i < 4; ++i) prompt[i] = box[size_t(i)];
      } else {
        throw std::runtime_error("prompt file needs a \"points\" or \"box\" key");
      }
      const InferOut out = infer(ps, cfg, ns, image, prompt);
      save_mask_png(in_out, out.mask);
      std::printf("mask -> %s (degradation score %.4f, strength %.4f)\n", in_out.c_str(),
                  out.score, out.eta);
      return 0;
    }

    if (c_abl->parsed()) {
      RunConfig base = cfg;
      ParamStore ps = load_store(abl_in, base);
      const DatasetManifest man = DatasetManifest::load(base.data_dir + "/manifest.json");
      const SampleSet train = load_split(man, base.data_dir, "train");
      const SampleSet test = load_split(man, base.data_dir, "test");
      const std::vector<AblationRow> rows = run_ablation(ps, base, ns, train, test, verbose);
      nlohmann::ordered_json j = nlohmann::ordered_json::array();
      for (const auto& r : rows) {
        nlohmann::ordered_json scores;
        for (const auto& [lvl, s] : r.mean_score) scores[std::to_string(lvl)] = s;
        j.push_back({{"preset", r.preset},
                     {"lq_top_iou", r.lq_top_iou},
                     {"clean_score", r.clean_score},
                     {"mean_score", scores}});
      }
      write_file(abl_out, j.dump(2) + "\n");
      std::fputs(ablation_table(rows).c_str(), stdout);
      std::printf("table -> %s\n", abl_out.c_str());
      return 0;
    }

    if (c_rep->parsed()) {
      const EvalReport rep = EvalReport::from_json(read_file(rep_in));
      fs::create_directories(rep_dir);
      save_report_plots(rep, rep_dir);
      write_file(rep_dir + "/summary.txt", aggregate_table(rep));
      std::fputs(aggregate_table(rep).c_str(), stdout);
      std::printf("plots + summary -> %s\n", rep_dir.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
