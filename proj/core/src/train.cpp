#include "glesam/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "glesam/image.hpp"
#include "glesam/losses.hpp"
#include "glesam/metrics.hpp"

namespace glesam {
namespace {

using json = nlohmann::ordered_json;

uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

// ---- enum conversions --------------------------------------------------------

FtMode ft_mode_from_string(const std::string& s) {
  if (s == "decoder") return FtMode::kDecoder;
  if (s == "token") return FtMode::kToken;
  throw std::invalid_argument("unknown fine-tune mode: " + s);
}

std::string to_string(FtMode m) { return m == FtMode::kDecoder ? "decoder" : "token"; }

PromptMode prompt_mode_from_string(const std::string& s) {
  if (s == "points") return PromptMode::kPoints;
  if (s == "box") return PromptMode::kBox;
  if (s == "noisy-box") return PromptMode::kNoisyBox;
  throw std::invalid_argument("unknown prompt mode: " + s);
}

std::string to_string(PromptMode m) {
  switch (m) {
    case PromptMode::kPoints: return "points";
    case PromptMode::kBox: return "box";
    default: return "noisy-box";
  }
}

// ---- RunConfig serialization ---------------------------------------------------

std::string RunConfig::to_json() const {
  json j;
  j["schedule_steps"] = schedule_steps;
  j["beta_start"] = beta_start;
  j["beta_end"] = beta_end;
  j["unet"] = {{"in_channels", unet.in_channels}, {"base_width", unet.base_width},
               {"mid_width", unet.mid_width},     {"time_dim", unet.time_dim},
               {"norm_groups", unet.norm_groups}, {"cre_k", unet.cre_k},
               {"cre_mode", glesam::to_string(unet.cre_mode)}};
  j["lora"] = {{"rank", lora.rank}, {"alpha", lora.alpha}, {"init_sd", lora.init_sd}};
  j["dpm"] = {{"channels", dpm.channels}, {"hidden", dpm.hidden}};
  j["seg"] = {{"image_size", seg.image_size}, {"channels", seg.channels},
              {"enc_mid", seg.enc_mid},       {"up_mid", seg.up_mid},
              {"hyper_ch", seg.hyper_ch},     {"n_points", seg.n_points}};
  j["gamma"] = gamma;
  j["t_step"] = t_step;
  j["t_max"] = t_max;
  j["n1"] = n1;
  j["n2"] = n2;
  j["lr"] = lr;
  j["batch"] = batch;
  j["clip_norm"] = clip_norm;
  j["ft_mode"] = glesam::to_string(ft_mode);
  j["prompt_mode"] = glesam::to_string(prompt_mode);
  j["n_points"] = n_points;
  j["box_noise"] = box_noise;
  j["seg_pretrain"] = {{"iters", seg_pretrain.iters},
                       {"batch", seg_pretrain.batch},
                       {"lr", seg_pretrain.lr},
                       {"clip_norm", seg_pretrain.clip_norm},
                       {"log_every", seg_pretrain.log_every}};
  j["den_pretrain"] = {{"iters", den_pretrain.iters},
                       {"batch", den_pretrain.batch},
                       {"lr", den_pretrain.lr},
                       {"corpus_std", den_pretrain.corpus_std},
                       {"corpus_size", den_pretrain.corpus_size},
                       {"smooth_sigma", den_pretrain.smooth_sigma},
                       {"clip_norm", den_pretrain.clip_norm},
                       {"log_every", den_pretrain.log_every}};
  j["data_dir"] = data_dir;
  j["seed"] = seed;
  j["ablation"] = {{"gle", ablation.gle},
                   {"cre", glesam::to_string(ablation.cre)},
                   {"fda", ablation.fda},
                   {"dae", ablation.dae},
                   {"direct_score", ablation.direct_score}};
  return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  RunConfig c;  // defaults fill anything the file leaves out
  c.schedule_steps = j.value("schedule_steps", c.schedule_steps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  if (j.contains("unet")) {
    const json& u = j["unet"];
    c.unet.in_channels = u.value("in_channels", c.unet.in_channels);
    c.unet.base_width = u.value("base_width", c.unet.base_width);
    c.unet.mid_width = u.value("mid_width", c.unet.mid_width);
    c.unet.time_dim = u.value("time_dim", c.unet.time_dim);
    c.unet.norm_groups = u.value("norm_groups", c.unet.norm_groups);
    c.unet.cre_k = u.value("cre_k", c.unet.cre_k);
    c.unet.cre_mode = cre_mode_from_string(u.value("cre_mode", glesam::to_string(c.unet.cre_mode)));
  }
  if (j.contains("lora")) {
    const json& l = j["lora"];
    c.lora.rank = l.value("rank", c.lora.rank);
    c.lora.alpha = l.value("alpha", c.lora.alpha);
    c.lora.init_sd = l.value("init_sd", c.lora.init_sd);
  }
  if (j.contains("dpm")) {
    const json& d = j["dpm"];
    c.dpm.channels = d.value("channels", c.dpm.channels);
    c.dpm.hidden = d.value("hidden", c.dpm.hidden);
  }
  if (j.contains("seg")) {
    const json& s = j["seg"];
    c.seg.image_size = s.value("image_size", c.seg.image_size);
    c.seg.channels = s.value("channels", c.seg.channels);
    c.seg.enc_mid = s.value("enc_mid", c.seg.enc_mid);
    c.seg.up_mid = s.value("up_mid", c.seg.up_mid);
    c.seg.hyper_ch = s.value("hyper_ch", c.seg.hyper_ch);
    c.seg.n_points = s.value("n_points", c.seg.n_points);
  }
  c.gamma = j.value("gamma", c.gamma);
  c.t_step = j.value("t_step", c.t_step);
  c.t_max = j.value("t_max", c.t_max);
  c.n1 = j.value("n1", c.n1);
  c.n2 = j.value("n2", c.n2);
  c.lr = j.value("lr", c.lr);
  c.batch = j.value("batch", c.batch);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.ft_mode = ft_mode_from_string(j.value("ft_mode", glesam::to_string(c.ft_mode)));
  c.prompt_mode = prompt_mode_from_string(j.value("prompt_mode", glesam::to_string(c.prompt_mode)));
  c.n_points = j.value("n_points", c.n_points);
  c.box_noise = j.value("box_noise", c.box_noise);
  if (j.contains("seg_pretrain")) {
    const json& s = j["seg_pretrain"];
    c.seg_pretrain.iters = s.value("iters", c.seg_pretrain.iters);
    c.seg_pretrain.batch = s.value("batch", c.seg_pretrain.batch);
    c.seg_pretrain.lr = s.value("lr", c.seg_pretrain.lr);
    c.seg_pretrain.clip_norm = s.value("clip_norm", c.seg_pretrain.clip_norm);
    c.seg_pretrain.log_every = s.value("log_every", c.seg_pretrain.log_every);
  }
  if (j.contains("den_pretrain")) {
    const json& d = j["den_pretrain"];
    c.den_pretrain.iters = d.value("iters", c.den_pretrain.iters);
    c.den_pretrain.batch = d.value("batch", c.den_pretrain.batch);
    c.den_pretrain.lr = d.value("lr", c.den_pretrain.lr);
    c.den_pretrain.corpus_std = d.value("corpus_std", c.den_pretrain.corpus_std);
    c.den_pretrain.corpus_size = d.value("corpus_size", c.den_pretrain.corpus_size);
    c.den_pretrain.smooth_sigma = d.value("smooth_sigma", c.den_pretrain.smooth_sigma);
    c.den_pretrain.clip_norm = d.value("clip_norm", c.den_pretrain.clip_norm);
    c.den_pretrain.log_every = d.value("log_every", c.den_pretrain.log_every);
  }
  c.data_dir = j.value("data_dir", c.data_dir);
  c.seed = j.value("seed", c.seed);
  if (j.contains("ablation")) {
    const json& a = j["ablation"];
    c.ablation.gle = a.value("gle", c.ablation.gle);
    c.ablation.cre = cre_mode_from_string(a.value("cre", glesam::to_string(c.ablation.cre)));
    c.ablation.fda = a.value("fda", c.ablation.fda);
    c.ablation.dae = a.value("dae", c.ablation.dae);
    c.ablation.direct_score = a.value("direct_score", c.ablation.direct_score);
  }
  return c;
}

std::string RunConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json())));
  return std::string(buf);
}

// ---- data access ---------------------------------------------------------------

SampleSet load_split(const DatasetManifest& man, const std::string& root,
                     const std::string& split, std::vector<std::string>* missing) {
  namespace fs = std::filesystem;
  std::map<std::string, std::map<int, const ManifestRecord*>> by_id;
  std::vector<std::string> order;
  std::set<int> levels;
  for (const auto& r : man.records) {
    if (r.split != split) continue;
    if (!by_id.count(r.id)) order.push_back(r.id);
    by_id[r.id][r.level] = &r;
    levels.insert(r.level);
  }
  SampleSet out;
  out.levels.assign(levels.begin(), levels.end());
  for (const auto& id : order) {
    const auto& recs = by_id[id];
    Tensor hq, mask;
    std::vector<std::pair<int, Tensor>> lqs;
    try {
      const ManifestRecord* first = recs.begin()->second;
      hq = load_image_png((fs::path(root) / first->hq_path).string());
      mask = load_mask_png((fs::path(root) / first->mask_path).string());
      if (int(recs.size()) != int(out.levels.size())) {
        throw std::runtime_error("sample " + id + " lacks records for some levels");
      }
      for (const auto& [lvl, rec] : recs) {
        lqs.emplace_back(lvl, load_image_png((fs::path(root) / rec->lq_path).string()));
      }
    } catch (const std::exception& e) {
      if (!missing) throw;
      missing->push_back(id + ": " + e.what());
      continue;
    }
    out.ids.push_back(id);
    out.hq.push_back(std::move(hq));
    out.mask.push_back(std::move(mask));
    for (auto& [lvl, t] : lqs) out.lq[lvl].push_back(std::move(t));
  }
  return out;
}

ParamStore clone_store(const ParamStore& src) {
  ParamStore dst;
  for (const auto& name : src.names()) {
    dst.add(name, src.value(name), src.trainable(name));
  }
  return dst;
}

// ---- enhancement ---------------------------------------------------------------

Enhanced enhance_latent(const ParamStore& ps, const RunConfig& cfg, const NoiseSchedule& ns,
                        const Tensor& z_l) {
  Enhanced out;
  if (!cfg.ablation.gle) {
    out.z = z_l;
    return out;
  }
  ad::NoGradGuard ng;
  const int B = z_l.shape.at(0);
  const DaeRange range = cfg.dae_range(ns);
  std::vector<double> eta(size_t(B), range.beta_bar_min);
  if (cfg.ablation.dae) {
    out.score = score_latents(ps, cfg.dpm, z_l);
    for (int b = 0; b < B; ++b) {
      eta[size_t(b)] = cfg.ablation.direct_score ? out.score[size_t(b)]
                                                 : eta_from_score(out.score[size_t(b)], range);
    }
  }
  const double gamma = cfg.ablation.fda ? cfg.gamma : 1.0;
  out.z = gle_dae(make_denoiser(ps, cfg.unet), z_l, eta, gamma, cfg.t_step);
  out.eta = std::move(eta);
  return out;
}

// ---- shared training helpers -----------------------------------------------------

namespace {

void copy_row(const Tensor& src, Tensor& dst, int row) {
  std::copy(src.data.begin(), src.data.end(), dst.data.begin() + int64_t(row) * src.numel());
}

void finish_curve(TrainCurve& c) {
  const int n = int(c.losses.size());
  if (n == 0) return;
  const int w = std::min(50, n);
  double a = 0.0, b = 0.0;
  for (int i = 0; i < w; ++i) {
    a += c.losses[size_t(i)];
    b += c.losses[size_t(n - 1 - i)];
  }
  c.first_window = a / w;
  c.last_window = b / w;
}

std::map<std::string, Tensor> snapshot_trainable(const ParamStore& ps) {
  std::map<std::string, Tensor> snap;
  for (const auto& n : ps.trainable_names()) snap[n] = ps.value(n);
  return snap;
}

void restore_snapshot(ParamStore& ps, const std::map<std::string, Tensor>& snap) {
  for (const auto& [n, t] : snap) ps.value(n) = t;
}

// One prompt draw for one mask, shaped (P,2) for points or (4,) for boxes.
Tensor draw_prompt(const Tensor& mask, PromptMode mode, int n_points, double box_noise,
                   Rng& rng) {
  switch (mode) {
    case PromptMode::kPoints: return sample_point_prompts(mask, n_points, rng);
    case PromptMode::kBox: return box_from_mask(mask);
    default: return noise_box(box_from_mask(mask), box_noise, rng);
  }
}

// Prompt tokens (B,P,C) for a batch of per-sample prompt rows.
ad::Value prompt_tokens(const ParamStore& ps, const SegConfig& seg, PromptMode mode,
                        const std::vector<Tensor>& prompts) {
  const int B = int(prompts.size());
  if (mode == PromptMode::kPoints) {
    const int P = prompts.at(0).shape.at(0);
    Tensor pb({B, P, 2});
    for (int b = 0; b < B; ++b) copy_row(prompts[size_t(b)], pb, b);
    return encode_points(ps, seg, ad::constant(pb));
  }
  Tensor bb({B, 4});
  for (int b = 0; b < B; ++b) copy_row(prompts[size_t(b)], bb, b);
  return encode_box(ps, seg, ad::constant(bb));
}

// Per-id evaluation stream: prompts must not depend on call order or level.
Rng prompt_rng(uint64_t seed, const std::string& id, PromptMode mode) {
  return Rng(seed).fork(fnv1a(id + "/" + to_string(mode)));
}

}  // namespace

// ---- stage 1 ---------------------------------------------------------------------

TrainCurve train_unet_stage(ParamStore& ps, const RunConfig& cfg, const NoiseSchedule& ns,
                            const SampleSet& train, Rng& rng, bool verbose) {
  if (!cfg.ablation.gle) {
    throw std::invalid_argument("train_unet_stage: enhancement is switched off in this config");
  }
  if (!has_lora(ps)) {
    throw std::invalid_argument("train_unet_stage: store has no low-rank adapters");
  }
  if (cfg.n1 > 0 && (train.size() == 0 || train.levels.empty())) {
    throw std::invalid_argument("train_unet_stage: empty training set");
  }

  // Exactly the adapters (and the scorer, when adaptive) train.
  for (const auto& n : ps.names()) ps.set_trainable(n, false);
  for (const auto& n : ps.names("unet/")) {
    if (n.find(".lora_A") != std::string::npos || n.find(".lora_B") != std::string::npos) {
      ps.set_trainable(n, true);
    }
  }
  if (cfg.ablation.dae) ps.set_trainable_prefix("dpm/", true);

  const DaeRange range = cfg.dae_range(ns);
  const double gamma = cfg.ablation.fda ? cfg.gamma : 1.0;
  const int S = cfg.seg.image_size;
  // Uniform mixture over clean pairs and every degradation level: the clean
  // slot teaches the enhancer to leave already-clean latents alone.
  std::vector<int> cycle{0};
  cycle.insert(cycle.end(), train.levels.begin(), train.levels.end());

  AdamW opt;
  opt.lr = cfg.lr;
  TrainCurve curve;
  std::map<std::string, Tensor> last_good = snapshot_trainable(ps);
  for (int it = 0; it < cfg.n1; ++it) {
    const int B = std::min(cfg.batch, train.size());
    const int lvl = cycle[size_t(it) % cycle.size()];
    Tensor xh({B, 3, S, S}), xl({B, 3, S, S});
    for (int b = 0; b < B; ++b) {
      const size_t idx = size_t(rng.uniform_int(train.size()));
      copy_row(train.hq[idx], xh, b);
      copy_row(lvl == 0 ? train.hq[idx] : train.lq.at(lvl)[idx], xl, b);
    }
    Tensor zh, zl;
    {
      ad::NoGradGuard ng;
      zh = encode_image_t(ps, cfg.seg, xh);
      zl = encode_image_t(ps, cfg.seg, xl);
    }
    ad::Value eta;
    double mean_s = 0.0;
    if (cfg.ablation.dae) {
      ad::Value s = predict_score(ps, cfg.dpm, ad::constant(zl));
      for (int b = 0; b < B; ++b) mean_s += s->val[b] / B;
      eta = cfg.ablation.direct_score ? s : eta_from_score(s, range);
    } else {
      eta = ad::constant(Tensor::full({B}, range.beta_bar_min));
    }
    ad::Value zhat = gle_dae(make_denoiser_graph(ps, cfg.unet), ad::constant(zl), eta, gamma,
                             cfg.t_step);
    ad::Value loss = mse_loss(zhat, ad::constant(zh));
    const double lv = loss->val[0];
    if (!std::isfinite(lv)) {
      restore_snapshot(ps, last_good);
      throw std::runtime_error("train_unet_stage: non-finite loss at iteration " +
                               std::to_string(it));
    }
    last_good = snapshot_trainable(ps);
    ps.zero_grad();
    ad::backward(loss);
    clip_grad_norm(ps, cfg.clip_norm);
    opt.step(ps);
    curve.losses.push_back(lv);
    if (verbose && (it % 200 == 0 || it + 1 == cfg.n1)) {
      std::fprintf(stderr, "[stage1] iter %d recon-loss %.5f mean-score %.3f\n", it, lv, mean_s);
    }
  }
  finish_curve(curve);
  return curve;
}

// ---- stage 2 ---------------------------------------------------------------------

TrainCurve train_decoder_stage(ParamStore& ps, const RunConfig& cfg, const NoiseSchedule& ns,
                               const SampleSet& train, Rng& rng, bool verbose) {
  if (cfg.n2 > 0 && train.size() == 0) {
    throw std::invalid_argument("train_decoder_stage: empty training set");
  }

  for (const auto& n : ps.names()) ps.set_trainable(n, false);
  if (cfg.ft_mode == FtMode::kDecoder) {
    ps.set_trainable_prefix("seg/dec.", true);
  } else {
    ps.set_trainable("seg/dec.token", true);
  }

  const int S = cfg.seg.image_size;
  // Half clean, half degraded. Clean batches run through the enhancer too:
  // the decoder must tolerate its imprint on already-clean inputs.
  std::vector<int> cycle;
  for (int l : train.levels) {
    cycle.push_back(0);
    cycle.push_back(l);
  }
  if (cycle.empty()) cycle.push_back(0);

  AdamW opt;
  opt.lr = cfg.lr;
  TrainCurve curve;
  std::map<std::string, Tensor> last_good = snapshot_trainable(ps);
  for (int it = 0; it < cfg.n2; ++it) {
    const int B = std::min(cfg.batch, train.size());
    const int lvl = cycle[size_t(it) % cycle.size()];
    Tensor xb({B, 3, S, S}), mb({B, S, S});
    std::vector<Tensor> prompts;
    for (int b = 0; b < B; ++b) {
      const size_t idx = size_t(rng.uniform_int(train.size()));
      copy_row(lvl == 0 ? train.hq[idx] : train.lq.at(lvl)[idx], xb, b);
      copy_row(train.mask[idx], mb, b);
      prompts.push_back(
          draw_prompt(train.mask[idx], cfg.prompt_mode, cfg.n_points, cfg.box_noise, rng));
    }
    Tensor z;
    {
      ad::NoGradGuard ng;
      z = encode_image_t(ps, cfg.seg, xb);
      z = enhance_latent(ps, cfg, ns, z).z;
    }
    ad::Value toks = prompt_tokens(ps, cfg.seg, cfg.prompt_mode, prompts);
    ad::Value logits = decode_mask(ps, cfg.seg, ad::constant(z), toks);
    ad::Value loss = seg_loss(logits, ad::constant(mb));
    const double lv = loss->val[0];
    if (!std::isfinite(lv)) {
      restore_snapshot(ps, last_good);
      throw std::runtime_error("train_decoder_stage: non-finite loss at iteration " +
                               std::to_string(it));
    }
    last_good = snapshot_trainable(ps);
    ps.zero_grad();
    ad::backward(loss);
    clip_grad_norm(ps, cfg.clip_norm);
    opt.step(ps);
    curve.losses.push_back(lv);
    if (verbose && (it % 200 == 0 || it + 1 == cfg.n2)) {
      std::fprintf(stderr, "[stage2] iter %d seg-loss %.4f\n", it, lv);
    }
  }
  finish_curve(curve);
  return curve;
}

// ---- inference ---------------------------------------------------------------------

InferOut infer(const ParamStore& ps, const RunConfig& cfg, const NoiseSchedule& ns,
               const Tensor& image, const Tensor& prompt) {
  const int S = cfg.seg.image_size;
  if (image.shape != std::vector<int>{3, S, S}) {
    throw std::invalid_argument("infer: image must be (3,S,S)");
  }
  ad::NoGradGuard ng;
  Tensor xb({1, 3, S, S});
  copy_row(image, xb, 0);
  Enhanced enh = enhance_latent(ps, cfg, ns, encode_image_t(ps, cfg.seg, xb));
  ad::Value toks = prompt_tokens(ps, cfg.seg, cfg.prompt_mode, {prompt});
  ad::Value logits = decode_mask(ps, cfg.seg, ad::constant(enh.z), toks);
  InferOut out;
  out.mask = Tensor({S, S});
  for (int64_t i = 0; i < out.mask.numel(); ++i) {
    out.mask[i] = logits->val[i] > 0.0 ? 1.0 : 0.0;
  }
  if (!enh.score.empty()) out.score = enh.score[0];
  if (!enh.eta.empty()) out.eta = enh.eta[0];
  return out;
}

// ---- evaluation ---------------------------------------------------------------------

EvalReport evaluate(const ParamStore& ps, const RunConfig& cfg, const NoiseSchedule& ns,
                    const SampleSet& test, const std::vector<PromptMode>& modes,
                    const std::vector<std::string>& missing) {
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport rep;
  rep.config_hash = cfg.hash();
  rep.missing = missing;
  std::vector<int> levels{0};
  levels.insert(levels.end(), test.levels.begin(), test.levels.end());
  for (PromptMode mode : modes) {
    for (int lvl : levels) {
      for (int i = 0; i < test.size(); ++i) {
        // One prompt stream per (id, mode): every level of a sample is probed
        // with identical prompts, so per-level rows are directly comparable.
        Rng prng = prompt_rng(cfg.seed, test.ids[size_t(i)], mode);
        const Tensor prompt =
            draw_prompt(test.mask[size_t(i)], mode, cfg.n_points, cfg.box_noise, prng);
        const Tensor& img = lvl == 0 ? test.hq[size_t(i)] : test.lq.at(lvl)[size_t(i)];
        const InferOut io = infer(ps, cfg, ns, img, prompt);
        EvalRow row;
        row.id = test.ids[size_t(i)];
        row.level = lvl;
        row.prompt_mode = to_string(mode);
        row.iou = iou(io.mask, test.mask[size_t(i)]);
        row.dice = dice_coef(io.mask, test.mask[size_t(i)]);
        row.pixel_acc = pixel_acc(io.mask, test.mask[size_t(i)]);
        row.score = io.score;
        row.eta = io.eta;
        rep.rows.push_back(std::move(row));
      }
    }
  }
  // Aggregates are straight means of the rows in each (level, mode) cell.
  for (PromptMode mode : modes) {
    const std::string ms = to_string(mode);
    for (int lvl : levels) {
      EvalAggregate agg;
      agg.level = lvl;
      agg.prompt_mode = ms;
      for (const auto& row : rep.rows) {
        if (row.level != lvl || row.prompt_mode != ms) continue;
        agg.count += 1;
        agg.iou += row.iou;
        agg.dice += row.dice;
        agg.pixel_acc += row.pixel_acc;
        agg.mean_score += row.score;
      }
      if (agg.count > 0) {
        agg.iou /= agg.count;
        agg.dice /= agg.count;
        agg.pixel_acc /= agg.count;
        agg.mean_score /= agg.count;
      }
      rep.aggregates.push_back(agg);
    }
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

std::string EvalReport::to_json() const {
  json j;
  j["config_hash"] = config_hash;
  j["wall_seconds"] = wall_seconds;
  j["missing"] = missing;
  j["aggregates"] = json::array();
  for (const auto& a : aggregates) {
    j["aggregates"].push_back({{"level", a.level},
                               {"prompt_mode", a.prompt_mode},
                               {"count", a.count},
                               {"iou", a.iou},
                               {"dice", a.dice},
                               {"pixel_acc", a.pixel_acc},
                               {"mean_score", a.mean_score}});
  }
  j["rows"] = json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"id", r.id},
                         {"level", r.level},
                         {"prompt_mode", r.prompt_mode},
                         {"iou", r.iou},
                         {"dice", r.dice},
                         {"pixel_acc", r.pixel_acc},
                         {"score", r.score},
                         {"eta", r.eta}});
  }
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
  const json j = json::parse(text);
  EvalReport rep;
  rep.config_hash = j.value("config_hash", std::string());
  rep.wall_seconds = j.value("wall_seconds", 0.0);
  if (j.contains("missing")) rep.missing = j["missing"].get<std::vector<std::string>>();
  for (const auto& a : j.value("aggregates", json::array())) {
    EvalAggregate agg;
    agg.level = a.value("level", 0);
    agg.prompt_mode = a.value("prompt_mode", std::string());
    agg.count = a.value("count", 0);
    agg.iou = a.value("iou", 0.0);
    agg.dice = a.value("dice", 0.0);
    agg.pixel_acc = a.value("pixel_acc", 0.0);
    agg.mean_score = a.value("mean_score", 0.0);
    rep.aggregates.push_back(agg);
  }
  for (const auto& r : j.value("rows", json::array())) {
    EvalRow row;
    row.id = r.value("id", std::string());
    row.level = r.value("level", 0);
    row.prompt_mode = r.value("prompt_mode", std::string());
    row.iou = r.value("iou", 0.0);
    row.dice = r.value("dice", 0.0);
    row.pixel_acc = r.value("pixel_acc", 0.0);
    row.score = r.value("score", 0.0);
    row.eta = r.value("eta", 0.0);
    rep.rows.push_back(row);
  }
  return rep;
}

void save_eval_report(const EvalReport& report, const std::string& json_path) {
  std::ofstream f(json_path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + json_path);
  f << report.to_json();
}

// ---- plots ----------------------------------------------------------------------

namespace {

constexpr int kPlotW = 560, kPlotH = 420;
constexpr int kMarL = 64, kMarR = 20, kMarT = 32, kMarB = 48;

cv::Point plot_point(double fx, double fy) {
  const int x = kMarL + int(std::lround(fx * (kPlotW - kMarL - kMarR)));
  const int y = kPlotH - kMarB - int(std::lround(fy * (kPlotH - kMarT - kMarB)));
  return {x, y};
}

cv::Scalar series_color(int i) {
  static const cv::Scalar palette[] = {
      {180, 90, 20}, {40, 140, 40}, {40, 40, 200}, {20, 140, 200}, {140, 40, 140}};
  return palette[size_t(i) % 5];
}

void draw_frame(cv::Mat& img, const std::string& title, const std::string& xlabel) {
  img.setTo(cv::Scalar(255, 255, 255));
  const cv::Scalar axis(60, 60, 60), grid(225, 225, 225);
  for (int k = 0; k <= 4; ++k) {
    const double fy = k / 4.0;
    cv::line(img, plot_point(0, fy), plot_point(1, fy), k == 0 ? axis : grid, 1);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.2f", fy);
    cv::putText(img, buf, plot_point(0, fy) + cv::Point(-44, 4), cv::FONT_HERSHEY_SIMPLEX, 0.38,
                axis, 1, cv::LINE_AA);
  }
  cv::line(img, plot_point(0, 0), plot_point(0, 1), axis, 1);
  cv::putText(img, title, {kMarL, kMarT - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.5, axis, 1,
              cv::LINE_AA);
  cv::putText(img, xlabel, {kPlotW / 2 - 40, kPlotH - 14}, cv::FONT_HERSHEY_SIMPLEX, 0.42, axis,
              1, cv::LINE_AA);
}

std::string level_name(int lvl) { return lvl == 0 ? "clean" : "LQ-" + std::to_string(lvl); }

}  // namespace

void save_report_plots(const EvalReport& report, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  // distinct levels / modes present, in report order
  std::vector<int> levels;
  std::vector<std::string> modes;
  for (const auto& a : report.aggregates) {
    if (std::find(levels.begin(), levels.end(), a.level) == levels.end()) {
      levels.push_back(a.level);
    }
    if (std::find(modes.begin(), modes.end(), a.prompt_mode) == modes.end()) {
      modes.push_back(a.prompt_mode);
    }
  }
  std::sort(levels.begin(), levels.end());
  if (levels.empty()) return;

  const double denom = std::max<size_t>(1, levels.size() - 1);
  auto level_fx = [&](int lvl) {
    const auto it = std::find(levels.begin(), levels.end(), lvl);
    return double(it - levels.begin()) / denom;
  };

  // one metric-vs-level chart per prompt mode
  for (const auto& mode : modes) {
    cv::Mat img(kPlotH, kPlotW, CV_8UC3);
    draw_frame(img, "metrics vs degradation level  [" + mode + "]", "level");
    for (int lvl : levels) {
      cv::putText(img, level_name(lvl), plot_point(level_fx(lvl), 0) + cv::Point(-18, 18),
                  cv::FONT_HERSHEY_SIMPLEX, 0.4, {60, 60, 60}, 1, cv::LINE_AA);
    }
    const char* names[3] = {"IoU", "Dice", "PA"};
    for (int m = 0; m < 3; ++m) {
      std::vector<cv::Point> pts;
      for (int lvl : levels) {
        for (const auto& a : report.aggregates) {
          if (a.level != lvl || a.prompt_mode != mode) continue;
          const double v = m == 0 ? a.iou : (m == 1 ? a.dice : a.pixel_acc);
          pts.push_back(plot_point(level_fx(lvl), std::clamp(v, 0.0, 1.0)));
        }
      }
      for (size_t i = 1; i < pts.size(); ++i) {
        cv::line(img, pts[i - 1], pts[i], series_color(m), 2, cv::LINE_AA);
      }
      for (const auto& p : pts) cv::circle(img, p, 3, series_color(m), cv::FILLED, cv::LINE_AA);
      cv::putText(img, names[m], {kPlotW - kMarR - 60, kMarT + 18 * (m + 1)},
                  cv::FONT_HERSHEY_SIMPLEX, 0.42, series_color(m), 1, cv::LINE_AA);
    }
    cv::imwrite((fs::path(out_dir) / ("metrics_" + mode + ".png")).string(), img);
  }

  // score distribution per level (all modes pooled; scores depend only on the image)
  {
    cv::Mat img(kPlotH, kPlotW, CV_8UC3);
    draw_frame(img, "degradation score distribution per level", "score");
    constexpr int kBins = 20;
    for (int k = 0; k <= 4; ++k) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%.2f", k / 4.0);
      cv::putText(img, buf, plot_point(k / 4.0, 0) + cv::Point(-12, 18),
                  cv::FONT_HERSHEY_SIMPLEX, 0.38, {60, 60, 60}, 1, cv::LINE_AA);
    }
    int li = 0;
    for (int lvl : levels) {
      std::vector<double> hist(kBins, 0.0);
      int count = 0;
      for (const auto& r : report.rows) {
        if (r.level != lvl) continue;
        const int b = std::min(kBins - 1, std::max(0, int(r.score * kBins)));
        hist[size_t(b)] += 1.0;
        ++count;
      }
      if (count == 0) continue;
      for (auto& h : hist) h /= count;
      const double peak = *std::max_element(hist.begin(), hist.end());
      std::vector<cv::Point> pts;
      for (int b = 0; b < kBins; ++b) {
        const double fx = (b + 0.5) / kBins;
        const double fy = peak > 0 ? 0.92 * hist[size_t(b)] / peak : 0.0;
        pts.push_back(plot_point(fx, fy));
      }
      for (size_t i = 1; i < pts.size(); ++i) {
        cv::line(img, pts[i - 1], pts[i], series_color(li), 2, cv::LINE_AA);
      }
      cv::putText(img, level_name(lvl), {kPlotW - kMarR - 70, kMarT + 18 * (li + 1)},
                  cv::FONT_HERSHEY_SIMPLEX, 0.42, series_color(li), 1, cv::LINE_AA);
      ++li;
    }
    cv::imwrite((fs::path(out_dir) / "score_hist.png").string(), img);
  }
}

// ---- component study ----------------------------------------------------------------

std::vector<AblationPreset> standard_presets() {
  return {AblationPreset::kBaseline, AblationPreset::kGleCre, AblationPreset::kFda,
          AblationPreset::kDae, AblationPreset::kDirectScore};
}

std::string to_string(AblationPreset p) {
  switch (p) {
    case AblationPreset::kBaseline: return "baseline";
    case AblationPreset::kGleCre: return "gle-cre";
    case AblationPreset::kFda: return "fda";
    case AblationPreset::kDae: return "dae";
    default: return "direct-s";
  }
}

AblationSwitches switches_for(AblationPreset p) {
  AblationSwitches sw;
  switch (p) {
    case AblationPreset::kBaseline:
      sw.gle = false;
      sw.fda = sw.dae = false;
      break;
    case AblationPreset::kGleCre:
      sw.fda = sw.dae = false;
      break;
    case AblationPreset::kFda:
      sw.dae = false;
      break;
    case AblationPreset::kDae:
      break;
    case AblationPreset::kDirectScore:
      sw.direct_score = true;
      break;
  }
  return sw;
}

std::vector<AblationRow> run_ablation(const ParamStore& pretrained, const RunConfig& cfg,
                                      const NoiseSchedule& ns, const SampleSet& train,
                                      const SampleSet& test, bool verbose) {
  if (test.levels.empty() || test.size() == 0) {
    throw std::invalid_argument("run_ablation: empty evaluation set");
  }
  const int top = test.levels.back();
  std::vector<AblationRow> rows;
  for (AblationPreset preset : standard_presets()) {
    RunConfig pc = cfg;
    pc.ablation = switches_for(preset);
    ParamStore store = clone_store(pretrained);
    if (pc.ablation.gle) {
      // identical seed per preset: rows differ only in mechanism
      Rng rng = Rng(cfg.seed).fork(fnv1a("stage1"));
      train_unet_stage(store, pc, ns, train, rng, verbose);
    }
    AblationRow row;
    row.preset = to_string(preset);
    double tot = 0.0;
    for (int i = 0; i < test.size(); ++i) {
      Rng prng = prompt_rng(cfg.seed, test.ids[size_t(i)], cfg.prompt_mode);
      const Tensor prompt =
          draw_prompt(test.mask[size_t(i)], cfg.prompt_mode, cfg.n_points, cfg.box_noise, prng);
      const InferOut io = infer(store, pc, ns, test.lq.at(top)[size_t(i)], prompt);
      tot += iou(io.mask, test.mask[size_t(i)]);
    }
    row.lq_top_iou = tot / test.size();
    if (pc.ablation.dae) {
      ad::NoGradGuard ng;
      auto mean_score_of = [&](const std::vector<Tensor>& imgs) {
        const int S = pc.seg.image_size;
        double acc = 0.0;
        for (size_t i = 0; i < imgs.size(); ++i) {
          Tensor xb({1, 3, S, S});
          copy_row(imgs[i], xb, 0);
          acc += score_latents(store, pc.dpm, encode_image_t(store, pc.seg, xb))[0];
        }
        return acc / double(imgs.size());
      };
      for (int lvl : test.levels) row.mean_score[lvl] = mean_score_of(test.lq.at(lvl));
      row.clean_score = mean_score_of(test.hq);
    }
    if (verbose) {
      std::fprintf(stderr, "[ablate] %-9s strongest-level IoU %.4f\n", row.preset.c_str(),
                   row.lq_top_iou);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace glesam
