#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "glesam/dpm.hpp"
#include "glesam/seg.hpp"
#include "glesam/synth.hpp"
#include "glesam/train.hpp"
#include "glesam/unet.hpp"

using namespace glesam;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("glesam_train_" + tag);
  fs::remove_all(p);
  return p;
}

// Shrunken end-to-end setup: 32-px images, 8-channel latents, k=2 replication.
RunConfig tiny_config() {
  RunConfig cfg;
  cfg.seg.image_size = 32;
  cfg.seg.channels = 8;
  cfg.seg.enc_mid = 6;
  cfg.seg.up_mid = 6;
  cfg.seg.hyper_ch = 4;
  cfg.seg.n_points = 2;
  cfg.n_points = 2;
  cfg.unet.base_width = 8;
  cfg.unet.mid_width = 16;
  cfg.unet.time_dim = 16;
  cfg.unet.norm_groups = 4;
  cfg.dpm.channels = 8;
  cfg.dpm.hidden = 8;
  cfg.n1 = 6;
  cfg.n2 = 6;
  cfg.batch = 2;
  return cfg;
}

struct Pipeline {
  RunConfig cfg;
  NoiseSchedule ns;
  ParamStore ps;
};

Pipeline tiny_pipeline(uint64_t seed = 11) {
  Pipeline p;
  p.cfg = tiny_config();
  p.ns = p.cfg.schedule();
  Rng rng(seed);
  init_mini_unet(p.ps, p.cfg.unet, rng);
  cre_expand(p.ps, p.cfg.unet, p.cfg.seg.channels / p.cfg.unet.in_channels,
             p.cfg.ablation.cre);
  attach_lora(p.ps, p.cfg.unet, p.cfg.lora, rng);
  init_dpm(p.ps, p.cfg.dpm, rng);
  init_segmenter(p.ps, p.cfg.seg, rng);
  return p;
}

SampleSet tiny_dataset(const fs::path& dir, int n_train = 4, int n_test = 3,
                       const std::string& split = "train",
                       std::vector<std::string>* missing = nullptr) {
  SynthConfig scfg;
  scfg.image_size = 32;
  DatasetManifest man = build_dataset(n_train, n_test, {1, 2, 3}, 5, dir.string(), scfg);
  return load_split(man, dir.string(), split, missing);
}

std::map<std::string, Tensor> snapshot(const ParamStore& ps) {
  std::map<std::string, Tensor> out;
  for (const auto& n : ps.names()) out[n] = ps.value(n);
  return out;
}

bool same_tensor(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data == b.data;
}

}  // namespace

TEST_CASE("run config json round-trips and hashes are stable") {
  RunConfig a;
  const std::string ja = a.to_json();
  RunConfig b = RunConfig::from_json(ja);
  CHECK(b.to_json() == ja);
  CHECK(b.hash() == a.hash());
  CHECK(a.hash().size() == 16);

  // defaults fill an empty document
  RunConfig c = RunConfig::from_json("{}");
  CHECK(c.to_json() == ja);

  // any semantic change moves the hash
  RunConfig d;
  d.gamma = 4.0;
  CHECK(d.hash() != a.hash());
  RunConfig e;
  e.ablation.dae = false;
  CHECK(e.hash() != a.hash());
}

TEST_CASE("mode names parse and reject garbage") {
  CHECK(ft_mode_from_string("decoder") == FtMode::kDecoder);
  CHECK(ft_mode_from_string("token") == FtMode::kToken);
  CHECK(to_string(FtMode::kToken) == "token");
  CHECK_THROWS_AS(ft_mode_from_string("both"), std::invalid_argument);

  CHECK(prompt_mode_from_string("points") == PromptMode::kPoints);
  CHECK(prompt_mode_from_string("box") == PromptMode::kBox);
  CHECK(prompt_mode_from_string("noisy-box") == PromptMode::kNoisyBox);
  CHECK_THROWS_AS(prompt_mode_from_string("click"), std::invalid_argument);
}

TEST_CASE("load_split groups records and honours the missing-file contract") {
  fs::path dir = temp_dir("split");
  SynthConfig scfg;
  scfg.image_size = 32;
  DatasetManifest man = build_dataset(4, 3, {1, 2, 3}, 5, dir.string(), scfg);

  SampleSet train = load_split(man, dir.string(), "train");
  SampleSet test = load_split(man, dir.string(), "test");
  CHECK(train.size() == 4);
  CHECK(test.size() == 3);
  CHECK(train.levels == std::vector<int>{1, 2, 3});
  for (int lvl : train.levels) {
    CHECK(int(train.lq.at(lvl).size()) == train.size());
  }
  CHECK(train.hq[0].shape == std::vector<int>{3, 32, 32});
  CHECK(train.mask[0].shape == std::vector<int>{32, 32});

  // knock out one file: with a sink the sample is skipped and recorded,
  // without one the loader throws
  std::string victim;
  for (const auto& r : man.records) {
    if (r.split == "test" && r.level == 2) {
      victim = r.lq_path;
      break;
    }
  }
  REQUIRE(!victim.empty());
  fs::remove(dir / victim);
  std::vector<std::string> missing;
  SampleSet degraded = load_split(man, dir.string(), "test", &missing);
  CHECK(degraded.size() == 2);
  CHECK(missing.size() == 1);
  CHECK_THROWS_AS(load_split(man, dir.string(), "test"), std::exception);

  fs::remove_all(dir);
}

TEST_CASE("clone_store copies values, flags, and is independent") {
  Pipeline p = tiny_pipeline();
  p.ps.set_trainable_prefix("dpm/", true);
  ParamStore copy = clone_store(p.ps);
  CHECK(copy.names() == p.ps.names());
  for (const auto& n : p.ps.names()) {
    CHECK(copy.trainable(n) == p.ps.trainable(n));
    CHECK(same_tensor(copy.value(n), p.ps.value(n)));
  }
  const std::string probe = p.ps.names()[0];
  copy.value(probe)[0] += 1.0;
  CHECK(copy.value(probe)[0] != p.ps.value(probe)[0]);
}

TEST_CASE("enhance_latent honours every ablation switch") {
  Pipeline p = tiny_pipeline();
  Rng rng(3);
  Tensor z = Tensor::randn(rng, {2, 8, 8, 8}, 0.3);

  // bypass: identity, bit-exact, no scores
  RunConfig off = p.cfg;
  off.ablation.gle = false;
  Enhanced e0 = enhance_latent(p.ps, off, p.ns, z);
  CHECK(same_tensor(e0.z, z));
  CHECK(e0.score.empty());

  // fixed strength: eta pinned to the schedule floor for every item
  RunConfig fixed = p.cfg;
  fixed.ablation.dae = false;
  Enhanced e1 = enhance_latent(p.ps, fixed, p.ns, z);
  const double floor_eta = p.ns.beta_bar(fixed.t_step);
  REQUIRE(e1.eta.size() == 2);
  CHECK(e1.eta[0] == doctest::Approx(floor_eta).epsilon(1e-12));
  CHECK(e1.eta[1] == doctest::Approx(floor_eta).epsilon(1e-12));
  CHECK(e1.score.empty());
  CHECK(!same_tensor(e1.z, z));

  // adaptive: scores in (0,1), eta inside the calibrated band
  Enhanced e2 = enhance_latent(p.ps, p.cfg, p.ns, z);
  const DaeRange range = p.cfg.dae_range(p.ns);
  REQUIRE(e2.score.size() == 2);
  for (int b = 0; b < 2; ++b) {
    CHECK(e2.score[size_t(b)] > 0.0);
    CHECK(e2.score[size_t(b)] < 1.0);
    CHECK(e2.eta[size_t(b)] >= range.beta_bar_min - 1e-12);
    CHECK(e2.eta[size_t(b)] <= range.beta_bar_max + 1e-12);
  }

  // direct mode uses the raw score as the strength
  RunConfig direct = p.cfg;
  direct.ablation.direct_score = true;
  Enhanced e3 = enhance_latent(p.ps, direct, p.ns, z);
  CHECK(e3.eta[0] == doctest::Approx(e3.score[0]).epsilon(1e-12));

  // spectral alignment changes the output
  RunConfig nofda = p.cfg;
  nofda.ablation.fda = false;
  Enhanced e4 = enhance_latent(p.ps, nofda, p.ns, z);
  CHECK(!same_tensor(e4.z, e2.z));
}

TEST_CASE("stage-1 training touches exactly the adapters and the scorer") {
  fs::path dir = temp_dir("stage1");
  SampleSet train = tiny_dataset(dir);
  Pipeline p = tiny_pipeline();

  // n1 = 0 is a no-op
  {
    RunConfig c0 = p.cfg;
    c0.n1 = 0;
    ParamStore store = clone_store(p.ps);
    Rng rng(1);
    TrainCurve curve = train_unet_stage(store, c0, p.ns, train, rng);
    CHECK(curve.losses.empty());
    for (const auto& n : p.ps.names()) CHECK(same_tensor(store.value(n), p.ps.value(n)));
  }

  auto before = snapshot(p.ps);
  Rng rng(1);
  TrainCurve curve = train_unet_stage(p.ps, p.cfg, p.ns, train, rng);
  CHECK(int(curve.losses.size()) == p.cfg.n1);
  for (double l : curve.losses) CHECK(std::isfinite(l));

  bool lora_moved = false, dpm_moved = false;
  for (const auto& [name, old] : before) {
    const bool is_lora = name.find(".lora_A") != std::string::npos ||
                         name.find(".lora_B") != std::string::npos;
    const bool is_dpm = name.rfind("dpm/", 0) == 0;
    if (is_lora) {
      lora_moved = lora_moved || !same_tensor(p.ps.value(name), old);
    } else if (is_dpm) {
      dpm_moved = dpm_moved || !same_tensor(p.ps.value(name), old);
    } else {
      CHECK(same_tensor(p.ps.value(name), old));  // frozen world stays bit-identical
    }
  }
  CHECK(lora_moved);
  CHECK(dpm_moved);

  // with enhancement disabled there is nothing to train
  RunConfig off = p.cfg;
  off.ablation.gle = false;
  Rng rng2(1);
  CHECK_THROWS_AS(train_unet_stage(p.ps, off, p.ns, train, rng2), std::invalid_argument);

  fs::remove_all(dir);
}

TEST_CASE("stage-2 training touches exactly the decoder (or only its token)") {
  fs::path dir = temp_dir("stage2");
  SampleSet train = tiny_dataset(dir);

  for (FtMode mode : {FtMode::kDecoder, FtMode::kToken}) {
    Pipeline p = tiny_pipeline();
    p.cfg.ft_mode = mode;
    auto before = snapshot(p.ps);
    Rng rng(2);
    TrainCurve curve = train_decoder_stage(p.ps, p.cfg, p.ns, train, rng);
    CHECK(int(curve.losses.size()) == p.cfg.n2);
    bool moved = false;
    for (const auto& [name, old] : before) {
      const bool allowed = mode == FtMode::kDecoder ? name.rfind("seg/dec.", 0) == 0
                                                    : name == "seg/dec.token";
      if (allowed) {
        moved = moved || !same_tensor(p.ps.value(name), old);
      } else {
        CHECK(same_tensor(p.ps.value(name), old));
      }
    }
    CHECK(moved);
  }
  fs::remove_all(dir);
}

TEST_CASE("inference is deterministic and bypass mode equals the plain segmenter") {
  fs::path dir = temp_dir("infer");
  SampleSet test = tiny_dataset(dir, 4, 3, "test");
  Pipeline p = tiny_pipeline();

  Rng prng(9);
  Tensor prompt = sample_point_prompts(test.mask[0], p.cfg.n_points, prng);
  InferOut a = infer(p.ps, p.cfg, p.ns, test.hq[0], prompt);
  InferOut b = infer(p.ps, p.cfg, p.ns, test.hq[0], prompt);
  CHECK(same_tensor(a.mask, b.mask));
  CHECK(a.score == b.score);
  CHECK(a.eta == b.eta);
  for (int64_t i = 0; i < a.mask.numel(); ++i) {
    CHECK((a.mask[i] == 0.0 || a.mask[i] == 1.0));
  }

  // gle off: the mask must match decoding the raw latent directly
  RunConfig off = p.cfg;
  off.ablation.gle = false;
  InferOut c = infer(p.ps, off, p.ns, test.hq[0], prompt);
  CHECK(c.score == 0.0);
  {
    ad::NoGradGuard ng;
    Tensor xb({1, 3, p.cfg.seg.image_size, p.cfg.seg.image_size});
    std::copy(test.hq[0].data.begin(), test.hq[0].data.end(), xb.data.begin());
    Tensor pb({1, p.cfg.n_points, 2});
    std::copy(prompt.data.begin(), prompt.data.end(), pb.data.begin());
    ad::Value logits = decode_mask(p.ps, p.cfg.seg, ad::constant(encode_image_t(p.ps, p.cfg.seg, xb)),
                                   encode_points(p.ps, p.cfg.seg, ad::constant(pb)));
    for (int64_t i = 0; i < c.mask.numel(); ++i) {
      CHECK(c.mask[i] == (logits->val[i] > 0.0 ? 1.0 : 0.0));
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("evaluation aggregates are row means and reports round-trip") {
  fs::path dir = temp_dir("eval");
  SampleSet test = tiny_dataset(dir, 4, 3, "test");
  Pipeline p = tiny_pipeline();

  std::vector<std::string> missing{"sample-x: unreadable"};
  EvalReport rep = evaluate(p.ps, p.cfg, p.ns, test, {PromptMode::kPoints, PromptMode::kBox},
                            missing);
  CHECK(rep.config_hash == p.cfg.hash());
  REQUIRE(rep.missing.size() == 1);
  // 2 modes x (clean + 3 levels) x 3 samples
  CHECK(int(rep.rows.size()) == 2 * 4 * 3);
  CHECK(int(rep.aggregates.size()) == 2 * 4);

  for (const auto& agg : rep.aggregates) {
    double iou_sum = 0.0, score_sum = 0.0;
    int n = 0;
    for (const auto& row : rep.rows) {
      if (row.level != agg.level || row.prompt_mode != agg.prompt_mode) continue;
      iou_sum += row.iou;
      score_sum += row.score;
      ++n;
    }
    REQUIRE(n == agg.count);
    CHECK(std::abs(agg.iou - iou_sum / n) <= 1e-9);
    CHECK(std::abs(agg.mean_score - score_sum / n) <= 1e-9);
  }

  // determinism: identical rows on a second pass
  EvalReport rep2 = evaluate(p.ps, p.cfg, p.ns, test, {PromptMode::kPoints, PromptMode::kBox},
                             missing);
  REQUIRE(rep2.rows.size() == rep.rows.size());
  for (size_t i = 0; i < rep.rows.size(); ++i) {
    CHECK(rep.rows[i].iou == rep2.rows[i].iou);
    CHECK(rep.rows[i].score == rep2.rows[i].score);
  }

  // JSON round-trip preserves every row
  EvalReport back = EvalReport::from_json(rep.to_json());
  CHECK(back.config_hash == rep.config_hash);
  REQUIRE(back.rows.size() == rep.rows.size());
  for (size_t i = 0; i < rep.rows.size(); ++i) {
    CHECK(back.rows[i].id == rep.rows[i].id);
    CHECK(back.rows[i].iou == doctest::Approx(rep.rows[i].iou).epsilon(1e-12));
  }
  REQUIRE(back.aggregates.size() == rep.aggregates.size());
  CHECK(back.missing == rep.missing);

  // save + plots produce files on disk
  fs::path out = dir / "report";
  fs::create_directories(out);
  save_eval_report(rep, (out / "eval.json").string());
  save_report_plots(rep, out.string());
  CHECK(fs::exists(out / "eval.json"));
  CHECK(fs::exists(out / "metrics_points.png"));
  CHECK(fs::exists(out / "metrics_box.png"));
  CHECK(fs::exists(out / "score_hist.png"));
  fs::remove_all(dir);
}

TEST_CASE("ablation presets map to the documented switch table") {
  const std::vector<AblationPreset> presets = standard_presets();
  REQUIRE(presets.size() == 5);

  AblationSwitches base = switches_for(AblationPreset::kBaseline);
  CHECK(!base.gle);

  AblationSwitches glecre = switches_for(AblationPreset::kGleCre);
  CHECK(glecre.gle);
  CHECK(!glecre.fda);
  CHECK(!glecre.dae);

  AblationSwitches fda = switches_for(AblationPreset::kFda);
  CHECK(fda.gle);
  CHECK(fda.fda);
  CHECK(!fda.dae);

  AblationSwitches dae = switches_for(AblationPreset::kDae);
  CHECK(dae.gle);
  CHECK(dae.fda);
  CHECK(dae.dae);
  CHECK(!dae.direct_score);

  AblationSwitches direct = switches_for(AblationPreset::kDirectScore);
  CHECK(direct.dae);
  CHECK(direct.direct_score);

  std::set<std::string> names;
  for (AblationPreset pr : presets) names.insert(to_string(pr));
  CHECK(names.size() == 5);
}
