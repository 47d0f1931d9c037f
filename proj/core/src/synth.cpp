#include "glesam/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "glesam/rng.hpp"

namespace glesam {
namespace {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

double pick(Rng& rng, const ParamRange& r) { return rng.uniform(r.lo, r.hi); }

// Separable gaussian blur of a raw (unclamped) field, reflect borders.
Tensor smooth_field(int c, int h, int w, double sigma, Rng& rng) {
  Tensor x({c, h, w});
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.normal();
  const int k = static_cast<int>(2 * std::lround(2 * sigma) + 1);
  const int half = k / 2;
  std::vector<double> ker(static_cast<size_t>(k));
  double s = 0.0;
  for (int i = 0; i < k; ++i) {
    ker[size_t(i)] = std::exp(-double((i - half) * (i - half)) / (2 * sigma * sigma));
    s += ker[size_t(i)];
  }
  for (double& v : ker) v /= s;
  auto reflect = [](int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return std::clamp(i, 0, n - 1);
  };
  Tensor t0 = x, t1 = x;
  for (int cc = 0; cc < c; ++cc) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        double acc = 0.0;
        for (int j = 0; j < k; ++j) acc += ker[size_t(j)] * x.at({cc, y, reflect(xx + j - half, w)});
        t0.at({cc, y, xx}) = acc;
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        double acc = 0.0;
        for (int j = 0; j < k; ++j) acc += ker[size_t(j)] * t0.at({cc, reflect(y + j - half, h), xx});
        t1.at({cc, y, xx}) = acc;
      }
    }
  }
  return t1;
}

struct ShapeGeom {
  int type = 0;  // 0 ellipse, 1 rectangle, 2 polygon
  double cx = 0, cy = 0, rx = 0, ry = 0, rot = 0;
  std::vector<double> px, py;  // polygon vertices
};

bool inside_shape(const ShapeGeom& g, double x, double y) {
  if (g.type == 2) {
    bool in = false;
    const size_t n = g.px.size();
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
      if (((g.py[i] > y) != (g.py[j] > y)) &&
          (x < (g.px[j] - g.px[i]) * (y - g.py[i]) / (g.py[j] - g.py[i]) + g.px[i])) {
        in = !in;
      }
    }
    return in;
  }
  const double dx = x - g.cx, dy = y - g.cy;
  const double xr = dx * std::cos(g.rot) + dy * std::sin(g.rot);
  const double yr = -dx * std::sin(g.rot) + dy * std::cos(g.rot);
  if (g.type == 1) return std::abs(xr) <= g.rx && std::abs(yr) <= g.ry;
  const double ex = xr / g.rx, ey = yr / g.ry;
  return ex * ex + ey * ey <= 1.0;
}

// One rendering attempt; the caller retries with a forked stream when the
// foreground fraction lands outside the accepted band.
std::pair<Tensor, Tensor> render_scene(Rng& rng, int size) {
  const int S = size;
  Tensor img({3, S, S});
  Tensor mask({S, S});

  // Background: smooth color field over a random base color, plus a band-
  // limited sinusoidal texture. The texture band (~0.06-0.10 cycles/px) is
  // low enough to survive the resize ladder and high enough that blur
  // attenuates it smoothly, so degradation strength stays observable.
  double base[3];
  for (double& b : base) b = rng.uniform(0.2, 0.7);
  Tensor field = smooth_field(3, S, S, 3.0, rng);
  const double fb = rng.uniform(0.35, 0.60);
  const double thb = rng.uniform(0.0, std::numbers::pi);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        double tb = std::sin(fb * (x * std::cos(thb) + y * std::sin(thb)));
        img.at({c, y, x}) = base[c] + 0.25 * field.at({c, y, x}) + 0.12 * tb;
      }
    }
  }

  const int n_shapes = 1 + rng.uniform_int(3);
  for (int si = 0; si < n_shapes; ++si) {
    ShapeGeom g;
    g.type = rng.uniform_int(3);
    g.cy = rng.uniform(0.19, 0.81) * S;
    g.cx = rng.uniform(0.19, 0.81) * S;
    g.ry = rng.uniform(0.09, 0.28) * S;
    g.rx = rng.uniform(0.09, 0.28) * S;
    g.rot = rng.uniform(0.0, std::numbers::pi);
    if (g.type == 2) {
      const int nv = 5 + rng.uniform_int(4);
      const double rad = rng.uniform(0.11, 0.28) * S;
      for (int v = 0; v < nv; ++v) {
        const double ang = 2.0 * std::numbers::pi * (v + 0.25 * rng.uniform()) / nv + g.rot;
        const double rr = rad * rng.uniform(0.55, 1.0);
        g.px.push_back(g.cx + rr * std::cos(ang));
        g.py.push_back(g.cy + rr * std::sin(ang));
      }
    }
    double col[3];
    for (double& c : col) c = rng.uniform(0.1, 0.9);
    const double ths = rng.uniform(0.0, std::numbers::pi);
    const double fq = rng.uniform(0.35, 0.60);

    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        // 3x3 supersampled coverage for anti-aliased edges.
        int hits = 0;
        for (int sy = -1; sy <= 1; ++sy) {
          for (int sx = -1; sx <= 1; ++sx) {
            if (inside_shape(g, x + sx / 3.0, y + sy / 3.0)) ++hits;
          }
        }
        if (hits == 0) continue;
        const double cov = hits / 9.0;
        const double stripe = 0.28 * std::sin(fq * (x * std::cos(ths) + y * std::sin(ths)));
        for (int c = 0; c < 3; ++c) {
          img.at({c, y, x}) = img.at({c, y, x}) * (1.0 - cov) + (col[c] + stripe) * cov;
        }
        if (cov >= 0.5) mask.at({y, x}) = 1.0;
      }
    }
  }
  for (int64_t i = 0; i < img.numel(); ++i) img[i] = std::clamp(img[i], 0.0, 1.0);
  return {img, mask};
}

ordered_json op_to_json(const DegradationOp& op) {
  ordered_json j;
  switch (op.kind) {
    case DegradationOp::Kind::kBlur:
      j["op"] = "blur";
      j["kind"] = to_string(op.blur_kind);
      j["kernel_size"] = op.kernel_size;
      j["sigma"] = op.sigma;
      j["shape_beta"] = op.shape_beta;
      break;
    case DegradationOp::Kind::kResize:
      j["op"] = "resize";
      j["scale"] = op.scale;
      j["algo"] = to_string(op.algo);
      break;
    case DegradationOp::Kind::kNoise:
      j["op"] = "noise";
      j["kind"] = op.poisson ? "poisson" : "gaussian";
      j["strength"] = op.strength;
      j["seed"] = op.noise_seed;
      break;
    case DegradationOp::Kind::kJpeg:
      j["op"] = "jpeg";
      j["quality"] = op.quality;
      break;
  }
  return j;
}

DegradationOp op_from_json(const ordered_json& j) {
  DegradationOp op;
  const std::string kind = j.at("op").get<std::string>();
  if (kind == "blur") {
    op.kind = DegradationOp::Kind::kBlur;
    op.blur_kind = blur_kind_from_string(j.at("kind").get<std::string>());
    op.kernel_size = j.at("kernel_size").get<int>();
    op.sigma = j.at("sigma").get<double>();
    op.shape_beta = j.at("shape_beta").get<double>();
  } else if (kind == "resize") {
    op.kind = DegradationOp::Kind::kResize;
    op.scale = j.at("scale").get<double>();
    op.algo = resize_algo_from_string(j.at("algo").get<std::string>());
  } else if (kind == "noise") {
    op.kind = DegradationOp::Kind::kNoise;
    op.poisson = j.at("kind").get<std::string>() == "poisson";
    op.strength = j.at("strength").get<double>();
    op.noise_seed = j.at("seed").get<uint64_t>();
  } else if (kind == "jpeg") {
    op.kind = DegradationOp::Kind::kJpeg;
    op.quality = j.at("quality").get<int>();
  } else {
    throw std::invalid_argument("unknown degradation op: " + kind);
  }
  return op;
}

ordered_json recipe_to_json_obj(const DegradationRecipe& r) {
  ordered_json j;
  j["level"] = r.level;
  j["seed"] = r.seed;
  j["ops"] = ordered_json::array();
  for (const auto& op : r.ops) j["ops"].push_back(op_to_json(op));
  return j;
}

DegradationRecipe recipe_from_json_obj(const ordered_json& j) {
  DegradationRecipe r;
  r.level = j.at("level").get<int>();
  r.seed = j.at("seed").get<uint64_t>();
  for (const auto& jo : j.at("ops")) r.ops.push_back(op_from_json(jo));
  return r;
}

const LevelSpec& level_spec(const SynthConfig& cfg, int level) {
  if (level < 1 || level > static_cast<int>(cfg.levels.size())) {
    throw std::invalid_argument("degradation level out of range: " + std::to_string(level));
  }
  return cfg.levels[size_t(level - 1)];
}

}  // namespace

BlurKind blur_kind_from_string(const std::string& s) {
  if (s == "gaussian") return BlurKind::kGaussian;
  if (s == "generalized_gaussian") return BlurKind::kGeneralizedGaussian;
  if (s == "plateau") return BlurKind::kPlateau;
  throw std::invalid_argument("unknown blur kind: " + s);
}

std::string to_string(BlurKind k) {
  switch (k) {
    case BlurKind::kGaussian: return "gaussian";
    case BlurKind::kGeneralizedGaussian: return "generalized_gaussian";
    case BlurKind::kPlateau: return "plateau";
  }
  throw std::invalid_argument("to_string: unknown blur kind");
}

std::string DegradationRecipe::to_json() const { return recipe_to_json_obj(*this).dump(); }

DegradationRecipe DegradationRecipe::from_json(const std::string& text) {
  return recipe_from_json_obj(ordered_json::parse(text));
}

SynthConfig::SynthConfig() {
  // Three-level ladder calibrated so the latent deviation of each level is
  // dominated by band-limited amplitude attenuation (blur, mild resampling)
  // rather than by additive junk (noise floors kept low, rates divide the
  // image size exactly).
  LevelSpec l1;
  l1.resize_rate = 1;
  l1.sigma = {1.2, 1.6};
  l1.noise_strength = {0.004, 0.008};
  l1.jpeg_quality = {76.0, 95.0};
  LevelSpec l2;
  l2.resize_rate = 2;
  l2.sigma = {2.1, 2.7};
  l2.noise_strength = {0.008, 0.014};
  l2.jpeg_quality = {55.0, 80.0};
  LevelSpec l3;
  l3.resize_rate = 4;
  l3.sigma = {2.6, 3.0};
  l3.noise_strength = {0.012, 0.02};
  l3.jpeg_quality = {35.0, 60.0};
  levels = {l1, l2, l3};
}

std::pair<Tensor, Tensor> gen_shape_sample(uint64_t seed, int size) {
  if (size < 8) throw std::invalid_argument("gen_shape_sample: size too small");
  Rng base(seed);
  for (int attempt = 0; attempt < 64; ++attempt) {
    Rng rng = base.fork(uint64_t(attempt));
    auto [img, mask] = render_scene(rng, size);
    const double frac = mask.mean();
    if (frac > 0.05 && frac < 0.7) return {img, mask};
  }
  throw std::runtime_error("gen_shape_sample: could not hit target foreground fraction");
}

Tensor make_blur_kernel(BlurKind kind, int kernel_size, double sigma, double beta) {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw std::invalid_argument("make_blur_kernel: kernel size must be odd and positive");
  }
  if (sigma <= 0.0) throw std::invalid_argument("make_blur_kernel: sigma must be positive");
  if (beta <= 0.0) throw std::invalid_argument("make_blur_kernel: shape beta must be positive");
  Tensor k({kernel_size, kernel_size});
  const int half = kernel_size / 2;
  double sum = 0.0;
  for (int y = 0; y < kernel_size; ++y) {
    for (int x = 0; x < kernel_size; ++x) {
      const double dy = y - half, dx = x - half;
      const double r2 = (dx * dx + dy * dy) / (2.0 * sigma * sigma);
      double v = 0.0;
      switch (kind) {
        case BlurKind::kGaussian: v = std::exp(-r2); break;
        case BlurKind::kGeneralizedGaussian: v = std::exp(-std::pow(r2, beta)); break;
        case BlurKind::kPlateau: v = 1.0 / (1.0 + std::pow(r2, beta)); break;
      }
      k.at({y, x}) = v;
      sum += v;
    }
  }
  for (int64_t i = 0; i < k.numel(); ++i) k[i] /= sum;
  return k;
}

Tensor apply_blur(const Tensor& img, const Tensor& kernel) { return convolve_reflect(img, kernel); }

Tensor apply_resize(const Tensor& img, double scale, ResizeAlgo algo) {
  if (scale <= 0.0) throw std::invalid_argument("apply_resize: scale must be positive");
  const int out_h = std::max(1, static_cast<int>(std::lround(img.dim(1) * scale)));
  const int out_w = std::max(1, static_cast<int>(std::lround(img.dim(2) * scale)));
  return resize_image(img, out_h, out_w, algo);
}

Tensor apply_noise(const Tensor& img, bool poisson, double strength, uint64_t seed) {
  if (img.ndim() != 3) throw std::invalid_argument("apply_noise: expected (3,H,W)");
  if (strength <= 0.0) throw std::invalid_argument("apply_noise: strength must be positive");
  Rng rng(seed);
  Tensor out = img;
  if (poisson) {
    // Shot noise: rate lambda*x with lambda = 1/strength^2, so the per-pixel
    // sd is strength*sqrt(x) — matched in scale to the gaussian branch.
    const double lambda = 1.0 / (strength * strength);
    for (int64_t i = 0; i < out.numel(); ++i) {
      out[i] = std::clamp(rng.poisson(std::clamp(out[i], 0.0, 1.0) * lambda) / lambda, 0.0, 1.0);
    }
  } else {
    for (int64_t i = 0; i < out.numel(); ++i) {
      out[i] = std::clamp(out[i] + rng.normal() * strength, 0.0, 1.0);
    }
  }
  return out;
}

Tensor apply_jpeg(const Tensor& img, int quality) { return jpeg_roundtrip(img, quality); }

DegradationRecipe sample_recipe(int level, uint64_t seed, const SynthConfig& cfg) {
  const LevelSpec& L = level_spec(cfg, level);
  if (L.resize_rate < 1 || cfg.image_size % L.resize_rate != 0) {
    throw std::invalid_argument("sample_recipe: resize rate must divide the image size");
  }
  Rng rng(seed);
  DegradationRecipe r;
  r.level = level;
  r.seed = seed;

  // Inclusion flags first. A recipe must alter pixels somewhere, so when the
  // resize rate is 1 (identity resize) at least one other op is required.
  bool with_blur = false, with_noise = false, with_jpeg = false;
  for (int tries = 0; tries < 64; ++tries) {
    with_blur = rng.uniform() < L.blur_prob;
    with_noise = rng.uniform() < L.noise_prob;
    with_jpeg = rng.uniform() < L.jpeg_prob;
    if (L.resize_rate > 1 || with_blur || with_noise || with_jpeg) break;
  }

  DegradationOp blur;
  if (with_blur) {
    blur.kind = DegradationOp::Kind::kBlur;
    const double u = rng.uniform();
    if (u < L.gg_prob) {
      blur.blur_kind = BlurKind::kGeneralizedGaussian;
      blur.shape_beta = pick(rng, L.gg_beta);
    } else if (u < L.gg_prob + L.plateau_prob) {
      blur.blur_kind = BlurKind::kPlateau;
      blur.shape_beta = pick(rng, L.plateau_beta);
    } else {
      blur.blur_kind = BlurKind::kGaussian;
      blur.shape_beta = 1.0;
    }
    blur.kernel_size = L.kernel_sizes[size_t(rng.uniform_int(int(L.kernel_sizes.size())))];
    blur.sigma = pick(rng, L.sigma);
  }

  DegradationOp down;
  down.kind = DegradationOp::Kind::kResize;
  down.scale = 1.0 / L.resize_rate;
  {
    const int a = rng.uniform_int(3);
    down.algo = a == 0 ? ResizeAlgo::kArea : (a == 1 ? ResizeAlgo::kBilinear : ResizeAlgo::kBicubic);
  }

  DegradationOp noise;
  if (with_noise) {
    noise.kind = DegradationOp::Kind::kNoise;
    noise.poisson = rng.uniform() < L.poisson_prob;
    noise.strength = pick(rng, L.noise_strength);
    noise.noise_seed = rng.next_u64();
  }

  DegradationOp jpeg;
  if (with_jpeg) {
    jpeg.kind = DegradationOp::Kind::kJpeg;
    const int lo = static_cast<int>(std::lround(L.jpeg_quality.lo));
    const int hi = static_cast<int>(std::lround(L.jpeg_quality.hi));
    jpeg.quality = lo + rng.uniform_int(hi - lo + 1);
  }

  // Random order of the included pixel ops; the downsample is glued directly
  // after the blur (sensor PSF precedes sampling, and the blur sigmas are
  // calibrated against original-resolution frequencies), or leads when no
  // blur was drawn. The dimension-restoring upsample always comes last.
  std::vector<DegradationOp> middle;
  if (with_blur) middle.push_back(blur);
  if (with_noise) middle.push_back(noise);
  if (with_jpeg) middle.push_back(jpeg);
  for (int i = int(middle.size()) - 1; i > 0; --i) {
    std::swap(middle[size_t(i)], middle[size_t(rng.uniform_int(i + 1))]);
  }
  size_t down_pos = 0;
  for (size_t i = 0; i < middle.size(); ++i) {
    if (middle[i].kind == DegradationOp::Kind::kBlur) down_pos = i + 1;
  }
  middle.insert(middle.begin() + static_cast<std::ptrdiff_t>(down_pos), down);
  r.ops = std::move(middle);

  if (L.resize_rate > 1) {
    DegradationOp up;
    up.kind = DegradationOp::Kind::kResize;
    up.scale = double(L.resize_rate);
    up.algo = rng.uniform() < 0.5 ? ResizeAlgo::kBilinear : ResizeAlgo::kBicubic;
    r.ops.push_back(up);
  }
  return r;
}

Tensor apply_recipe(const Tensor& img, const DegradationRecipe& recipe) {
  Tensor x = img;
  for (const auto& op : recipe.ops) {
    switch (op.kind) {
      case DegradationOp::Kind::kBlur:
        x = apply_blur(x, make_blur_kernel(op.blur_kind, op.kernel_size, op.sigma, op.shape_beta));
        break;
      case DegradationOp::Kind::kResize:
        x = apply_resize(x, op.scale, op.algo);
        break;
      case DegradationOp::Kind::kNoise:
        x = apply_noise(x, op.poisson, op.strength, op.noise_seed);
        break;
      case DegradationOp::Kind::kJpeg:
        x = apply_jpeg(x, op.quality);
        break;
    }
  }
  return x;
}

std::pair<Tensor, DegradationRecipe> degrade(const Tensor& img, int level, uint64_t seed,
                                             const SynthConfig& cfg) {
  DegradationRecipe r = sample_recipe(level, seed, cfg);
  return {apply_recipe(img, r), r};
}

void DatasetManifest::save(const std::string& path) const {
  ordered_json j;
  j["version"] = version;
  j["seed"] = seed;
  j["image_size"] = image_size;
  j["records"] = ordered_json::array();
  for (const auto& rec : records) {
    ordered_json jr;
    jr["id"] = rec.id;
    jr["split"] = rec.split;
    jr["level"] = rec.level;
    jr["hq"] = rec.hq_path;
    jr["lq"] = rec.lq_path;
    jr["mask"] = rec.mask_path;
    jr["recipe"] = recipe_to_json_obj(rec.recipe);
    j["records"].push_back(std::move(jr));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("manifest save: cannot open " + path);
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("manifest save: write failed for " + path);
}

DatasetManifest DatasetManifest::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("manifest load: cannot open " + path);
  ordered_json j = ordered_json::parse(f);
  DatasetManifest m;
  m.version = j.at("version").get<std::string>();
  m.seed = j.at("seed").get<uint64_t>();
  m.image_size = j.at("image_size").get<int>();
  for (const auto& jr : j.at("records")) {
    ManifestRecord rec;
    rec.id = jr.at("id").get<std::string>();
    rec.split = jr.at("split").get<std::string>();
    rec.level = jr.at("level").get<int>();
    rec.hq_path = jr.at("hq").get<std::string>();
    rec.lq_path = jr.at("lq").get<std::string>();
    rec.mask_path = jr.at("mask").get<std::string>();
    rec.recipe = recipe_from_json_obj(jr.at("recipe"));
    m.records.push_back(std::move(rec));
  }
  return m;
}

DatasetManifest build_dataset(int n_train, int n_test, const std::vector<int>& levels,
                              uint64_t seed, const std::string& out_dir, const SynthConfig& cfg) {
  if (n_train < 0 || n_test < 0 || n_train + n_test == 0) {
    throw std::invalid_argument("build_dataset: need at least one sample");
  }
  if (levels.empty()) throw std::invalid_argument("build_dataset: need at least one level");
  for (int lv : levels) level_spec(cfg, lv);  // validates range

  const fs::path root(out_dir);
  const bool preexisting = fs::exists(root);
  try {
    fs::create_directories(root / "hq");
    fs::create_directories(root / "lq");
    fs::create_directories(root / "mask");

    DatasetManifest m;
    m.seed = seed;
    m.image_size = cfg.image_size;

    Rng seq(seed);
    auto emit = [&](const std::string& prefix, const std::string& split, int count) {
      for (int i = 0; i < count; ++i) {
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "%s%04d", prefix.c_str(), i);
        const std::string id(idbuf);
        const uint64_t scene_seed = seq.next_u64();
        auto [img, mask] = gen_shape_sample(scene_seed, cfg.image_size);
        // Degradations run on the 8-bit grid the PNG stores, so a recipe
        // replayed against the saved HQ file reproduces the LQ file exactly.
        const Tensor hq = quantize8(img);
        const std::string hq_rel = "hq/" + id + ".png";
        const std::string mask_rel = "mask/" + id + ".png";
        save_image_png((root / hq_rel).string(), hq);
        save_mask_png((root / mask_rel).string(), mask);
        for (int lv : levels) {
          const uint64_t recipe_seed = seq.next_u64();
          auto [lq, recipe] = degrade(hq, lv, recipe_seed, cfg);
          const std::string lq_rel = "lq/" + id + "_l" + std::to_string(lv) + ".png";
          save_image_png((root / lq_rel).string(), lq);
          ManifestRecord rec;
          rec.id = id;
          rec.split = split;
          rec.level = lv;
          rec.hq_path = hq_rel;
          rec.lq_path = lq_rel;
          rec.mask_path = mask_rel;
          rec.recipe = std::move(recipe);
          m.records.push_back(std::move(rec));
        }
      }
    };
    emit("tr", "train", n_train);
    emit("te", "test", n_test);
    m.save((root / "manifest.json").string());
    return m;
  } catch (...) {
    // Leave no partial dataset behind; only remove what this call created.
    std::error_code ec;
    if (!preexisting) {
      fs::remove_all(root, ec);
    } else {
      fs::remove_all(root / "hq", ec);
      fs::remove_all(root / "lq", ec);
      fs::remove_all(root / "mask", ec);
      fs::remove(root / "manifest.json", ec);
    }
    throw;
  }
}

}  // namespace glesam
