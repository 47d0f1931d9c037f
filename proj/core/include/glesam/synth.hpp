#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "glesam/image.hpp"
#include "glesam/tensor.hpp"

namespace glesam {

// Synthetic prompt-segmentation corpus: procedurally drawn shape scenes plus a
// three-level degradation pipeline (blur / resize / noise / JPEG) whose exact
// parameters are recorded per sample so any output can be rebuilt bit-exactly.

enum class BlurKind { kGaussian, kGeneralizedGaussian, kPlateau };
BlurKind blur_kind_from_string(const std::string& s);
std::string to_string(BlurKind k);

struct DegradationOp {
  enum class Kind { kBlur, kResize, kNoise, kJpeg };
  Kind kind = Kind::kBlur;
  // kBlur
  BlurKind blur_kind = BlurKind::kGaussian;
  int kernel_size = 0;
  double sigma = 0.0;
  double shape_beta = 1.0;
  // kResize
  double scale = 1.0;
  ResizeAlgo algo = ResizeAlgo::kBilinear;
  // kNoise
  bool poisson = false;
  double strength = 0.0;
  uint64_t noise_seed = 0;
  // kJpeg
  int quality = 90;
};

struct DegradationRecipe {
  int level = 1;       // 1..3, weakest to strongest
  uint64_t seed = 0;   // seed the recipe was sampled with
  std::vector<DegradationOp> ops;  // applied in order; last op restores dims

  std::string to_json() const;
  static DegradationRecipe from_json(const std::string& text);
};

struct ParamRange {
  double lo = 0.0;
  double hi = 0.0;
};

// Per-level sampling ranges. Every knob that shapes the corpus lives here.
struct LevelSpec {
  int resize_rate = 1;       // downsample factor; must divide the image size
  double blur_prob = 0.7;
  double noise_prob = 0.7;
  double jpeg_prob = 0.7;
  std::vector<int> kernel_sizes = {17, 19, 21};
  ParamRange sigma{1.2, 1.6};
  double gg_prob = 0.25;      // generalized-gaussian share of blur draws
  double plateau_prob = 0.15; // plateau share; remainder is gaussian
  ParamRange gg_beta{1.0, 2.0};
  ParamRange plateau_beta{1.5, 3.0};
  double poisson_prob = 0.3;  // else gaussian noise
  ParamRange noise_strength{0.004, 0.008};
  ParamRange jpeg_quality{76.0, 95.0};
};

struct SynthConfig {
  int image_size = 64;
  std::vector<LevelSpec> levels;  // index 0 -> level 1
  SynthConfig();                  // populates the calibrated three-level ladder
};

// ---- scene generation -------------------------------------------------------

// Procedural scene: textured background plus 1..3 striped anti-aliased shapes
// (ellipse / rectangle / polygon). Returns {image (3,S,S), mask (S,S) in {0,1}}
// with foreground fraction kept inside (0.05, 0.7). Deterministic in seed.
std::pair<Tensor, Tensor> gen_shape_sample(uint64_t seed, int size);

// ---- degradation ops --------------------------------------------------------

// Normalized isotropic 2-D kernel (K,K), K odd. With r2 = (dx^2+dy^2)/(2σ^2):
// gaussian exp(-r2), generalized gaussian exp(-r2^β), plateau 1/(1+r2^β).
Tensor make_blur_kernel(BlurKind kind, int kernel_size, double sigma, double beta);

Tensor apply_blur(const Tensor& img, const Tensor& kernel);
Tensor apply_resize(const Tensor& img, double scale, ResizeAlgo algo);
// Gaussian: x + N(0, strength^2). Poisson: shot noise with rate x/strength^2,
// rescaled back to [0,1]. Deterministic in seed; output clipped to [0,1].
Tensor apply_noise(const Tensor& img, bool poisson, double strength, uint64_t seed);
Tensor apply_jpeg(const Tensor& img, int quality);

DegradationRecipe sample_recipe(int level, uint64_t seed, const SynthConfig& cfg);
Tensor apply_recipe(const Tensor& img, const DegradationRecipe& recipe);
// sample_recipe + apply_recipe in one call.
std::pair<Tensor, DegradationRecipe> degrade(const Tensor& img, int level, uint64_t seed,
                                             const SynthConfig& cfg);

// ---- dataset ----------------------------------------------------------------

struct ManifestRecord {
  std::string id;
  std::string split;  // "train" | "test"
  int level = 1;
  std::string hq_path;    // relative to the dataset root
  std::string lq_path;
  std::string mask_path;
  DegradationRecipe recipe;
};

struct DatasetManifest {
  std::string version = "lqseg-1";
  uint64_t seed = 0;
  int image_size = 64;
  std::vector<ManifestRecord> records;

  void save(const std::string& path) const;
  static DatasetManifest load(const std::string& path);
};

// Writes hq/, lq/, mask/ image trees plus manifest.json under out_dir.
// Each sample is rendered once and degraded at every requested level.
// Identical arguments reproduce byte-identical trees; a failed build removes
// its partial output before rethrowing.
DatasetManifest build_dataset(int n_train, int n_test, const std::vector<int>& levels,
                              uint64_t seed, const std::string& out_dir,
                              const SynthConfig& cfg);

}  // namespace glesam
