#pragma once
#include <string>

#include "glesam/tensor.hpp"

namespace glesam {

// Images are (3,H,W) tensors in [0,1]; masks are (H,W) tensors in {0,1}.
// Files are 8-bit: RGB PNG/JPEG for images, single-channel PNG for masks
// (0 = background, 255 = foreground).

enum class ResizeAlgo { kBilinear, kBicubic, kArea };
ResizeAlgo resize_algo_from_string(const std::string& s);
std::string to_string(ResizeAlgo a);

void save_image_png(const std::string& path, const Tensor& img);
Tensor load_image_png(const std::string& path);

void save_mask_png(const std::string& path, const Tensor& mask);
Tensor load_mask_png(const std::string& path);

// Round x in [0,1] to the 8-bit grid (the value a file round-trip would give).
Tensor quantize8(const Tensor& img);

Tensor resize_image(const Tensor& img, int out_h, int out_w, ResizeAlgo algo);

// Encode to JPEG in memory at the given quality (1..100) and decode back.
Tensor jpeg_roundtrip(const Tensor& img, int quality);

// Per-channel 2-D convolution with a normalized kernel, reflective borders.
Tensor convolve_reflect(const Tensor& img, const Tensor& kernel);

}  // namespace glesam
