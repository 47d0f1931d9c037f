#pragma once
#include "glesam/tensor.hpp"

namespace glesam {

// Binary-mask metrics. A pixel counts as foreground when its value is > 0;
// this matches thresholding mask logits at zero and 0/255 PNG masks alike.
// Conventions for degenerate cases:
//   iou, dice_coef: both masks empty -> 1.0
//   pixel_acc: plain fraction of agreeing pixels.
double iou(const Tensor& pred, const Tensor& truth);
double dice_coef(const Tensor& pred, const Tensor& truth);
double pixel_acc(const Tensor& pred, const Tensor& truth);

// Peak signal-to-noise ratio between two images in [0,1]; identical inputs
// give +inf.
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

}  // namespace glesam
