#pragma once
#include "glesam/autodiff.hpp"

namespace glesam {

// Mean squared error over every element.
ad::Value mse_loss(ad::Value pred, ad::Value target);

// Soft Dice loss on logits. logits/target: (B,H,W), target binary {0,1}.
// Per sample: 1 - (2*sum(p*m) + smooth) / (sum(p) + sum(m) + smooth),
// averaged over the batch.
ad::Value dice_loss(ad::Value logits, ad::Value target, double smooth = 1.0);

// Focal loss on logits, exponent fixed at 2:
// mean over pixels of -alpha_t * (1 - p_t)^2 * log(p_t),
// p_t = p*m + (1-p)*(1-m), alpha_t = alpha*m + (1-alpha)*(1-m).
ad::Value focal_loss(ad::Value logits, ad::Value target, double alpha = 0.25);

// Segmentation training objective: dice + focal.
ad::Value seg_loss(ad::Value logits, ad::Value target);

}  // namespace glesam
