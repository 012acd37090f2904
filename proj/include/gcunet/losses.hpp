#pragma once

#include "gcunet/mask.hpp"
#include "gcunet/ops.hpp"

namespace gcunet {

struct LossWeights {
  double w_dice = 0.7;
  double w_ce = 0.3;

  void validate() const {
    if (w_dice < 0.0 || w_dice > 1.0 || w_ce < 0.0 || w_ce > 1.0)
      fail_config("loss weights must lie in [0,1], got dice=" + std::to_string(w_dice) +
                  " ce=" + std::to_string(w_ce));
    if (std::abs(w_dice + w_ce - 1.0) > 1e-9)
      fail_config("loss weights must sum to 1, got " + std::to_string(w_dice + w_ce));
  }
};

namespace detail {

template <class S>
void check_loss_args(const Tensor<S>& logits, const LabelMask& target, const char* op) {
  if (logits.rank() != 4) fail_shape(std::string(op) + " expects logits [B,K,H,W]");
  Shape want{logits.dim(0), logits.dim(2), logits.dim(3)};
  if (target.shape != want)
    fail_shape(std::string(op) + " target shape " + shape_str(target.shape) +
               " does not match logits " + shape_str(logits.shape()));
  target.check_range(logits.dim(1), op);
}

}  // namespace detail

// soft dice averaged over all classes (background included):
//   per class c: (2 Σ p_c t_c + smooth) / (Σ p_c + Σ t_c + smooth), sums over batch+pixels
template <class S>
Tensor<S> dice_loss(const Tensor<S>& logits, const LabelMask& target, double smooth = 1e-5) {
  detail::check_loss_args(logits, target, "dice_loss");
  if (smooth <= 0.0) fail_config("dice_loss smooth must be > 0");
  Tensor<S> p = softmax(logits, 1);
  Tensor<S> t = one_hot<S>(target, logits.dim(1));
  Tensor<S> inter = reduce_sum(p * t, {0, 2, 3});               // [K]
  Tensor<S> denom = reduce_sum(p, {0, 2, 3}) + reduce_sum(t, {0, 2, 3});
  Tensor<S> per_class = (2.0 * inter + smooth) / (denom + smooth);
  return 1.0 - mean_all(per_class);
}

// mean negative log-likelihood of the target class over every pixel
template <class S>
Tensor<S> ce_loss(const Tensor<S>& logits, const LabelMask& target) {
  detail::check_loss_args(logits, target, "ce_loss");
  Tensor<S> lp = log_softmax(logits, 1);
  return -mean_all(select_class(lp, target));
}

template <class S>
Tensor<S> combined_loss(const Tensor<S>& logits, const LabelMask& target, LossWeights w = {},
                        double smooth = 1e-5) {
  w.validate();
  return w.w_dice * dice_loss(logits, target, smooth) + w.w_ce * ce_loss(logits, target);
}

}  // namespace gcunet
