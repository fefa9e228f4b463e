#pragma once

// Identity loss (CosFace), pooled attribute BCE for prediction and
// suppression groups, and their weighted sum.

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attrface/groups.hpp"
#include "attrface/tensor.hpp"

namespace attrface {

struct LossWeights {
  double lambda_pred = 5.0;
  double lambda_adv = 2.0;
  double margin_m = 0.35;
  double scale_r = 64.0;

  void validate() const {
    if (!(lambda_pred >= 0)) throw ConfigError("lambda_pred", "must be nonnegative");
    if (!(lambda_adv >= 0)) throw ConfigError("lambda_adv", "must be nonnegative");
    if (!(margin_m >= 0 && margin_m < 1)) throw ConfigError("margin_m", "must lie in [0, 1)");
    if (!(scale_r > 0)) throw ConfigError("scale_r", "must be positive");
  }
};

/// Tolerance on cosine logits straying outside [-1, 1] through rounding.
inline constexpr double kCosineSlack = 1e-6;

/// Batch mean of -log softmax of r*(cos - m*onehot) at the target class.
template <std::floating_point T>
Tensor<T> cosface_loss(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::size_t> labels, double margin_m,
                       double scale_r) {
  if (logits.rank() != 2) throw ShapeError("cosface_loss: logits must be [batch, classes], got " + shape_string(logits.shape()));
  const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
  if (labels.size() != batch) {
    throw ShapeError("cosface_loss: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(batch));
  }
  for (std::size_t i = 0; i < batch; ++i) {
    if (labels[i] >= classes) {
      throw ConfigError("labels", "label " + std::to_string(labels[i]) + " out of range [0," + std::to_string(classes) + ")");
    }
  }
  for (T v : logits.values()) {
    if (!(std::abs(static_cast<double>(v)) <= 1.0 + kCosineSlack)) {
      throw NumericError("cosface_loss: logit " + std::to_string(static_cast<double>(v)) + " is not a cosine");
    }
  }
  std::vector<T> onehot(batch * classes, T(0));
  std::vector<T> shift(batch * classes, T(0));
  for (std::size_t i = 0; i < batch; ++i) {
    onehot[i * classes + labels[i]] = T(1);
    shift[i * classes + labels[i]] = static_cast<T>(-margin_m);
  }
  const Tensor<T> onehot_t({batch, classes}, std::move(onehot));
  const Tensor<T> shift_t({batch, classes}, std::move(shift));
  auto scaled = tape.scale(tape.add(logits, shift_t), static_cast<T>(scale_r));
  auto lse = tape.log_sum_exp_rows(scaled);
  auto target = tape.sum_rows(tape.mul(scaled, onehot_t));
  return tape.mean(tape.add(lse, tape.scale(target, T(-1))));
}

template <std::floating_point T>
using GroupTensors = std::map<Group, Tensor<T>>;

namespace detail {

template <std::floating_point T>
Tensor<T> pooled_bce(Tape<T>& tape, const GroupTensors<T>& logits, const GroupTensors<T>& labels,
                     const GroupTensors<T>& masks, const char* what) {
  if (logits.empty()) throw ConfigError("modes", std::string(what) + ": no groups in this term");
  Tensor<T> total;
  double count = 0;
  for (const auto& [group, l] : logits) {
    const auto y = labels.find(group);
    if (y == labels.end()) throw ShapeError(std::string(what) + ": no labels for group " + std::string(group_name(group)));
    Tensor<T> mask;
    if (auto m = masks.find(group); m != masks.end()) {
      mask = m->second;
    } else {
      mask = Tensor<T>(l.shape(), std::vector<T>(l.numel(), T(1)));
    }
    for (T v : mask.values()) count += static_cast<double>(v);
    auto s = tape.sum(tape.bce_with_logits(l, y->second, mask));
    total = total.defined() ? tape.add(total, s) : s;
  }
  if (count <= 0) throw ConfigError("mask", std::string(what) + ": every attribute term is masked out");
  return tape.scale(total, static_cast<T>(1.0 / count));
}

}  // namespace detail

/// Mean BCE over every unmasked (sample, attribute) pair, pooled across the
/// predict-mode groups with one global denominator.
template <std::floating_point T>
Tensor<T> attribute_prediction_loss(Tape<T>& tape, const GroupTensors<T>& logits, const GroupTensors<T>& labels,
                                    const GroupTensors<T>& masks = {}) {
  return detail::pooled_bce(tape, logits, labels, masks, "attribute_prediction_loss");
}

/// Same formula over the suppress-mode groups. The adversarial effect comes
/// from the gradient reversal in front of those heads, not from this function.
template <std::floating_point T>
Tensor<T> adversarial_suppression_loss(Tape<T>& tape, const GroupTensors<T>& logits, const GroupTensors<T>& labels,
                                       const GroupTensors<T>& masks = {}) {
  return detail::pooled_bce(tape, logits, labels, masks, "adversarial_suppression_loss");
}

/// L_id + lambda_pred * L_attr + lambda_adv * L_adv. Absent or zero-weighted
/// terms contribute nothing.
template <std::floating_point T>
Tensor<T> total_loss(Tape<T>& tape, const Tensor<T>& l_id, const std::optional<Tensor<T>>& l_attr,
                     const std::optional<Tensor<T>>& l_adv, const LossWeights& w) {
  w.validate();
  Tensor<T> total = l_id;
  if (l_attr && w.lambda_pred != 0) total = tape.add(total, tape.scale(*l_attr, static_cast<T>(w.lambda_pred)));
  if (l_adv && w.lambda_adv != 0) total = tape.add(total, tape.scale(*l_adv, static_cast<T>(w.lambda_adv)));
  return total;
}

}  // namespace attrface
