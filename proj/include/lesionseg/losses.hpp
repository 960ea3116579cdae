#pragma once

#include <torch/torch.h>

#include <string>

#include "lesionseg/common.hpp"
#include "lesionseg/models.hpp"

namespace lesionseg {

struct LossConfig {
  double beta = 10.0;        // positive-class weight in the BCE term
  double lambda_gan = 0.01;  // adversarial term weight
  double eps = 1e-7;         // probability clamp before logarithms
  std::string gan_loss_form = "non_saturating";  // | "minimax"

  void validate() const {
    if (!(beta > 0.0)) throw ConfigError("loss.beta must be > 0");
    if (lambda_gan < 0.0) throw ConfigError("loss.lambda_gan must be >= 0");
    if (!(eps > 0.0 && eps < 1e-3)) throw ConfigError("loss.eps must lie in (0, 1e-3)");
    if (gan_loss_form != "non_saturating" && gan_loss_form != "minimax")
      throw ConfigError("loss.gan_loss_form must be 'non_saturating' or 'minimax'");
  }
};

namespace detail {

inline void check_no_nan(const torch::Tensor& t, const char* what) {
  if (torch::isnan(t).any().item<bool>())
    throw NumericalError(std::string(what) + ": NaN in input tensor");
}

}  // namespace detail

// Mean over pixels of -(beta*y*log(p) + (1-y)*log(1-p)), p clamped to
// [eps, 1-eps].
inline torch::Tensor weighted_bce(const torch::Tensor& p, const torch::Tensor& y, double beta,
                                  double eps = 1e-7) {
  if (!p.sizes().equals(y.sizes()))
    throw DataError("weighted_bce: prediction/target shape mismatch");
  detail::check_no_nan(p, "weighted_bce");
  detail::check_no_nan(y, "weighted_bce");
  auto pc = p.clamp(eps, 1.0 - eps);
  auto loss = -(beta * y * torch::log(pc) + (1.0 - y) * torch::log(1.0 - pc));
  return loss.mean();
}

// Equal-weight mean of the weighted BCE over every side map plus the fused
// map; each stage is supervised, not only the fusion.
inline torch::Tensor deep_supervision_loss(const SideOutputs& outs, const torch::Tensor& y,
                                           double beta, double eps = 1e-7) {
  auto maps = outs.all_maps();
  if (maps.empty() || !outs.fused_map.defined())
    throw DataError("deep_supervision_loss: no output maps");
  torch::Tensor total;
  for (size_t i = 0; i < maps.size(); ++i) {
    try {
      auto term = weighted_bce(maps[i], y, beta, eps);
      total = total.defined() ? total + term : term;
    } catch (const NumericalError& e) {
      throw NumericalError("deep_supervision_loss at map " + std::to_string(i) + ": " + e.what());
    } catch (const std::exception& e) {
      throw DataError("deep_supervision_loss at map " + std::to_string(i) + ": " + e.what());
    }
  }
  return total / static_cast<double>(maps.size());
}

// Per-patch real/fake cross entropy: BCE(sigmoid(real),1) + BCE(sigmoid(fake),0).
inline torch::Tensor gan_discriminator_loss(const torch::Tensor& logits_real,
                                            const torch::Tensor& logits_fake) {
  detail::check_no_nan(logits_real, "gan_discriminator_loss");
  detail::check_no_nan(logits_fake, "gan_discriminator_loss");
  namespace F = torch::nn::functional;
  return F::binary_cross_entropy_with_logits(logits_real, torch::ones_like(logits_real)) +
         F::binary_cross_entropy_with_logits(logits_fake, torch::zeros_like(logits_fake));
}

// Non-saturating by default (maximize log D(fake)); "minimax" minimizes
// log(1 - D(fake)) instead. Both are strictly decreasing in every logit.
inline torch::Tensor gan_generator_loss(const torch::Tensor& logits_fake,
                                        const std::string& form = "non_saturating") {
  detail::check_no_nan(logits_fake, "gan_generator_loss");
  namespace F = torch::nn::functional;
  if (form == "non_saturating")
    return F::binary_cross_entropy_with_logits(logits_fake, torch::ones_like(logits_fake));
  if (form == "minimax")
    return -F::binary_cross_entropy_with_logits(logits_fake, torch::zeros_like(logits_fake));
  throw ConfigError("gan_generator_loss: unknown form '" + form + "'");
}

// Combined objective: seg_loss + lambda_gan * gan_loss.
inline torch::Tensor generator_total_loss(const torch::Tensor& seg_loss,
                                          const torch::Tensor& gan_loss, double lambda_gan) {
  if (lambda_gan < 0.0) throw ConfigError("generator_total_loss: lambda_gan must be >= 0");
  detail::check_no_nan(seg_loss, "generator_total_loss");
  detail::check_no_nan(gan_loss, "generator_total_loss");
  return seg_loss + lambda_gan * gan_loss;
}

inline double generator_total_loss(double seg_loss, double gan_loss, double lambda_gan) {
  if (lambda_gan < 0.0) throw ConfigError("generator_total_loss: lambda_gan must be >= 0");
  if (std::isnan(seg_loss) || std::isnan(gan_loss))
    throw NumericalError("generator_total_loss: NaN input");
  return seg_loss + lambda_gan * gan_loss;
}

}  // namespace lesionseg
