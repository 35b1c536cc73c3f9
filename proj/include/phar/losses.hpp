#pragma once

#include <array>
#include <functional>

#include "phar/discriminators.hpp"
#include "phar/generator.hpp"

namespace phar {

// Frozen feature extractor: returns the four encoder taps of an image.
using FeatureFn = std::function<std::array<Tensor, 4>(const Tensor&)>;

struct LossBundle {
    Tensor l_content, l_style, l_adv_feat_G, l_adv_img_G, l_total_G;
    Tensor l_adv_feat_D, l_adv_img_D, l_total_D;
};

// Discriminator side of the feature adversarial pair: refined features score
// against the layer mask, background features against zero. The refined
// features must be detached so no gradient reaches the generator.
Tensor loss_feat_disc(const std::array<Tensor, 4>& refined_detached,
                      const std::array<Tensor, 4>& bg_features, const MaskPyramid& masks,
                      const DiscriminatorSet& discs, bool train);

// Generator side: all refined-feature pixels should score as background.
Tensor loss_feat_gen(const std::array<Tensor, 4>& refined, const DiscriminatorSet& discs,
                     bool train);

Tensor loss_image_disc(const Tensor& output_detached, const Tensor& background,
                       const Tensor& mask, const DiscriminatorSet& discs, bool train);
Tensor loss_image_gen(const Tensor& output, const DiscriminatorSet& discs, bool train);

// Convenience pair matching the image-level adversarial contract: d_loss on
// the detached output, g_loss on the attached one.
std::pair<Tensor, Tensor> loss_image_pair(const Tensor& output, const Tensor& background,
                                          const Tensor& mask, const DiscriminatorSet& discs,
                                          bool train);

// Statistic-matching style loss over the four taps: masked foreground moments
// of psi(output) against whole-map moments of the background features.
Tensor loss_style(const Tensor& output, const Tensor& background, const MaskPyramid& masks,
                  const FeatureFn& psi);
// Same, with the background taps already computed.
Tensor loss_style_pre(const Tensor& output, const std::array<Tensor, 4>& psi_background,
                      const MaskPyramid& masks, const FeatureFn& psi);

// Deep-feature fidelity to the composite at the fourth tap.
Tensor loss_content(const Tensor& output, const Tensor& composite, const FeatureFn& psi);
Tensor loss_content_pre(const Tensor& output, const Tensor& psi4_composite,
                        const FeatureFn& psi);

struct AblationFlags {
    bool use_residual_encoder = true;
    bool use_feature_disc = true;
    bool use_image_disc = true;
};

// Unit-weight totals; inactive components enter as exact zeros.
LossBundle assemble(const Tensor& l_content, const Tensor& l_style, const Tensor& l_adv_feat_G,
                    const Tensor& l_adv_img_G, const Tensor& l_adv_feat_D,
                    const Tensor& l_adv_img_D, const AblationFlags& flags);

}  // namespace phar
