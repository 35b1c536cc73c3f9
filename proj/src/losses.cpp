#include "phar/losses.hpp"

namespace phar {

namespace {

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0f); }

}  // namespace

Tensor loss_feat_disc(const std::array<Tensor, 4>& refined_detached,
                      const std::array<Tensor, 4>& bg_features, const MaskPyramid& masks,
                      const DiscriminatorSet& discs, bool train) {
    Tensor total = Tensor::scalar(0.0f);
    for (int l = 0; l < 4; ++l) {
        Tensor fake = discs.feature_forward(l + 1, refined_detached[l], train);
        Tensor real = discs.feature_forward(l + 1, bg_features[l], train);
        total = add(total, mse(fake, masks.layers[l]));
        total = add(total, mse(real, zeros_like(real)));
    }
    return total;
}

Tensor loss_feat_gen(const std::array<Tensor, 4>& refined, const DiscriminatorSet& discs,
                     bool train) {
    Tensor total = Tensor::scalar(0.0f);
    for (int l = 0; l < 4; ++l) {
        Tensor score = discs.feature_forward(l + 1, refined[l], train);
        total = add(total, mse(score, zeros_like(score)));
    }
    return total;
}

Tensor loss_image_disc(const Tensor& output_detached, const Tensor& background,
                       const Tensor& mask, const DiscriminatorSet& discs, bool train) {
    Tensor fake = discs.image_forward(output_detached, train);
    Tensor real = discs.image_forward(background, train);
    return add(mse(fake, mask), mse(real, zeros_like(real)));
}

Tensor loss_image_gen(const Tensor& output, const DiscriminatorSet& discs, bool train) {
    Tensor score = discs.image_forward(output, train);
    return mse(score, zeros_like(score));
}

std::pair<Tensor, Tensor> loss_image_pair(const Tensor& output, const Tensor& background,
                                          const Tensor& mask, const DiscriminatorSet& discs,
                                          bool train) {
    Tensor d = loss_image_disc(output.detached(), background, mask, discs, train);
    Tensor g = loss_image_gen(output, discs, train);
    return {d, g};
}

Tensor loss_style_pre(const Tensor& output, const std::array<Tensor, 4>& psi_background,
                      const MaskPyramid& masks, const FeatureFn& psi) {
    std::array<Tensor, 4> taps = psi(output);
    Tensor total = Tensor::scalar(0.0f);
    for (int l = 0; l < 4; ++l) {
        auto [mu_fg, sd_fg] = masked_moments(taps[l], masks.layers[l]);
        Tensor ones(masks.layers[l].shape(), 1.0f);
        auto [mu_bg, sd_bg] = masked_moments(psi_background[l].detached(), ones);
        total = add(total, mse(mu_fg, mu_bg));
        total = add(total, mse(sd_fg, sd_bg));
    }
    return total;
}

Tensor loss_style(const Tensor& output, const Tensor& background, const MaskPyramid& masks,
                  const FeatureFn& psi) {
    std::array<Tensor, 4> psi_bg;
    {
        NoGradScope no_grad;  // targets stay constant
        psi_bg = psi(background);
    }
    return loss_style_pre(output, psi_bg, masks, psi);
}

Tensor loss_content_pre(const Tensor& output, const Tensor& psi4_composite,
                        const FeatureFn& psi) {
    std::array<Tensor, 4> taps = psi(output);
    return mse(taps[3], psi4_composite.detached());
}

Tensor loss_content(const Tensor& output, const Tensor& composite, const FeatureFn& psi) {
    Tensor target;
    {
        NoGradScope no_grad;
        target = psi(composite)[3];
    }
    return loss_content_pre(output, target, psi);
}

LossBundle assemble(const Tensor& l_content, const Tensor& l_style, const Tensor& l_adv_feat_G,
                    const Tensor& l_adv_img_G, const Tensor& l_adv_feat_D,
                    const Tensor& l_adv_img_D, const AblationFlags& flags) {
    LossBundle b;
    b.l_content = l_content;
    b.l_style = l_style;
    b.l_adv_feat_G = flags.use_feature_disc ? l_adv_feat_G : Tensor::scalar(0.0f);
    b.l_adv_img_G = flags.use_image_disc ? l_adv_img_G : Tensor::scalar(0.0f);
    b.l_adv_feat_D = flags.use_feature_disc ? l_adv_feat_D : Tensor::scalar(0.0f);
    b.l_adv_img_D = flags.use_image_disc ? l_adv_img_D : Tensor::scalar(0.0f);
    b.l_total_G = add(add(b.l_content, b.l_style), add(b.l_adv_feat_G, b.l_adv_img_G));
    b.l_total_D = add(b.l_adv_feat_D, b.l_adv_img_D);
    return b;
}

}  // namespace phar
