#include "phar/generator.hpp"

#include <algorithm>

#include "phar/checkpoint.hpp"

namespace phar {

Generator::Generator(const GeneratorConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.scale < 1) throw_value("Generator: scale must be >= 1");
    for (int l : cfg.residual_layers)
        if (l < 1 || l > 4)
            throw_value("Generator: residual layer index " + std::to_string(l) +
                        " outside 1..4");
    const int w1 = width(1), w2 = width(2), w3 = width(3), w4 = width(4);

    c11_ = ConvLayer(em_, rng, "E_m.conv1_1", 3, w1, 3, 1, 1, PadMode::zero, false);
    c12_ = ConvLayer(em_, rng, "E_m.conv1_2", w1, w1, 3, 1, 1, PadMode::zero, false);
    c21_ = ConvLayer(em_, rng, "E_m.conv2_1", w1, w2, 3, 1, 1, PadMode::zero, false);
    c22_ = ConvLayer(em_, rng, "E_m.conv2_2", w2, w2, 3, 1, 1, PadMode::zero, false);
    c31_ = ConvLayer(em_, rng, "E_m.conv3_1", w2, w3, 3, 1, 1, PadMode::zero, false);
    c32_ = ConvLayer(em_, rng, "E_m.conv3_2", w3, w3, 3, 1, 1, PadMode::zero, false);
    c33_ = ConvLayer(em_, rng, "E_m.conv3_3", w3, w3, 3, 1, 1, PadMode::zero, false);
    c34_ = ConvLayer(em_, rng, "E_m.conv3_4", w3, w3, 3, 1, 1, PadMode::zero, false);
    c41_ = ConvLayer(em_, rng, "E_m.conv4_1", w3, w4, 3, 1, 1, PadMode::zero, false);

    const int widths[4] = {w1, w2, w3, w4};
    int prev = 4;  // concat(image, mask)
    for (int l = 0; l < 4; ++l) {
        const std::string p = "E_r.stage" + std::to_string(l + 1);
        trans_[l] = ConvLayer(er_, rng, p + ".trans", prev, widths[l], 3, l == 0 ? 1 : 2, 1);
        res_[l] = ResidualBlock(er_, rng, p + ".res", widths[l]);
        prev = widths[l];
    }

    // decoder convs feed batch norm, so they carry no bias
    d4_ = ConvLayer(dec_, rng, "dec.d4", w4, w3, 3, 1, 1, PadMode::zero, true, false);
    bn_d4_ = BatchNormLayer(dec_, "dec.d4.bn", w3);
    fuse3_ = ConvLayer(dec_, rng, "dec.fuse3", w3 + w3, w3, 3, 1, 1, PadMode::zero, true, false);
    bn_f3_ = BatchNormLayer(dec_, "dec.fuse3.bn", w3);
    d3_ = ConvLayer(dec_, rng, "dec.d3", w3, w2, 3, 1, 1, PadMode::zero, true, false);
    bn_d3_ = BatchNormLayer(dec_, "dec.d3.bn", w2);
    fuse2_ = ConvLayer(dec_, rng, "dec.fuse2", w2 + w2, w2, 3, 1, 1, PadMode::zero, true, false);
    bn_f2_ = BatchNormLayer(dec_, "dec.fuse2.bn", w2);
    d2_ = ConvLayer(dec_, rng, "dec.d2", w2, w1, 3, 1, 1, PadMode::zero, true, false);
    bn_d2_ = BatchNormLayer(dec_, "dec.d2.bn", w1);
    fuse1_ = ConvLayer(dec_, rng, "dec.fuse1", w1 + w1, w1, 3, 1, 1, PadMode::zero, true, false);
    bn_f1_ = BatchNormLayer(dec_, "dec.fuse1.bn", w1);
    rgb_ = ConvLayer(dec_, rng, "dec.rgb", w1, 3, 3, 1, 1);
    blend_head_ = ConvLayer(dec_, rng, "dec.blend", w1 + 1, 1, 3, 1, 1);

    if (!cfg_.encoder_weights.empty()) {
        auto named = load_named_tensors(cfg_.encoder_weights);
        size_t used = 0;
        for (auto& [path, tensor] : named) {
            if (path.rfind("E_m.", 0) != 0) continue;
            Tensor& dst = em_.at(path);
            if (dst.shape() != tensor.shape())
                throw_format("encoder weights: tensor '" + path + "' has shape " +
                             tensor.shape().str() + ", expected " + dst.shape().str());
            std::copy(tensor.data(), tensor.data() + tensor.numel(), dst.data());
            ++used;
        }
        if (used == 0)
            throw_format("encoder weights: no E_m.* tensors in " + cfg_.encoder_weights);
    }
}

int Generator::width(int layer) const {
    const int base = std::max(1, 64 / cfg_.scale);
    return base << (layer - 1);
}

EncoderPyramid Generator::encode_main(const Tensor& image) const {
    const Shape& s = image.shape();
    if (s.c != 3) throw_shape("encode_main: expected 3-channel image, got " + s.str());
    if (s.h % 8 != 0 || s.w % 8 != 0)
        throw_shape("encode_main: spatial dims of " + s.str() +
                    " must be divisible by 8; pad the image first");
    EncoderPyramid pyr;
    Tensor t1 = relu(c11_(image));
    pyr.layers[0] = t1;
    Tensor x = maxpool2x2(relu(c12_(t1)));
    Tensor t2 = relu(c21_(x));
    pyr.layers[1] = t2;
    x = maxpool2x2(relu(c22_(t2)));
    Tensor t3 = relu(c31_(x));
    pyr.layers[2] = t3;
    x = relu(c32_(t3));
    x = relu(c33_(x));
    x = maxpool2x2(relu(c34_(x)));
    pyr.layers[3] = relu(c41_(x));
    return pyr;
}

MaskPyramid Generator::resize_mask_pyramid(const Tensor& mask) {
    if (mask.shape().c != 1)
        throw_shape("resize_mask_pyramid: mask must be single-channel, got " +
                    mask.shape().str());
    MaskPyramid pyr;
    pyr.layers[0] = mask;
    for (int l = 1; l < 4; ++l) pyr.layers[l] = maxpool2x2(pyr.layers[l - 1]);
    return pyr;
}

Tensor Generator::adain_stylize(const Tensor& comp, const Tensor& background,
                                const Tensor& level_mask) {
    if (comp.shape() != background.shape())
        throw_shape("adain_stylize: feature shapes differ, " + comp.shape().str() + " vs " +
                    background.shape().str());
    auto [mu_fg, sd_fg] = masked_moments(comp, level_mask);
    Tensor ones(level_mask.shape(), 1.0f);
    auto [mu_bg, sd_bg] = masked_moments(background, ones);
    Tensor normalized = div(sub(comp, mu_fg), sd_fg);
    Tensor stylized = add(mul(normalized, sd_bg), mu_bg);
    // Inside the mask: restyled foreground. Outside: the original features,
    // bit-exact, because the first term is multiplied by the binary mask.
    return add(mul(stylized, level_mask), mul(comp, affine(level_mask, -1.0f, 1.0f)));
}

std::array<Tensor, 4> Generator::encode_residual(const Tensor& composite, const Tensor& mask,
                                                 bool train) const {
    if (composite.shape().h != mask.shape().h || composite.shape().w != mask.shape().w ||
        composite.shape().n != mask.shape().n)
        throw_shape("encode_residual: image " + composite.shape().str() + " and mask " +
                    mask.shape().str() + " are not aligned");
    std::array<Tensor, 4> out;
    Tensor x = concat_channels({composite, mask});
    for (int l = 0; l < 4; ++l) {
        x = res_[l](trans_[l](x), train);
        out[l] = x;
    }
    return out;
}

Tensor Generator::inject_residual(const Tensor& stylized, const Tensor& residual,
                                  const Tensor& level_mask, int layer) const {
    if (!cfg_.residual_layers.count(layer)) return stylized;
    return add(stylized, mul(residual, level_mask));
}

std::pair<Tensor, Tensor> Generator::decode(const std::array<Tensor, 4>& features,
                                            bool train) const {
    Tensor x = relu(bn_d4_(d4_(features[3]), train));
    x = upsample_nearest(x, 2);
    x = relu(bn_f3_(fuse3_(concat_channels({x, features[2]})), train));
    x = relu(bn_d3_(d3_(x), train));
    x = upsample_nearest(x, 2);
    x = relu(bn_f2_(fuse2_(concat_channels({x, features[1]})), train));
    x = relu(bn_d2_(d2_(x), train));
    x = upsample_nearest(x, 2);
    x = relu(bn_f1_(fuse1_(concat_channels({x, features[0]})), train));
    Tensor image = rgb_(x);
    return {image, x};
}

std::pair<Tensor, Tensor> Generator::blend(const Tensor& decoded, const Tensor& background,
                                           const Tensor& final_features, const Tensor& mask,
                                           bool train) const {
    (void)train;
    if (!cfg_.use_blending) {
        Tensor hard = add(mul(decoded, mask), mul(background, affine(mask, -1.0f, 1.0f)));
        return {hard, mask};
    }
    Tensor soft = sigmoid(blend_head_(concat_channels({final_features, mask})));
    Tensor out = add(mul(decoded, soft), mul(background, affine(soft, -1.0f, 1.0f)));
    return {out, soft};
}

HarmonizeResult Generator::harmonize(const Tensor& composite, const Tensor& background,
                                     const Tensor& mask, bool train) const {
    if (composite.shape() != background.shape())
        throw_shape("harmonize: composite " + composite.shape().str() + " and background " +
                    background.shape().str() + " differ");
    HarmonizeResult r;
    r.comp_features = encode_main(composite).layers;
    r.bg_features = encode_main(background).layers;
    r.masks = resize_mask_pyramid(mask);
    for (int l = 0; l < 4; ++l)
        r.stylized[l] = adain_stylize(r.comp_features[l], r.bg_features[l], r.masks.layers[l]);
    if (cfg_.use_residual_encoder) {
        auto residuals = encode_residual(composite, mask, train);
        for (int l = 0; l < 4; ++l)
            r.refined[l] =
                inject_residual(r.stylized[l], residuals[l], r.masks.layers[l], l + 1);
    } else {
        r.refined = r.stylized;
    }
    auto [image, final_features] = decode(r.refined, train);
    r.raw_output = image;
    auto [blended, soft] = blend(image, background, final_features, mask, train);
    r.output = blended;
    r.soft_mask = soft;
    return r;
}

}  // namespace phar
