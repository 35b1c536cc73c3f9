#pragma once

#include <array>
#include <vector>

#include "phar/blocks.hpp"

namespace phar {

// Encoder-decoder discriminator scoring every pixel of its input: DS blocks
// down, US blocks up, then a 3x3 conv to one channel with a linear output
// (least-squares targets in {0,1}). Channel widths double per DS stage from
// `base`, capped at 8*base.
class PixelDiscriminator {
public:
    PixelDiscriminator() = default;
    PixelDiscriminator(ParamStore& ps, Rng& rng, const std::string& prefix, int in_channels,
                       int depth, int base);

    // Requires spatial dims divisible by 2^depth.
    Tensor operator()(const Tensor& input, bool train) const;

    int depth() const { return depth_; }

private:
    std::vector<DsBlock> ds_;
    std::vector<UsBlock> us_;
    ConvLayer head_;
    int depth_ = 0;
};

// Four pixel-wise feature discriminators (depth 3 for layers 1-2, depth 2 for
// layers 3-4) plus the pixel-wise image discriminator (depth 7). The image
// discriminator reflect-pads non-multiple inputs up and crops the score map
// back, keeping pixel alignment for arbitrary sizes.
class DiscriminatorSet {
public:
    DiscriminatorSet(const std::array<int, 4>& feature_widths, int base, Rng& rng);

    Tensor feature_forward(int layer, const Tensor& features, bool train) const;
    Tensor image_forward(const Tensor& image, bool train) const;

    ParamStore& feature_params() { return feat_; }
    ParamStore& image_params() { return img_; }
    const ParamStore& feature_params() const { return feat_; }
    const ParamStore& image_params() const { return img_; }

    static constexpr int kImageDepth = 7;

private:
    ParamStore feat_, img_;
    std::array<PixelDiscriminator, 4> f_;
    PixelDiscriminator m_;
};

}  // namespace phar
