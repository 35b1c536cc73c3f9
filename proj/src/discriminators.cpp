#include "phar/discriminators.hpp"

#include <algorithm>

namespace phar {

PixelDiscriminator::PixelDiscriminator(ParamStore& ps, Rng& rng, const std::string& prefix,
                                       int in_channels, int depth, int base)
    : depth_(depth) {
    int cin = in_channels;
    std::vector<int> widths;
    for (int d = 0; d < depth; ++d) {
        const int cout = std::min(base << d, base * 8);
        ds_.emplace_back(ps, rng, prefix + ".ds" + std::to_string(d + 1), cin, cout);
        widths.push_back(cout);
        cin = cout;
    }
    for (int d = 0; d < depth; ++d) {
        const int cout = d + 1 < depth ? widths[depth - 2 - d] : base;
        us_.emplace_back(ps, rng, prefix + ".us" + std::to_string(d + 1), cin, cout);
        cin = cout;
    }
    head_ = ConvLayer(ps, rng, prefix + ".head", cin, 1, 3, 1, 1);
}

Tensor PixelDiscriminator::operator()(const Tensor& input, bool train) const {
    const Shape& s = input.shape();
    const int multiple = 1 << depth_;
    if (s.h % multiple != 0 || s.w % multiple != 0)
        throw_shape("pixel discriminator: input " + s.str() + " not divisible by " +
                    std::to_string(multiple));
    Tensor x = input;
    for (const DsBlock& b : ds_) x = b(x, train);
    for (const UsBlock& b : us_) x = b(x, train);
    return head_(x);
}

DiscriminatorSet::DiscriminatorSet(const std::array<int, 4>& feature_widths, int base,
                                   Rng& rng) {
    f_[0] = PixelDiscriminator(feat_, rng, "D_f1", feature_widths[0], 3, base);
    f_[1] = PixelDiscriminator(feat_, rng, "D_f2", feature_widths[1], 3, base);
    f_[2] = PixelDiscriminator(feat_, rng, "D_f3", feature_widths[2], 2, base);
    f_[3] = PixelDiscriminator(feat_, rng, "D_f4", feature_widths[3], 2, base);
    m_ = PixelDiscriminator(img_, rng, "D_m", 3, kImageDepth, base);
}

Tensor DiscriminatorSet::feature_forward(int layer, const Tensor& features, bool train) const {
    if (layer < 1 || layer > 4)
        throw_value("feature_forward: layer " + std::to_string(layer) + " outside 1..4");
    return f_[layer - 1](features, train);
}

Tensor DiscriminatorSet::image_forward(const Tensor& image, bool train) const {
    const Shape& s = image.shape();
    const int multiple = 1 << kImageDepth;
    const int th = std::max(multiple, (s.h + multiple - 1) / multiple * multiple);
    const int tw = std::max(multiple, (s.w + multiple - 1) / multiple * multiple);
    if (th == s.h && tw == s.w) return m_(image, train);
    const int pt = (th - s.h) / 2, pb = th - s.h - pt;
    const int pl = (tw - s.w) / 2, pr = tw - s.w - pl;
    Tensor padded = pad2d(image, pt, pb, pl, pr, PadMode::reflect);
    Tensor score = m_(padded, train);
    return crop2d(score, pt, pl, s.h, s.w);
}

}  // namespace phar
