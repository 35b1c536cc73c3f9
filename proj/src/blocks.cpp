#include "phar/blocks.hpp"

#include <cmath>

namespace phar {

float kaiming_uniform_bound(int fan_in) {
    return std::sqrt(6.0f / static_cast<float>(fan_in));
}

ConvLayer::ConvLayer(ParamStore& ps, Rng& rng, const std::string& path, int cin, int cout,
                     int k, int stride_, int pad_, PadMode mode_, bool trainable,
                     bool with_bias)
    : stride(stride_), pad(pad_), mode(mode_) {
    if (cin < 1 || cout < 1) throw_value("ConvLayer: channels must be positive");
    Tensor w(Shape(cout, cin, k, k));
    const float bound = kaiming_uniform_bound(cin * k * k);
    float* wd = w.data();
    for (size_t i = 0; i < w.numel(); ++i) wd[i] = rng.uniform(-bound, bound);
    weight = ps.add(path + ".weight", w, trainable);
    if (with_bias)
        bias = ps.add(path + ".bias", Tensor(Shape(1, cout, 1, 1), 0.0f), trainable);
    else
        bias = Tensor(Shape(1, cout, 1, 1), 0.0f);  // fixed zero, not a parameter
}

BatchNormLayer::BatchNormLayer(ParamStore& ps, const std::string& path, int channels,
                               bool trainable) {
    gamma = ps.add(path + ".gamma", Tensor(Shape(1, channels, 1, 1), 1.0f), trainable);
    beta = ps.add(path + ".beta", Tensor(Shape(1, channels, 1, 1), 0.0f), trainable);
    running_mean = ps.add(path + ".running_mean", Tensor(Shape(1, channels, 1, 1), 0.0f), false);
    running_var = ps.add(path + ".running_var", Tensor(Shape(1, channels, 1, 1), 1.0f), false);
}

ResidualBlock::ResidualBlock(ParamStore& ps, Rng& rng, const std::string& path, int channels_)
    : channels(channels_) {
    conv1 = ConvLayer(ps, rng, path + ".conv1", channels, channels, 3, 1, 1, PadMode::zero,
                      true, false);
    bn1 = BatchNormLayer(ps, path + ".bn1", channels);
    conv2 = ConvLayer(ps, rng, path + ".conv2", channels, channels, 3, 1, 1, PadMode::zero,
                      true, false);
    bn2 = BatchNormLayer(ps, path + ".bn2", channels);
}

Tensor ResidualBlock::operator()(const Tensor& x, bool train) const {
    if (x.shape().c != channels)
        throw_shape("residual_block: input channels " + std::to_string(x.shape().c) +
                    " do not match block channels " + std::to_string(channels));
    Tensor f = relu(bn1(conv1(x), train));
    f = bn2(conv2(f), train);
    return relu(add(x, f));
}

DsBlock::DsBlock(ParamStore& ps, Rng& rng, const std::string& path, int cin, int cout) {
    conv = ConvLayer(ps, rng, path + ".conv", cin, cout, 4, 2, 1, PadMode::zero, true, false);
    bn = BatchNormLayer(ps, path + ".bn", cout);
}

Tensor DsBlock::operator()(const Tensor& x, bool train) const {
    if (x.shape().h < 2 || x.shape().w < 2)
        throw_shape("ds_block: input " + x.shape().str() + " too small to downsample");
    return leaky_relu(bn(conv(x), train), 0.2f);
}

UsBlock::UsBlock(ParamStore& ps, Rng& rng, const std::string& path, int cin, int cout) {
    conv = ConvLayer(ps, rng, path + ".conv", cin, cout, 3, 1, 0, PadMode::zero, true, false);
    bn = BatchNormLayer(ps, path + ".bn", cout);
}

Tensor UsBlock::operator()(const Tensor& x, bool train) const {
    Tensor up = upsample_nearest(x, 2);
    Tensor padded = pad2d(up, 1, 1, 1, 1, PadMode::reflect);
    return relu(bn(conv(padded), train));
}

}  // namespace phar
