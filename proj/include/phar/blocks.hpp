#pragma once

#include <string>

#include "phar/ops.hpp"
#include "phar/params.hpp"

namespace phar {

// Registers a conv weight [Cout,Cin,k,k] with uniform fan-in initialization
// (bounds +-sqrt(6/fan_in)) and a zero bias, both under `path`. Convs feeding
// a batch-norm layer are built without a bias parameter: the normalization
// subtracts any constant shift, leaving such a bias with an exactly zero
// gradient.
struct ConvLayer {
    ConvLayer() = default;
    ConvLayer(ParamStore& ps, Rng& rng, const std::string& path, int cin, int cout, int k,
              int stride, int pad, PadMode mode = PadMode::zero, bool trainable = true,
              bool with_bias = true);

    Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad, mode); }

    Tensor weight, bias;
    int stride = 1, pad = 0;
    PadMode mode = PadMode::zero;
};

struct BatchNormLayer {
    BatchNormLayer() = default;
    BatchNormLayer(ParamStore& ps, const std::string& path, int channels, bool trainable = true);

    Tensor operator()(const Tensor& x, bool train) const {
        Tensor rm = running_mean, rv = running_var;
        return batchnorm2d(x, gamma, beta, rm, rv, train);
    }

    Tensor gamma, beta, running_mean, running_var;
};

// x + f(x) with f = conv3x3 -> BN -> ReLU -> conv3x3 -> BN, then a ReLU after
// the addition. Requires in_channels == out_channels.
struct ResidualBlock {
    ResidualBlock() = default;
    ResidualBlock(ParamStore& ps, Rng& rng, const std::string& path, int channels);

    Tensor operator()(const Tensor& x, bool train) const;

    ConvLayer conv1, conv2;
    BatchNormLayer bn1, bn2;
    int channels = 0;
};

// conv4x4 stride 2 zero-pad 1 -> BN -> LeakyReLU(0.2). Halves even extents.
struct DsBlock {
    DsBlock() = default;
    DsBlock(ParamStore& ps, Rng& rng, const std::string& path, int cin, int cout);

    Tensor operator()(const Tensor& x, bool train) const;

    ConvLayer conv;
    BatchNormLayer bn;
};

// nearest upsample x2 -> reflect pad 1 -> conv3x3 -> BN -> ReLU. Doubles extents.
struct UsBlock {
    UsBlock() = default;
    UsBlock(ParamStore& ps, Rng& rng, const std::string& path, int cin, int cout);

    Tensor operator()(const Tensor& x, bool train) const;

    ConvLayer conv;
    BatchNormLayer bn;
};

// Uniform fan-in bound used by ConvLayer; exposed for tests.
float kaiming_uniform_bound(int fan_in);

}  // namespace phar
