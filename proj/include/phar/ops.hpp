#pragma once

#include <utility>
#include <vector>

#include "phar/graph.hpp"
#include "phar/tensor.hpp"

namespace phar {

enum class PadMode { zero, reflect };
enum class Act { relu, leaky_relu, sigmoid };

// Cross-correlation with bias. weight is [Cout,Cin,kH,kW], bias is [1,Cout,1,1].
// Output spatial extent: floor((H + 2*pad - kH)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding, PadMode pad_mode = PadMode::zero);

// Per-channel batch normalization. gamma/beta are [1,C,1,1]. In train mode the
// batch statistics are used and the running buffers are updated in place by
// exponential moving average; in eval mode the running buffers are used.
Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, bool train,
                   float momentum = 0.1f, float eps = 1e-5f);

Tensor activation(const Tensor& input, Act kind, float negative_slope = 0.2f);
Tensor relu(const Tensor& input);
Tensor leaky_relu(const Tensor& input, float negative_slope = 0.2f);
Tensor sigmoid(const Tensor& input);

Tensor upsample_nearest(const Tensor& input, int scale);
Tensor maxpool2x2(const Tensor& input);
Tensor avgpool2x2(const Tensor& input);

Tensor pad2d(const Tensor& input, int top, int bottom, int left, int right, PadMode mode);
Tensor crop2d(const Tensor& input, int top, int left, int out_h, int out_w);

Tensor concat_channels(const std::vector<Tensor>& inputs);

// Binary elementwise ops. Permitted shape pairs: identical; [N,1,H,W] mask
// against [N,C,H,W]; [N,C,1,1] statistics against [N,C,H,W] (either order).
// Anything else is a shape error.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// y = scale * x + shift, elementwise with scalar coefficients.
Tensor affine(const Tensor& input, float scale, float shift);

// Per-(batch,channel) mean and population standard deviation over the pixels
// where mask is 1. mask is [N,1,H,W] binary and must cover at least one pixel
// per batch item. std is reported as sqrt(var + eps). Differentiable with
// respect to the feature only. Outputs are [N,C,1,1].
std::pair<Tensor, Tensor> masked_moments(const Tensor& feature, const Tensor& mask,
                                         float eps = 1e-5f);

// Mean over all elements of the squared difference. Scalar output.
Tensor mse(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& input);
Tensor mean(const Tensor& input);

}  // namespace phar
