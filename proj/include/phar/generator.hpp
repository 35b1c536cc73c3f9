#pragma once

#include <array>
#include <set>
#include <string>

#include "phar/blocks.hpp"

namespace phar {

// Feature maps tapped at the four encoder stages; layer l has channel width
// base*2^(l-1) and spatial extent input/2^(l-1).
struct EncoderPyramid {
    std::array<Tensor, 4> layers;
};

// Binary foreground masks resized to each stage by 2x2 max pooling, so a
// nonempty mask stays nonempty at every depth.
struct MaskPyramid {
    std::array<Tensor, 4> layers;
};

struct GeneratorConfig {
    int scale = 1;  // divides the VGG-19 widths 64/128/256/512
    bool use_residual_encoder = true;
    bool use_blending = true;
    std::set<int> residual_layers = {1, 2, 3, 4};
    std::string encoder_weights;  // optional checkpoint holding E_m.* tensors
};

struct HarmonizeResult {
    Tensor output;     // blended harmonized image
    Tensor raw_output; // decoder image before blending
    Tensor soft_mask;
    std::array<Tensor, 4> refined;        // residual-injected stylized features
    std::array<Tensor, 4> stylized;       // AdaIN outputs
    std::array<Tensor, 4> comp_features;  // encoder taps of the composite
    std::array<Tensor, 4> bg_features;    // encoder taps of the background
    MaskPyramid masks;
};

// Dual-encoder generator: a frozen VGG-19-style main encoder tapped at four
// stages, masked AdaIN per stage, a trainable residual encoder whose features
// are added inside the foreground, a U-Net-style decoder with skip fusion,
// and a learned soft-mask blending head.
class Generator {
public:
    Generator(const GeneratorConfig& cfg, Rng& rng);

    // VGG-19-style stack (3x3 convs + ReLU, 2x2 max pool between stages),
    // tapped after the first ReLU of each stage. Requires H, W divisible by 8.
    EncoderPyramid encode_main(const Tensor& image) const;

    static MaskPyramid resize_mask_pyramid(const Tensor& mask);

    // Aligns the foreground statistics of `comp` with the whole-map statistics
    // of `background` at one pyramid level; background pixels pass through
    // bit-exactly.
    static Tensor adain_stylize(const Tensor& comp, const Tensor& background,
                                const Tensor& level_mask);

    // Four stages of (transition conv, residual block); stage l matches the
    // encoder's layer-l shape. Input is concat(composite, mask).
    std::array<Tensor, 4> encode_residual(const Tensor& composite, const Tensor& mask,
                                          bool train) const;

    Tensor inject_residual(const Tensor& stylized, const Tensor& residual,
                           const Tensor& level_mask, int layer) const;

    // Mirror decoder with skip fusion at layers 3, 2, 1. Returns the RGB
    // image and the final decoder feature map (input to the blending head).
    std::pair<Tensor, Tensor> decode(const std::array<Tensor, 4>& features, bool train) const;

    // Soft-mask convex blend of decoder output and background. With blending
    // disabled, the hard mask is used instead.
    std::pair<Tensor, Tensor> blend(const Tensor& decoded, const Tensor& background,
                                    const Tensor& final_features, const Tensor& mask,
                                    bool train) const;

    HarmonizeResult harmonize(const Tensor& composite, const Tensor& background,
                              const Tensor& mask, bool train) const;

    int width(int layer) const;  // channels at 1-based layer index
    const GeneratorConfig& config() const { return cfg_; }

    ParamStore& encoder_params() { return em_; }
    ParamStore& residual_params() { return er_; }
    ParamStore& decoder_params() { return dec_; }
    const ParamStore& encoder_params() const { return em_; }
    const ParamStore& residual_params() const { return er_; }
    const ParamStore& decoder_params() const { return dec_; }

private:
    GeneratorConfig cfg_;
    ParamStore em_, er_, dec_;

    ConvLayer c11_, c12_, c21_, c22_, c31_, c32_, c33_, c34_, c41_;

    std::array<ConvLayer, 4> trans_;
    std::array<ResidualBlock, 4> res_;

    ConvLayer d4_, fuse3_, d3_, fuse2_, d2_, fuse1_, rgb_, blend_head_;
    BatchNormLayer bn_d4_, bn_f3_, bn_d3_, bn_f2_, bn_d2_, bn_f1_;
};

}  // namespace phar
