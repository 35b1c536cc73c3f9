#pragma once

#include <optional>
#include <string>
#include <vector>

#include "phar/image_io.hpp"
#include "phar/tensor.hpp"

namespace phar {

// Line-oriented corpus manifest: "FG <image> <mask>" / "BG <image>", with
// '#' comments. Paths are resolved relative to the manifest's directory.
struct CorpusManifest {
    struct Foreground {
        std::string image, mask;
    };
    std::vector<Foreground> foregrounds;
    std::vector<std::string> backgrounds;
};

CorpusManifest load_manifest(const std::string& path);

// Background painting, pasted composite, and the binary paste mask.
// Invariants: composite equals background bit-exactly outside the mask; the
// mask covers between 5% and 30% of the canvas.
struct CompositeSample {
    Tensor background;  // [1,3,S,S]
    Tensor composite;   // [1,3,S,S]
    Tensor mask;        // [1,1,S,S]
};

struct CompositeResult {
    std::optional<CompositeSample> sample;
    std::string skip_reason;  // set when the foreground cannot satisfy the ratio
};

// Crops the foreground to its mask bounding box, scales it so the pasted
// mask area lands in [0.05, 0.3] of the canvas, places it uniformly at
// random, and pastes with bilinear (image) / nearest (mask) resampling.
CompositeResult make_composite(const Tensor& fg_image, const Tensor& fg_mask,
                               const Tensor& bg_image, int canvas_size, Rng& rng);

// Procedural desk-scale corpus: smooth-gradient foreground objects with exact
// masks and strongly color-cast "painterly" backgrounds, written to disk with
// a manifest. Foreground and background channel statistics differ so AdaIN
// effects are measurable.
CorpusManifest synth_corpus(const std::string& dir, int n_fg, int n_bg, int size,
                            uint64_t seed);

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w);
Tensor resize_nearest(const Tensor& image, int out_h, int out_w);

// Stacks [1,C,H,W] items into one [B,C,H,W] tensor.
Tensor stack_batch(const std::vector<Tensor>& items);

struct Batch {
    Tensor composite, background, mask;  // [B,3,S,S], [B,3,S,S], [B,1,S,S]
};

// Deterministic sampler over a corpus: foreground order is a per-epoch seeded
// shuffle and all per-sample randomness derives from (seed, position), so any
// batch is a pure function of its step index. That makes resumed runs
// reproduce uninterrupted ones exactly.
class CorpusSampler {
public:
    CorpusSampler(const CorpusManifest& manifest, const std::string& base_dir, uint64_t seed);

    Batch batch_at(int64_t position, int batch_size, int image_size) const;

    size_t foreground_count() const { return fg_images_.size(); }
    size_t background_count() const { return bg_images_.size(); }

private:
    std::vector<Tensor> fg_images_, fg_masks_, bg_images_;
    uint64_t seed_;
};

}  // namespace phar
