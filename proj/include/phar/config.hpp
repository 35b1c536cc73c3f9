#pragma once

#include <cstdint>
#include <set>
#include <string>

#include "phar/common.hpp"

namespace phar {

// Everything needed to rebuild the models and reproduce a run. The snapshot
// is stored inside checkpoints so inference never needs architecture flags.
struct TrainConfig {
    float learning_rate = 2e-4f;
    float adam_beta1 = 0.5f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    int batch_size = 4;
    int64_t max_steps = 1000;
    uint64_t seed = 0;
    int image_size = 256;
    int scale = 1;  // divides all channel widths
    bool use_residual_encoder = true;
    bool use_feature_disc = true;
    bool use_image_disc = true;
    bool use_blending = true;
    std::set<int> residual_layers = {1, 2, 3, 4};
    int64_t checkpoint_every = 500;
    std::string encoder_weights;

    void validate() const {
        if (learning_rate <= 0.0f) throw_value("TrainConfig: learning_rate must be positive");
        if (batch_size < 1) throw_value("TrainConfig: batch_size must be >= 1");
        if (image_size < 8 || image_size % 8 != 0)
            throw_value("TrainConfig: image_size must be a positive multiple of 8");
        if (scale < 1) throw_value("TrainConfig: scale must be >= 1");
        for (int l : residual_layers)
            if (l < 1 || l > 4)
                throw_value("TrainConfig: residual layer " + std::to_string(l) +
                            " outside 1..4");
    }

    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);

    // Maps an ablation tag V1..V4 onto the component toggles.
    void apply_ablation(const std::string& tag);
};

}  // namespace phar
