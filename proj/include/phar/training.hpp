#pragma once

#include <functional>
#include <string>
#include <vector>

#include "phar/checkpoint.hpp"
#include "phar/config.hpp"
#include "phar/data.hpp"
#include "phar/discriminators.hpp"
#include "phar/generator.hpp"
#include "phar/losses.hpp"

namespace phar {

// Generator plus discriminators, constructed deterministically from a config
// and seed. Store prefixes are fixed so checkpoints are self-describing.
struct Models {
    Generator gen;
    DiscriminatorSet discs;

    explicit Models(const TrainConfig& cfg);

    std::vector<StoreRef> store_refs();
    AblationFlags flags(const TrainConfig& cfg) const {
        return {cfg.use_residual_encoder, cfg.use_feature_disc, cfg.use_image_disc};
    }

private:
    Models(const TrainConfig& cfg, Rng rng);  // one RNG threads through all inits
};

struct TrainState {
    int64_t step = 0;
    Rng rng{0};
    double loss_g_sum = 0.0, loss_d_sum = 0.0;
    int64_t loss_count = 0;
};

// One alternating optimization step: forward harmonize once; discriminator
// phase on detached outputs; generator phase with discriminators frozen and
// their scores recomputed on the attached outputs. The main encoder never
// receives gradients. A non-finite loss aborts with the step index.
LossBundle train_step(Models& models, const TrainConfig& cfg, TrainState& state,
                      const Batch& batch);

// Formats "step=<n> l_total_G=... l_total_D=... l_c=... l_s=... l_adv_feat_G=...
// l_adv_img_G=..." with 6 significant digits.
std::string format_log_line(int64_t step, const LossBundle& b);

// Runs max_steps batches from the sampler, writing the loss log and periodic
// checkpoints (including an initial one) under out_dir. Returns the final
// state. With a nonzero starting state this resumes a previous run.
TrainState train_loop(Models& models, const TrainConfig& cfg, const CorpusSampler& sampler,
                      const std::string& out_dir, TrainState state = {},
                      const std::function<void(int64_t, const LossBundle&)>& on_step = {});

}  // namespace phar
