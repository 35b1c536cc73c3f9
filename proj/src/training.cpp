#include "phar/training.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace phar {

namespace {

GeneratorConfig generator_config(const TrainConfig& cfg) {
    GeneratorConfig g;
    g.scale = cfg.scale;
    g.use_residual_encoder = cfg.use_residual_encoder;
    g.use_blending = cfg.use_blending;
    g.residual_layers = cfg.residual_layers;
    g.encoder_weights = cfg.encoder_weights;
    return g;
}

std::array<int, 4> feature_widths(const TrainConfig& cfg) {
    const int base = std::max(1, 64 / cfg.scale);
    return {base, base * 2, base * 4, base * 8};
}

}  // namespace

// The single init RNG threads through generator then discriminators, so the
// whole model stack is a deterministic function of (config, seed).
Models::Models(const TrainConfig& cfg)
    : Models(cfg, [&] {
          cfg.validate();
          return Rng(cfg.seed);
      }()) {}

Models::Models(const TrainConfig& cfg, Rng rng)
    : gen(generator_config(cfg), rng),
      discs(feature_widths(cfg), std::max(1, 64 / cfg.scale), rng) {}

std::vector<StoreRef> Models::store_refs() {
    return {
        {"gen", &gen.encoder_params()},  {"gen", &gen.residual_params()},
        {"gen", &gen.decoder_params()},  {"disc", &discs.feature_params()},
        {"disc", &discs.image_params()},
    };
}

namespace {

void check_finite(const Tensor& loss, const char* name, int64_t step) {
    const float v = loss.item();
    if (!std::isfinite(v))
        throw_value(std::string("non-finite loss ") + name + "=" + std::to_string(v) +
                    " at step " + std::to_string(step));
}

}  // namespace

LossBundle train_step(Models& models, const TrainConfig& cfg, TrainState& state,
                      const Batch& batch) {
    const AblationFlags flags = models.flags(cfg);
    TapeScope scope;

    HarmonizeResult h =
        models.gen.harmonize(batch.composite, batch.background, batch.mask, true);

    // Discriminator phase: detached generator outputs, so no gradient can
    // reach the generator even structurally.
    Tensor ldf = Tensor::scalar(0.0f), ldm = Tensor::scalar(0.0f);
    if (flags.use_feature_disc) {
        std::array<Tensor, 4> detached;
        for (int l = 0; l < 4; ++l) detached[l] = h.refined[l].detached();
        ldf = loss_feat_disc(detached, h.bg_features, h.masks, models.discs, true);
    }
    if (flags.use_image_disc)
        ldm = loss_image_disc(h.output.detached(), batch.background, batch.mask, models.discs,
                              true);
    if (flags.use_feature_disc || flags.use_image_disc) {
        Tensor ltd = add(ldf, ldm);
        check_finite(ltd, "l_total_D", state.step);
        scope.tape().backward(ltd);
        if (flags.use_feature_disc)
            adam_step(models.discs.feature_params(), cfg.learning_rate, cfg.adam_beta1,
                      cfg.adam_beta2, cfg.adam_eps);
        if (flags.use_image_disc)
            adam_step(models.discs.image_params(), cfg.learning_rate, cfg.adam_beta1,
                      cfg.adam_beta2, cfg.adam_eps);
    }

    // Generator phase: discriminator scores recomputed on attached outputs
    // with discriminator parameters frozen.
    LossBundle bundle;
    {
        FreezeGuard freeze({&models.discs.feature_params(), &models.discs.image_params()});
        Tensor lgf = Tensor::scalar(0.0f), lgm = Tensor::scalar(0.0f);
        if (flags.use_feature_disc) lgf = loss_feat_gen(h.refined, models.discs, true);
        if (flags.use_image_disc) lgm = loss_image_gen(h.output, models.discs, true);
        FeatureFn psi = [&](const Tensor& x) { return models.gen.encode_main(x).layers; };
        Tensor lc = loss_content_pre(h.output, h.comp_features[3], psi);
        Tensor ls = loss_style_pre(h.output, h.bg_features, h.masks, psi);
        bundle = assemble(lc, ls, lgf, lgm, ldf, ldm, flags);
        check_finite(bundle.l_total_G, "l_total_G", state.step);
        scope.tape().backward(bundle.l_total_G);
        if (flags.use_residual_encoder)
            adam_step(models.gen.residual_params(), cfg.learning_rate, cfg.adam_beta1,
                      cfg.adam_beta2, cfg.adam_eps);
        adam_step(models.gen.decoder_params(), cfg.learning_rate, cfg.adam_beta1,
                  cfg.adam_beta2, cfg.adam_eps);
    }

    state.loss_g_sum += bundle.l_total_G.item();
    state.loss_d_sum += bundle.l_total_D.item();
    state.loss_count += 1;
    return bundle;
}

std::string format_log_line(int64_t step, const LossBundle& b) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "step=%lld l_total_G=%.6g l_total_D=%.6g l_c=%.6g l_s=%.6g "
                  "l_adv_feat_G=%.6g l_adv_img_G=%.6g",
                  static_cast<long long>(step), b.l_total_G.item(), b.l_total_D.item(),
                  b.l_content.item(), b.l_style.item(), b.l_adv_feat_G.item(),
                  b.l_adv_img_G.item());
    return std::string(buf);
}

TrainState train_loop(Models& models, const TrainConfig& cfg, const CorpusSampler& sampler,
                      const std::string& out_dir, TrainState state,
                      const std::function<void(int64_t, const LossBundle&)>& on_step) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const std::string log_path = (fs::path(out_dir) / "loss_log.txt").string();
    std::ofstream log(log_path, state.step == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw_io("cannot open loss log '" + log_path + "'");

    auto save = [&](const std::string& stem) {
        const std::string path = (fs::path(out_dir) / (stem + ".phrn")).string();
        save_checkpoint(path, cfg, models.store_refs(), state.rng, state.step);
    };
    auto step_stem = [](int64_t s) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "checkpoint_%06lld", static_cast<long long>(s));
        return std::string(buf);
    };

    if (state.step == 0) {
        state.rng = Rng(cfg.seed);
        save(step_stem(0));
    }

    bool ran = false;
    while (state.step < cfg.max_steps) {
        Batch batch = sampler.batch_at(state.step, cfg.batch_size, cfg.image_size);
        LossBundle bundle = train_step(models, cfg, state, batch);
        ++state.step;
        ran = true;
        log << format_log_line(state.step, bundle) << "\n";
        log.flush();
        if (on_step) on_step(state.step, bundle);
        if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0)
            save(step_stem(state.step));
    }
    if (ran) save("checkpoint_final");
    return state;
}

}  // namespace phar
