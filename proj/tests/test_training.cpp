#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <regex>

#include "oracles.hpp"
#include "phar/evalsuite.hpp"
#include "phar/training.hpp"

using namespace phar;
namespace fs = std::filesystem;

namespace {

TrainConfig desk_config(uint64_t seed = 1) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.scale = 8;
    cfg.image_size = 64;
    cfg.batch_size = 2;
    cfg.max_steps = 3;
    cfg.checkpoint_every = 0;
    return cfg;
}

Batch random_batch(Rng& rng, int n = 2, int size = 64) {
    Batch b;
    b.composite = oracle::random_uniform(Shape(n, 3, size, size), rng);
    b.background = oracle::random_uniform(Shape(n, 3, size, size), rng);
    b.mask = Tensor(Shape(n, 1, size, size), 0.0f);
    for (int i = 0; i < n; ++i)
        for (int y = 16; y < 40; ++y)
            for (int x = 16; x < 40; ++x) b.mask.at(i, 0, y, x) = 1.0f;
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    if (b.mask.at(i, 0, y, x) < 0.5f)
                        b.composite.at(i, c, y, x) = b.background.at(i, c, y, x);
    return b;
}

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("phar_train_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

}  // namespace

TEST_CASE("gradient separation between the two phases") {
    TrainConfig cfg = desk_config();
    Models m(cfg);
    Rng rng(5);
    Batch b = random_batch(rng);
    TapeScope scope;
    HarmonizeResult h = m.gen.harmonize(b.composite, b.background, b.mask, true);

    // discriminator phase on detached outputs
    std::array<Tensor, 4> detached;
    for (int l = 0; l < 4; ++l) detached[l] = h.refined[l].detached();
    Tensor ldf = loss_feat_disc(detached, h.bg_features, h.masks, m.discs, true);
    Tensor ldm = loss_image_disc(h.output.detached(), b.background, b.mask, m.discs, true);
    scope.tape().backward(add(ldf, ldm));
    for (auto* ps : {&m.gen.residual_params(), &m.gen.decoder_params()})
        for (auto& e : ps->entries())
            CHECK_MESSAGE(!e.tensor.has_grad(), e.path);
    bool disc_grads = true;
    for (auto* ps : {&m.discs.feature_params(), &m.discs.image_params()})
        for (auto& e : ps->entries())
            if (e.trainable && !e.tensor.has_grad()) disc_grads = false;
    CHECK(disc_grads);
    for (auto* ps : {&m.discs.feature_params(), &m.discs.image_params()}) ps->drop_grads();

    // generator phase with frozen discriminators
    {
        FreezeGuard freeze({&m.discs.feature_params(), &m.discs.image_params()});
        Tensor lgf = loss_feat_gen(h.refined, m.discs, true);
        Tensor lgm = loss_image_gen(h.output, m.discs, true);
        FeatureFn psi = [&](const Tensor& x) { return m.gen.encode_main(x).layers; };
        Tensor lc = loss_content_pre(h.output, h.comp_features[3], psi);
        Tensor ls = loss_style_pre(h.output, h.bg_features, h.masks, psi);
        Tensor total = add(add(lc, ls), add(lgf, lgm));
        scope.tape().backward(total);
    }
    for (auto* ps : {&m.discs.feature_params(), &m.discs.image_params()})
        for (auto& e : ps->entries())
            CHECK_MESSAGE(!e.tensor.has_grad(), e.path);
    for (auto* ps : {&m.gen.residual_params(), &m.gen.decoder_params()})
        for (auto& e : ps->entries())
            if (e.trainable) CHECK_MESSAGE(e.tensor.has_grad(), e.path);
    for (auto& e : m.gen.encoder_params().entries()) CHECK(!e.tensor.has_grad());
}

TEST_CASE("one train step updates exactly the stores the config enables") {
    Rng rng(7);
    Batch b = random_batch(rng);

    TrainConfig cfg = desk_config();
    cfg.use_feature_disc = false;  // V3-style wiring
    Models m(cfg);
    const auto feat0 = m.discs.feature_params().snapshot_trainable();
    const auto img0 = m.discs.image_params().snapshot_trainable();
    const auto er0 = m.gen.residual_params().snapshot_trainable();
    TrainState state;
    train_step(m, cfg, state, b);
    CHECK(m.discs.feature_params().snapshot_trainable() == feat0);
    CHECK(m.discs.image_params().snapshot_trainable() != img0);
    CHECK(m.gen.residual_params().snapshot_trainable() != er0);
}

TEST_CASE("the frozen encoder is bit-identical after many steps") {
    TrainConfig cfg = desk_config();
    Models m(cfg);
    auto snapshot = [&] {
        std::vector<float> out;
        for (auto& e : m.gen.encoder_params().entries())
            out.insert(out.end(), e.tensor.data(), e.tensor.data() + e.tensor.numel());
        return out;
    };
    const auto before = snapshot();
    Rng rng(9);
    TrainState state;
    for (int i = 0; i < 5; ++i) {
        Batch b = random_batch(rng);
        train_step(m, cfg, state, b);
        ++state.step;
    }
    const auto after = snapshot();
    REQUIRE(before.size() == after.size());
    for (size_t i = 0; i < before.size(); ++i) REQUIRE(before[i] == after[i]);
}

TEST_CASE("discriminator phase descends on a fixed batch at small lr") {
    TrainConfig cfg = desk_config();
    cfg.learning_rate = 1e-5f;
    Models m(cfg);
    Rng rng(11);
    Batch b = random_batch(rng);

    auto eval_d = [&]() {
        NoGradScope no_grad;
        HarmonizeResult h = m.gen.harmonize(b.composite, b.background, b.mask, true);
        std::array<Tensor, 4> detached;
        for (int l = 0; l < 4; ++l) detached[l] = h.refined[l].detached();
        const double df =
            loss_feat_disc(detached, h.bg_features, h.masks, m.discs, true).item();
        const double dm =
            loss_image_disc(h.output.detached(), b.background, b.mask, m.discs, true).item();
        return df + dm;
    };

    // snapshot running stats so the probe and the update see the same state
    const auto feat_buf = m.discs.feature_params().snapshot_buffers();
    const auto img_buf = m.discs.image_params().snapshot_buffers();
    const auto gen_er_buf = m.gen.residual_params().snapshot_buffers();
    const auto gen_dec_buf = m.gen.decoder_params().snapshot_buffers();
    const double before = eval_d();
    m.discs.feature_params().restore_buffers(feat_buf);
    m.discs.image_params().restore_buffers(img_buf);
    m.gen.residual_params().restore_buffers(gen_er_buf);
    m.gen.decoder_params().restore_buffers(gen_dec_buf);

    // one discriminator-only update
    {
        TapeScope scope;
        HarmonizeResult h = m.gen.harmonize(b.composite, b.background, b.mask, true);
        std::array<Tensor, 4> detached;
        for (int l = 0; l < 4; ++l) detached[l] = h.refined[l].detached();
        Tensor ldf = loss_feat_disc(detached, h.bg_features, h.masks, m.discs, true);
        Tensor ldm = loss_image_disc(h.output.detached(), b.background, b.mask, m.discs, true);
        scope.tape().backward(add(ldf, ldm));
        adam_step(m.discs.feature_params(), cfg.learning_rate);
        adam_step(m.discs.image_params(), cfg.learning_rate);
    }
    const double after = eval_d();
    CHECK(after <= before);
}

TEST_CASE("non-finite losses abort with the step index") {
    TrainConfig cfg = desk_config();
    Models m(cfg);
    // poison the image discriminator's linear head: its score map feeds the
    // loss directly, with no ReLU in between to swallow the NaN
    Tensor& w = m.discs.image_params().at("D_m.head.weight");
    w.data()[0] = std::numeric_limits<float>::quiet_NaN();
    Rng rng(13);
    Batch b = random_batch(rng);
    TrainState state;
    state.step = 7;
    CHECK_THROWS_WITH_AS(train_step(m, cfg, state, b), doctest::Contains("step 7"), Error);
}

TEST_CASE("train loop writes logs and checkpoints deterministically") {
    const fs::path dir_a = temp_dir("a");
    const fs::path dir_b = temp_dir("b");
    const fs::path corpus = temp_dir("corpus");
    CorpusManifest manifest = synth_corpus(corpus.string(), 8, 8, 64, 3);

    TrainConfig cfg = desk_config(3);
    cfg.max_steps = 4;
    cfg.checkpoint_every = 2;

    SUBCASE("identical seeds produce identical loss logs") {
        {
            Models m(cfg);
            CorpusSampler sampler(manifest, corpus.string(), cfg.seed);
            train_loop(m, cfg, sampler, dir_a.string());
        }
        {
            Models m(cfg);
            CorpusSampler sampler(manifest, corpus.string(), cfg.seed);
            train_loop(m, cfg, sampler, dir_b.string());
        }
        const auto la = read_lines(dir_a / "loss_log.txt");
        const auto lb = read_lines(dir_b / "loss_log.txt");
        REQUIRE(la.size() == 4);
        CHECK(la == lb);
        // log line format contract
        const std::regex pattern(
            "step=\\d+ l_total_G=[-+0-9.eE]+ l_total_D=[-+0-9.eE]+ l_c=[-+0-9.eE]+ "
            "l_s=[-+0-9.eE]+ l_adv_feat_G=[-+0-9.eE]+ l_adv_img_G=[-+0-9.eE]+");
        for (const auto& line : la) CHECK(std::regex_match(line, pattern));
        CHECK(fs::exists(dir_a / "checkpoint_000000.phrn"));
        CHECK(fs::exists(dir_a / "checkpoint_000002.phrn"));
        CHECK(fs::exists(dir_a / "checkpoint_final.phrn"));
    }

    SUBCASE("resuming reproduces the uninterrupted run") {
        // uninterrupted: 4 steps
        std::vector<std::string> full_losses;
        {
            Models m(cfg);
            CorpusSampler sampler(manifest, corpus.string(), cfg.seed);
            train_loop(m, cfg, sampler, dir_a.string(),
                       {}, [&](int64_t s, const LossBundle& b) {
                           full_losses.push_back(format_log_line(s, b));
                       });
        }
        // interrupted at 2, then resumed from the checkpoint
        {
            TrainConfig half = cfg;
            half.max_steps = 2;
            Models m(half);
            CorpusSampler sampler(manifest, corpus.string(), cfg.seed);
            train_loop(m, half, sampler, dir_b.string());
        }
        std::vector<std::string> resumed_losses;
        {
            TrainConfig loaded_cfg =
                peek_checkpoint_config((dir_b / "checkpoint_final.phrn").string());
            loaded_cfg.max_steps = 4;
            Models m(loaded_cfg);
            TrainState state;
            load_checkpoint((dir_b / "checkpoint_final.phrn").string(), m.store_refs(),
                            state.rng, state.step);
            REQUIRE(state.step == 2);
            CorpusSampler sampler(manifest, corpus.string(), loaded_cfg.seed);
            train_loop(m, loaded_cfg, sampler, dir_b.string(), state,
                       [&](int64_t s, const LossBundle& b) {
                           resumed_losses.push_back(format_log_line(s, b));
                       });
        }
        REQUIRE(full_losses.size() == 4);
        REQUIRE(resumed_losses.size() == 2);
        CHECK(resumed_losses[0] == full_losses[2]);
        CHECK(resumed_losses[1] == full_losses[3]);
    }

    SUBCASE("zero steps emits only the initial checkpoint") {
        TrainConfig zero = cfg;
        zero.max_steps = 0;
        Models m(zero);
        CorpusSampler sampler(manifest, corpus.string(), zero.seed);
        const fs::path dir_z = temp_dir("z");
        train_loop(m, zero, sampler, dir_z.string());
        CHECK(fs::exists(dir_z / "checkpoint_000000.phrn"));
        CHECK(!fs::exists(dir_z / "checkpoint_final.phrn"));
        fs::remove_all(dir_z);
    }

    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    fs::remove_all(corpus);
}

TEST_CASE("ablation tags map onto the component toggles") {
    TrainConfig cfg;
    cfg.apply_ablation("V1");
    CHECK(!cfg.use_residual_encoder);
    CHECK(!cfg.use_feature_disc);
    CHECK(!cfg.use_image_disc);
    cfg.apply_ablation("V2");
    CHECK(!cfg.use_residual_encoder);
    CHECK(!cfg.use_feature_disc);
    CHECK(cfg.use_image_disc);
    cfg.apply_ablation("V3");
    CHECK(cfg.use_residual_encoder);
    CHECK(!cfg.use_feature_disc);
    CHECK(cfg.use_image_disc);
    cfg.apply_ablation("V4");
    CHECK(cfg.use_residual_encoder);
    CHECK(cfg.use_feature_disc);
    CHECK(cfg.use_image_disc);
    CHECK_THROWS_AS(cfg.apply_ablation("V9"), Error);
}
