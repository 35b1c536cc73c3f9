#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "phar/btmodel.hpp"
#include "phar/evalsuite.hpp"
#include "phar/training.hpp"

namespace fs = std::filesystem;
using namespace phar;

namespace {

std::set<int> parse_layers(const std::string& text) {
    std::set<int> layers;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        try {
            layers.insert(std::stoi(tok));
        } catch (...) {
            throw_usage("--residual-layers expects a comma-separated list, got '" + text + "'");
        }
    }
    if (layers.empty()) throw_usage("--residual-layers is empty");
    return layers;
}

int cmd_train(const std::string& data, const std::string& out_dir, TrainConfig cfg,
              const std::string& ablation, const std::string& residual_layers, int synth_fg,
              int synth_bg) {
    if (!ablation.empty() && !residual_layers.empty())
        throw_usage("--ablation and --residual-layers conflict; pick one");
    if (!ablation.empty()) cfg.apply_ablation(ablation);
    if (!residual_layers.empty()) cfg.residual_layers = parse_layers(residual_layers);
    cfg.validate();

    fs::create_directories(out_dir);
    std::string manifest_path;
    if (data == "synth") {
        const std::string corpus_dir = (fs::path(out_dir) / "corpus").string();
        synth_corpus(corpus_dir, synth_fg, synth_bg, cfg.image_size, cfg.seed);
        manifest_path = (fs::path(corpus_dir) / "manifest.txt").string();
    } else {
        manifest_path = data;
    }
    CorpusManifest manifest = load_manifest(manifest_path);
    CorpusSampler sampler(manifest, fs::path(manifest_path).parent_path().string(), cfg.seed);

    Models models(cfg);
    TrainState state = train_loop(models, cfg, sampler, out_dir, {},
                                  [](int64_t step, const LossBundle& b) {
                                      if (step % 10 == 0 || step == 1)
                                          std::cout << format_log_line(step, b) << "\n";
                                  });
    std::cout << "trained " << state.step << " steps; checkpoints and loss log in " << out_dir
              << "\n";
    return 0;
}

int cmd_harmonize(const std::string& composite_path, const std::string& background_path,
                  const std::string& mask_path, const std::string& checkpoint_path,
                  const std::string& out_path, const std::string& mask_out, bool time_it) {
    TrainConfig cfg = peek_checkpoint_config(checkpoint_path);
    Models models(cfg);
    Rng rng(0);
    int64_t step = 0;
    load_checkpoint(checkpoint_path, models.store_refs(), rng, step);

    Tensor composite = load_image(composite_path);
    Tensor background = load_image(background_path);
    Tensor mask = load_mask(mask_path);
    if (composite.shape() != background.shape() ||
        composite.shape().h != mask.shape().h || composite.shape().w != mask.shape().w)
        throw_value("harmonize: composite " + composite.shape().str() + ", background " +
                    background.shape().str() + " and mask " + mask.shape().str() +
                    " sizes must agree");
    double mask_area = 0.0;
    for (size_t i = 0; i < mask.numel(); ++i) mask_area += mask.data()[i];
    if (mask_area == 0.0) {
        std::cerr << "error: the mask has no foreground pixels\n";
        return 1;
    }

    const int h = composite.shape().h, w = composite.shape().w;
    const int ph = (8 - h % 8) % 8, pw = (8 - w % 8) % 8;
    if (ph || pw)
        std::cerr << "warning: input " << h << "x" << w
                  << " is not divisible by 8; padding to " << (h + ph) << "x" << (w + pw)
                  << " and cropping the result\n";
    auto pad_in = [&](const Tensor& t, PadMode mode) {
        return (ph || pw) ? pad2d(t, 0, ph, 0, pw, mode) : t;
    };
    Tensor pc = pad_in(composite, PadMode::reflect);
    Tensor pb = pad_in(background, PadMode::reflect);
    Tensor pm = pad_in(mask, PadMode::zero);  // padding must not invent foreground

    NoGradScope no_grad;
    HarmonizeResult result = models.gen.harmonize(pc, pb, pm, false);
    if (time_it) {
        for (int i = 0; i < 3; ++i) models.gen.harmonize(pc, pb, pm, false);
        const auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < 100; ++i) models.gen.harmonize(pc, pb, pm, false);
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count() /
            100.0;
        std::printf("mean_ms=%g\n", ms);
    }

    Tensor out = (ph || pw) ? crop2d(result.output, 0, 0, h, w) : result.output;
    save_image(out, out_path);
    if (!mask_out.empty()) {
        Tensor soft = (ph || pw) ? crop2d(result.soft_mask, 0, 0, h, w) : result.soft_mask;
        save_mask(soft, mask_out);
    }
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_gradcheck(uint64_t seed, int scale) {
    bool ok = true;
    for (const auto& r : run_gradcheck_suite(seed, scale)) {
        std::printf("GRAD %-18s %.3e\n", r.op.c_str(), r.max_rel_err);
        ok = ok && r.max_rel_err < 1e-3;
    }
    const double g = gradcheck_generator_objective(seed, scale, 64, 4);
    std::printf("GRAD %-18s %.3e\n", "l_total_G", g);
    const double d = gradcheck_discriminator_objective(seed, scale, 64, 4);
    std::printf("GRAD %-18s %.3e\n", "l_total_D", d);
    ok = ok && g < 1e-3 && d < 1e-3;
    std::printf("gradcheck %s (threshold 1e-3)\n", ok ? "passed" : "FAILED");
    return ok ? 0 : 1;
}

int cmd_btfit(const std::string& pairs_path) {
    std::ifstream in(pairs_path);
    if (!in) throw_io("cannot open '" + pairs_path + "'");
    auto [methods, wins] = parse_pairwise(in);
    BtResult r = bt_fit(methods, wins);
    std::printf("# pseudo_fraction=%g (0.5 pseudo-wins per 10-game pair), %d iterations\n",
                r.pseudo_fraction, r.iterations);
    std::vector<size_t> order(methods.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return r.scores[a] > r.scores[b]; });
    for (size_t i : order) std::printf("BT %-16s %+.4f\n", r.methods[i].c_str(), r.scores[i]);
    return 0;
}

int cmd_verify(uint64_t seed, int scale, bool smoke, const std::string& work_dir) {
    std::vector<CheckReport> reports = run_invariant_suite(seed, scale);
    if (smoke) {
        TrainConfig cfg;
        cfg.seed = seed;
        cfg.scale = scale;
        cfg.image_size = 64;
        cfg.batch_size = 2;
        cfg.max_steps = 200;
        auto smoke_reports = run_smoke_training(cfg, work_dir);
        reports.insert(reports.end(), smoke_reports.begin(), smoke_reports.end());
    }
    print_reports(reports, std::cout);
    return all_passed(reports) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"painterly image harmonization via adversarial residual learning"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "train on a corpus manifest or synthetic data");
    std::string data = "synth", out_dir = "runs/default";
    std::string ablation, residual_layers;
    TrainConfig cfg;
    cfg.scale = 8;
    cfg.image_size = 64;
    cfg.batch_size = 2;
    cfg.max_steps = 200;
    cfg.checkpoint_every = 100;
    int synth_fg = 16, synth_bg = 16;
    train->add_option("--data", data, "corpus manifest path, or 'synth'");
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--steps", cfg.max_steps, "training steps");
    train->add_option("--lr", cfg.learning_rate, "Adam learning rate");
    train->add_option("--scale", cfg.scale, "width divisor (1 = full size, 8 = desk scale)");
    train->add_option("--size", cfg.image_size, "training image size");
    train->add_option("--batch", cfg.batch_size, "batch size");
    train->add_option("--seed", cfg.seed, "run seed");
    train->add_option("--checkpoint-every", cfg.checkpoint_every, "checkpoint interval");
    train->add_option("--ablation", ablation, "configuration tag V1..V4");
    train->add_option("--residual-layers", residual_layers,
                      "layers receiving residual features, e.g. 1,2,3,4");
    train->add_option("--encoder-weights", cfg.encoder_weights,
                      "optional E_m weight file (checkpoint format)");
    train->add_option("--synth-fg", synth_fg, "synthetic foreground count");
    train->add_option("--synth-bg", synth_bg, "synthetic background count");

    // harmonize
    auto* harm = app.add_subcommand("harmonize", "harmonize one composite");
    std::string composite_path, background_path, mask_path, checkpoint_path;
    std::string out_path = "harmonized.ppm", mask_out;
    bool time_it = false;
    harm->add_option("--composite", composite_path)->required();
    harm->add_option("--background", background_path)->required();
    harm->add_option("--mask", mask_path)->required();
    harm->add_option("--checkpoint", checkpoint_path)->required();
    harm->add_option("--out", out_path, "output image (PPM)");
    harm->add_option("--mask-out", mask_out, "write the soft mask (PGM)");
    harm->add_flag("--time", time_it, "report mean wall-clock over 100 runs");

    // gradcheck
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    uint64_t gseed = 0;
    int gscale = 8;
    grad->add_option("--seed", gseed);
    grad->add_option("--scale", gscale);

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "generate a synthetic corpus");
    std::string synth_dir = "synth_corpus";
    int sfg = 16, sbg = 16, ssize = 64;
    uint64_t sseed = 0;
    synth->add_option("--out", synth_dir);
    synth->add_option("--fg", sfg);
    synth->add_option("--bg", sbg);
    synth->add_option("--size", ssize);
    synth->add_option("--seed", sseed);

    // bt-fit
    auto* bt = app.add_subcommand("bt-fit", "Bradley-Terry ranking from pairwise counts");
    std::string pairs_path;
    bt->add_option("--pairs", pairs_path, "file of 'PAIR <i> <j> <wins_i> <wins_j>' lines")
        ->required();

    // verify
    auto* verify = app.add_subcommand("verify", "run the invariant suite");
    uint64_t vseed = 0;
    int vscale = 8;
    bool vsmoke = false;
    std::string vwork = "verify_work";
    verify->add_option("--seed", vseed);
    verify->add_option("--scale", vscale);
    verify->add_flag("--smoke", vsmoke, "include the desk-scale training diagnostics");
    verify->add_option("--work-dir", vwork, "scratch directory for the smoke run");

    try {
        app.parse(argc, argv);
        if (train->parsed())
            return cmd_train(data, out_dir, cfg, ablation, residual_layers, synth_fg, synth_bg);
        if (harm->parsed())
            return cmd_harmonize(composite_path, background_path, mask_path, checkpoint_path,
                                 out_path, mask_out, time_it);
        if (grad->parsed()) return cmd_gradcheck(gseed, gscale);
        if (synth->parsed()) {
            synth_corpus(synth_dir, sfg, sbg, ssize, sseed);
            std::cout << "wrote corpus to " << synth_dir << "\n";
            return 0;
        }
        if (bt->parsed()) return cmd_btfit(pairs_path);
        if (verify->parsed()) return cmd_verify(vseed, vscale, vsmoke, vwork);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.kind() == Error::Kind::usage ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
