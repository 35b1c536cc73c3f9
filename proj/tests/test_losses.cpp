#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "phar/losses.hpp"

using namespace phar;

namespace {

struct Fixture {
    Fixture() : rng(17), discs(make_discs()) {
        masks.layers[0] = rect(1, 32, 32);
        for (int l = 1; l < 4; ++l) masks.layers[l] = oracle::maxpool2(masks.layers[l - 1]);
        for (int l = 0; l < 4; ++l) {
            const Shape s(1, 8 << l, 32 >> l, 32 >> l);
            refined[l] = oracle::random_uniform(s, rng);
            bg[l] = oracle::random_uniform(s, rng);
        }
        output = oracle::random_uniform(Shape(1, 3, 64, 64), rng);
        background = oracle::random_uniform(Shape(1, 3, 64, 64), rng);
        mask = rect(1, 64, 64);
    }

    DiscriminatorSet make_discs() {
        Rng r(5);
        return DiscriminatorSet({8, 16, 32, 64}, 8, r);
    }

    Tensor rect(int n, int h, int w) {
        Tensor m(Shape(n, 1, h, w), 0.0f);
        for (int y = h / 4; y < h / 4 + h / 2; ++y)
            for (int x = w / 4; x < w / 4 + w / 2; ++x) m.at(0, 0, y, x) = 1.0f;
        return m;
    }

    double mask_fraction(const Tensor& m) {
        double s = 0.0;
        for (size_t i = 0; i < m.numel(); ++i) s += m.data()[i];
        return s / static_cast<double>(m.numel());
    }

    void zero_all_heads() {
        for (auto* ps : {&discs.feature_params(), &discs.image_params()})
            for (auto& e : ps->entries())
                if (e.path.find(".head") != std::string::npos)
                    std::fill(e.tensor.data(), e.tensor.data() + e.tensor.numel(), 0.0f);
    }

    Rng rng;
    DiscriminatorSet discs;
    MaskPyramid masks;
    std::array<Tensor, 4> refined, bg;
    Tensor output, background, mask;
};

// Identity feature extractor: four taps of the image itself, paired with
// full-resolution masks at every level.
FeatureFn identity_psi() {
    return [](const Tensor& x) { return std::array<Tensor, 4>{x, x, x, x}; };
}

}  // namespace

TEST_CASE("feature adversarial losses") {
    Fixture fx;

    SUBCASE("a perfect discriminator would score zero (Eq. 4 fixed point)") {
        Tensor total = Tensor::scalar(0.0f);
        for (int l = 0; l < 4; ++l) {
            Tensor zeros(fx.masks.layers[l].shape(), 0.0f);
            total = add(total, mse(fx.masks.layers[l], fx.masks.layers[l]));
            total = add(total, mse(zeros, zeros));
        }
        CHECK(total.item() == 0.0f);
    }

    SUBCASE("zero-output discriminators: closed-form mask fractions") {
        fx.zero_all_heads();
        NoGradScope no_grad;
        double expected = 0.0;
        for (int l = 0; l < 4; ++l) expected += fx.mask_fraction(fx.masks.layers[l]);
        const double d = loss_feat_disc(fx.refined, fx.bg, fx.masks, fx.discs, false).item();
        CHECK(d == doctest::Approx(expected).epsilon(1e-5));
        const double g = loss_feat_gen(fx.refined, fx.discs, false).item();
        CHECK(g == 0.0);
    }

    SUBCASE("discriminator loss leaves the generator side untouched") {
        std::array<Tensor, 4> attached;
        for (int l = 0; l < 4; ++l) {
            attached[l] = fx.refined[l];
            attached[l].set_requires_grad(true);
        }
        std::array<Tensor, 4> detached;
        for (int l = 0; l < 4; ++l) detached[l] = attached[l].detached();
        TapeScope scope;
        Tensor d = loss_feat_disc(detached, fx.bg, fx.masks, fx.discs, true);
        scope.tape().backward(d);
        for (int l = 0; l < 4; ++l) CHECK(!attached[l].has_grad());
        bool some_disc_grad = false;
        for (auto& e : fx.discs.feature_params().entries())
            if (e.trainable && e.tensor.has_grad()) some_disc_grad = true;
        CHECK(some_disc_grad);
        fx.discs.feature_params().drop_grads();
    }

    SUBCASE("generator loss with frozen discriminators") {
        std::array<Tensor, 4> attached;
        for (int l = 0; l < 4; ++l) {
            attached[l] = fx.refined[l].clone();
            attached[l].set_requires_grad(true);
        }
        TapeScope scope;
        FreezeGuard freeze({&fx.discs.feature_params()});
        Tensor g = loss_feat_gen(attached, fx.discs, true);
        scope.tape().backward(g);
        for (int l = 0; l < 4; ++l) CHECK(attached[l].has_grad());
        for (auto& e : fx.discs.feature_params().entries())
            CHECK(!e.tensor.has_grad());
    }
}

TEST_CASE("image adversarial pair") {
    Fixture fx;

    SUBCASE("zero-output D_m: d_loss equals the mask fraction, g_loss zero") {
        fx.zero_all_heads();
        NoGradScope no_grad;
        auto [d, g] = loss_image_pair(fx.output, fx.background, fx.mask, fx.discs, false);
        CHECK(d.item() == doctest::Approx(fx.mask_fraction(fx.mask)).epsilon(1e-5));
        CHECK(g.item() == 0.0);
    }

    SUBCASE("gradient separation across the pair") {
        Tensor attached = fx.output.clone();
        attached.set_requires_grad(true);
        TapeScope scope;
        Tensor d = loss_image_disc(attached.detached(), fx.background, fx.mask, fx.discs, true);
        scope.tape().backward(d);
        CHECK(!attached.has_grad());
        bool disc_grads = false;
        for (auto& e : fx.discs.image_params().entries())
            if (e.trainable && e.tensor.has_grad()) disc_grads = true;
        CHECK(disc_grads);
        fx.discs.image_params().drop_grads();

        FreezeGuard freeze({&fx.discs.image_params()});
        Tensor g = loss_image_gen(attached, fx.discs, true);
        scope.tape().backward(g);
        CHECK(attached.has_grad());
        for (auto& e : fx.discs.image_params().entries()) CHECK(!e.tensor.has_grad());
    }
}

TEST_CASE("style loss") {
    SUBCASE("identical image and background with a full mask scores zero") {
        Rng rng(3);
        Tensor img = oracle::random_uniform(Shape(1, 3, 16, 16), rng);
        MaskPyramid masks;
        for (int l = 0; l < 4; ++l) masks.layers[l] = Tensor(Shape(1, 1, 16, 16), 1.0f);
        const double v = loss_style(img, img, masks, identity_psi()).item();
        CHECK(v == 0.0);
    }

    SUBCASE("constant foreground equal to a constant background scores zero") {
        Tensor img(Shape(1, 3, 8, 8), 0.42f);
        Tensor bgi(Shape(1, 3, 8, 8), 0.42f);
        MaskPyramid masks;
        Tensor m(Shape(1, 1, 8, 8), 0.0f);
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) m.at(0, 0, y, x) = 1.0f;
        for (int l = 0; l < 4; ++l) masks.layers[l] = m;
        CHECK(loss_style(img, bgi, masks, identity_psi()).item() == 0.0);
    }

    SUBCASE("two-channel hand case matches the scalar oracle") {
        Tensor img = Tensor::from_data(Shape(1, 2, 2, 2), {1, 2, 3, 4, 5, 6, 7, 8});
        Tensor bgi = Tensor::from_data(Shape(1, 2, 2, 2), {2, 2, 4, 4, 5, 5, 9, 9});
        Tensor m = Tensor::from_data(Shape(1, 1, 2, 2), {1, 0, 0, 1});
        MaskPyramid masks;
        for (int l = 0; l < 4; ++l) masks.layers[l] = m;

        std::vector<double> mu_fg, sd_fg, mu_bg, sd_bg;
        oracle::masked_moments(img, m, 1e-5f, mu_fg, sd_fg);
        Tensor ones(Shape(1, 1, 2, 2), 1.0f);
        oracle::masked_moments(bgi, ones, 1e-5f, mu_bg, sd_bg);
        double expected_layer = 0.0;
        for (int c = 0; c < 2; ++c) {
            expected_layer += (mu_fg[c] - mu_bg[c]) * (mu_fg[c] - mu_bg[c]) / 2.0;
            expected_layer += (sd_fg[c] - sd_bg[c]) * (sd_fg[c] - sd_bg[c]) / 2.0;
        }
        const double expected = 4.0 * expected_layer;  // identical taps at all 4 layers
        CHECK(loss_style(img, bgi, masks, identity_psi()).item() ==
              doctest::Approx(expected).epsilon(1e-5));
    }

    SUBCASE("invariant to permuting foreground pixels under identity taps") {
        Rng rng(9);
        Tensor img = oracle::random_uniform(Shape(1, 3, 4, 4), rng);
        Tensor bgi = oracle::random_uniform(Shape(1, 3, 4, 4), rng);
        Tensor m = Tensor::from_data(Shape(1, 1, 4, 4),
                                     {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0});
        MaskPyramid masks;
        for (int l = 0; l < 4; ++l) masks.layers[l] = m;
        const double before = loss_style(img, bgi, masks, identity_psi()).item();

        // swap two foreground pixel values per channel: (0,0) <-> (1,1)
        Tensor perm = img.clone();
        for (int c = 0; c < 3; ++c)
            std::swap(perm.at(0, c, 0, 0), perm.at(0, c, 1, 1));
        const double after = loss_style(perm, bgi, masks, identity_psi()).item();
        CHECK(before == doctest::Approx(after).epsilon(1e-6));
    }
}

TEST_CASE("content loss") {
    Rng grng(1);
    GeneratorConfig gcfg;
    gcfg.scale = 8;
    Generator gen(gcfg, grng);
    FeatureFn psi = [&](const Tensor& x) { return gen.encode_main(x).layers; };
    Rng rng(21);
    Tensor a = oracle::random_uniform(Shape(1, 3, 32, 32), rng);
    Tensor b = oracle::random_uniform(Shape(1, 3, 32, 32), rng);

    NoGradScope no_grad;
    CHECK(loss_content(a, a, psi).item() == 0.0);
    CHECK(loss_content(a, b, psi).item() ==
          doctest::Approx(loss_content(b, a, psi).item()).epsilon(1e-6));

    // receptive-field sanity: one perturbed pixel moves the loss
    Tensor a2 = a.clone();
    a2.at(0, 1, 16, 16) += 0.25f;
    CHECK(loss_content(a2, b, psi).item() != loss_content(a, b, psi).item());
}

TEST_CASE("assemble applies unit weights and ablation masks") {
    Tensor lc = Tensor::scalar(0.25f), ls = Tensor::scalar(0.5f);
    Tensor lgf = Tensor::scalar(0.125f), lgm = Tensor::scalar(1.0f);
    Tensor ldf = Tensor::scalar(0.75f), ldm = Tensor::scalar(0.375f);

    SUBCASE("all components zero gives zero totals") {
        Tensor z = Tensor::scalar(0.0f);
        LossBundle b = assemble(z, z, z, z, z, z, AblationFlags{true, true, true});
        CHECK(b.l_total_G.item() == 0.0f);
        CHECK(b.l_total_D.item() == 0.0f);
    }

    SUBCASE("full configuration sums exactly") {
        LossBundle b = assemble(lc, ls, lgf, lgm, ldf, ldm, AblationFlags{true, true, true});
        CHECK(b.l_total_G.item() == 0.25f + 0.5f + 0.125f + 1.0f);
        CHECK(b.l_total_D.item() == 0.75f + 0.375f);
    }

    SUBCASE("V2 wiring omits the feature-adversarial terms") {
        LossBundle b = assemble(lc, ls, lgf, lgm, ldf, ldm, AblationFlags{false, false, true});
        CHECK(b.l_adv_feat_G.item() == 0.0f);
        CHECK(b.l_adv_feat_D.item() == 0.0f);
        CHECK(b.l_total_G.item() == 0.25f + 0.5f + 1.0f);
        CHECK(b.l_total_D.item() == 0.375f);
    }

    SUBCASE("every component is finite and non-negative by construction") {
        LossBundle b = assemble(lc, ls, lgf, lgm, ldf, ldm, AblationFlags{true, true, true});
        for (const Tensor* t : {&b.l_content, &b.l_style, &b.l_adv_feat_G, &b.l_adv_img_G,
                                &b.l_adv_feat_D, &b.l_adv_img_D, &b.l_total_G, &b.l_total_D}) {
            CHECK(std::isfinite(t->item()));
            CHECK(t->item() >= 0.0f);
        }
    }
}
