#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "phar/btmodel.hpp"
#include "phar/checkpoint.hpp"
#include "phar/image_io.hpp"
#include "phar/training.hpp"

using namespace phar;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    return fs::temp_directory_path() / ("phar_test_" + name);
}

std::vector<uint8_t> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void spit(const fs::path& p, const std::vector<uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

// Minimal test-only PNG writer: unfiltered rows, one zlib stream.
std::vector<uint8_t> make_png(int w, int h, int channels,
                              const std::vector<uint8_t>& pixels) {
    std::vector<uint8_t> raw;
    for (int y = 0; y < h; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), pixels.begin() + static_cast<size_t>(y) * w * channels,
                   pixels.begin() + static_cast<size_t>(y + 1) * w * channels);
    }
    uLongf comp_len = compressBound(raw.size());
    std::vector<uint8_t> comp(comp_len);
    REQUIRE(compress2(comp.data(), &comp_len, raw.data(), raw.size(), 6) == Z_OK);
    comp.resize(comp_len);

    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    auto be32 = [&](std::vector<uint8_t>& v, uint32_t x) {
        v.push_back(x >> 24);
        v.push_back((x >> 16) & 0xff);
        v.push_back((x >> 8) & 0xff);
        v.push_back(x & 0xff);
    };
    auto chunk = [&](const char* type, const std::vector<uint8_t>& payload) {
        be32(out, static_cast<uint32_t>(payload.size()));
        std::vector<uint8_t> body(type, type + 4);
        body.insert(body.end(), payload.begin(), payload.end());
        out.insert(out.end(), body.begin(), body.end());
        be32(out, static_cast<uint32_t>(crc32(crc32(0, Z_NULL, 0), body.data(), body.size())));
    };
    std::vector<uint8_t> ihdr;
    be32(ihdr, static_cast<uint32_t>(w));
    be32(ihdr, static_cast<uint32_t>(h));
    ihdr.push_back(8);                                  // bit depth
    ihdr.push_back(channels == 3 ? 2 : 0);              // color type
    ihdr.push_back(0);                                  // compression
    ihdr.push_back(0);                                  // filter
    ihdr.push_back(0);                                  // interlace
    chunk("IHDR", ihdr);
    chunk("IDAT", comp);
    chunk("IEND", {});
    return out;
}

}  // namespace

TEST_CASE("ppm round trip is exact for 8-bit data") {
    Rng rng(3);
    Tensor img = oracle::random_uniform(Shape(1, 3, 7, 5), rng, 0.0f, 1.0f);
    const fs::path p1 = temp_file("rt1.ppm"), p2 = temp_file("rt2.ppm");
    save_image(img, p1.string());
    Tensor loaded = load_image(p1.string());
    REQUIRE(loaded.shape() == img.shape());
    for (size_t i = 0; i < img.numel(); ++i) {
        const float q = std::lround(img.data()[i] * 255.0f) / 255.0f;
        CHECK(loaded.data()[i] == doctest::Approx(q).epsilon(1e-6));
    }
    save_image(loaded, p2.string());
    CHECK(slurp(p1) == slurp(p2));
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("p6 header parses per the format definition") {
    const fs::path p = temp_file("tiny.ppm");
    std::vector<uint8_t> bytes = {'P', '6', '\n', '2', ' ', '2', '\n', '2', '5', '5', '\n'};
    for (int i = 0; i < 12; ++i) bytes.push_back(static_cast<uint8_t>(10 * i));
    spit(p, bytes);
    Tensor t = load_image(p.string());
    CHECK(t.shape() == Shape(1, 3, 2, 2));
    CHECK(t.at(0, 0, 0, 0) == doctest::Approx(0.0f));
    CHECK(t.at(0, 2, 1, 1) == doctest::Approx(110.0f / 255.0f));
    fs::remove(p);
}

TEST_CASE("pgm mask threshold is strictly greater than 128") {
    const fs::path p = temp_file("mask.pgm");
    std::vector<uint8_t> bytes = {'P', '5', '\n', '2', ' ', '1', '\n', '2', '5', '5', '\n',
                                  128, 129};
    spit(p, bytes);
    Tensor m = load_mask(p.string());
    CHECK(m.data()[0] == 0.0f);
    CHECK(m.data()[1] == 1.0f);
    fs::remove(p);
}

TEST_CASE("malformed image files raise format errors with byte offsets") {
    const fs::path p = temp_file("bad.ppm");
    SUBCASE("bad magic") {
        spit(p, {'P', '4', '\n'});
        CHECK_THROWS_WITH_AS(load_image(p.string()), doctest::Contains("P6"), Error);
    }
    SUBCASE("truncated payload") {
        spit(p, {'P', '6', '\n', '2', ' ', '2', '\n', '2', '5', '5', '\n', 1, 2, 3});
        CHECK_THROWS_WITH_AS(load_image(p.string()), doctest::Contains("truncated"), Error);
    }
    SUBCASE("unsupported maxval") {
        spit(p, {'P', '6', '\n', '1', ' ', '1', '\n', '6', '5', '5', '3', '5', '\n'});
        CHECK_THROWS_WITH_AS(load_image(p.string()), doctest::Contains("maxval"), Error);
    }
    fs::remove(p);
}

TEST_CASE("png decoding") {
    SUBCASE("rgb round trip through the test writer") {
        Rng rng(5);
        std::vector<uint8_t> pixels(6 * 4 * 3);
        for (auto& b : pixels) b = static_cast<uint8_t>(rng.uniform_int(256));
        const fs::path p = temp_file("t.png");
        spit(p, make_png(6, 4, 3, pixels));
        Tensor t = load_image(p.string());
        REQUIRE(t.shape() == Shape(1, 3, 4, 6));
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 6; ++x)
                for (int c = 0; c < 3; ++c)
                    CHECK(t.at(0, c, y, x) ==
                          doctest::Approx(pixels[(y * 6 + x) * 3 + c] / 255.0f));
        fs::remove(p);
    }
    SUBCASE("gray png loads as replicated channels and as a mask") {
        std::vector<uint8_t> pixels = {0, 100, 128, 129, 200, 255};
        const fs::path p = temp_file("g.png");
        spit(p, make_png(3, 2, 1, pixels));
        Tensor img = load_image(p.string());
        CHECK(img.shape() == Shape(1, 3, 2, 3));
        CHECK(img.at(0, 0, 0, 1) == img.at(0, 2, 0, 1));
        Tensor mask = load_mask(p.string());
        CHECK(mask.data()[2] == 0.0f);  // 128 thresholds to 0
        CHECK(mask.data()[3] == 1.0f);  // 129 to 1
        fs::remove(p);
    }
    SUBCASE("corrupted chunk is rejected") {
        std::vector<uint8_t> pixels(4 * 4 * 3, 7);
        auto bytes = make_png(4, 4, 3, pixels);
        bytes[40] ^= 0xff;  // flip a byte inside IDAT
        const fs::path p = temp_file("c.png");
        spit(p, bytes);
        CHECK_THROWS_AS(load_image(p.string()), Error);
        fs::remove(p);
    }
}

TEST_CASE("checkpoint lifecycle") {
    TrainConfig cfg;
    cfg.scale = 8;
    cfg.image_size = 64;
    cfg.batch_size = 1;
    cfg.seed = 9;
    Models a(cfg);
    Rng rng(11);
    const fs::path p = temp_file("ckpt.phrn");

    SUBCASE("round trip is bit-identical, including adam state and rng") {
        // give adam state something non-trivial
        for (auto& e : a.gen.decoder_params().entries()) {
            if (!e.trainable) continue;
            e.tensor.ensure_grad();
            for (size_t i = 0; i < e.tensor.numel(); ++i)
                e.tensor.grad()[i] = 0.01f * static_cast<float>(i % 7) - 0.02f;
        }
        adam_step(a.gen.decoder_params(), 1e-3f);
        Rng state_rng(1234);
        state_rng.next_u64();
        save_checkpoint(p.string(), cfg, a.store_refs(), state_rng, 41);

        Models b(cfg);
        Rng loaded_rng(0);
        int64_t step = -1;
        load_checkpoint(p.string(), b.store_refs(), loaded_rng, step);
        CHECK(step == 41);
        CHECK(loaded_rng.state() == state_rng.state());
        auto ra = a.store_refs(), rb = b.store_refs();
        for (size_t s = 0; s < ra.size(); ++s) {
            const auto& ea = ra[s].store->entries();
            const auto& eb = rb[s].store->entries();
            REQUIRE(ea.size() == eb.size());
            for (size_t i = 0; i < ea.size(); ++i) {
                for (size_t j = 0; j < ea[i].tensor.numel(); ++j)
                    CHECK(ea[i].tensor.data()[j] == eb[i].tensor.data()[j]);
                CHECK(ea[i].adam_step == eb[i].adam_step);
                CHECK(ea[i].adam_m == eb[i].adam_m);
                CHECK(ea[i].adam_v == eb[i].adam_v);
            }
        }
        // the config snapshot survives too
        TrainConfig peeked = peek_checkpoint_config(p.string());
        CHECK(peeked.to_json() == cfg.to_json());
    }

    SUBCASE("wrong magic is 'not a checkpoint'") {
        save_checkpoint(p.string(), cfg, a.store_refs(), rng, 0);
        auto bytes = slurp(p);
        bytes[1] ^= 0x01;
        spit(p, bytes);
        CHECK_THROWS_WITH_AS(peek_checkpoint_config(p.string()),
                             doctest::Contains("not a checkpoint"), Error);
    }

    SUBCASE("version mismatch is detected before any tensor is read") {
        save_checkpoint(p.string(), cfg, a.store_refs(), rng, 0);
        auto bytes = slurp(p);
        bytes[4] = 99;
        spit(p, bytes);
        CHECK_THROWS_WITH_AS(peek_checkpoint_config(p.string()),
                             doctest::Contains("version"), Error);
    }

    SUBCASE("truncation names the tensor being read") {
        save_checkpoint(p.string(), cfg, a.store_refs(), rng, 0);
        auto bytes = slurp(p);
        bytes.resize(bytes.size() / 3);  // cut inside the tensor section
        spit(p, bytes);
        Models b(cfg);
        Rng r2(0);
        int64_t step = 0;
        try {
            load_checkpoint(p.string(), b.store_refs(), r2, step);
            FAIL("expected truncation error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("truncated") != std::string::npos);
            CHECK(std::string(e.what()).find("expected") != std::string::npos);
        }
    }

    SUBCASE("one-byte truncation is caught") {
        save_checkpoint(p.string(), cfg, a.store_refs(), rng, 0);
        auto bytes = slurp(p);
        bytes.pop_back();
        spit(p, bytes);
        Models b(cfg);
        Rng r2(0);
        int64_t step = 0;
        CHECK_THROWS_WITH_AS(load_checkpoint(p.string(), b.store_refs(), r2, step),
                             doctest::Contains("truncated"), Error);
    }

    SUBCASE("encoder weight files restrict to E_m paths") {
        std::vector<std::pair<std::string, Tensor>> tensors;
        for (const auto& e : a.gen.encoder_params().entries())
            tensors.emplace_back(e.path, e.tensor);  // store paths already E_m.*
        const fs::path wp = temp_file("enc.phrn");
        save_named_tensors(wp.string(), tensors);
        GeneratorConfig gcfg;
        gcfg.scale = 8;
        gcfg.encoder_weights = wp.string();
        Rng grng(77);  // different seed: weights must come from the file
        Generator g(gcfg, grng);
        for (const auto& e : a.gen.encoder_params().entries()) {
            const Tensor& src = e.tensor;
            const Tensor& dst = g.encoder_params().at(e.path);
            for (size_t i = 0; i < src.numel(); ++i)
                CHECK(src.data()[i] == dst.data()[i]);
        }
        fs::remove(wp);
    }
    fs::remove(p);
}

TEST_CASE("bradley-terry fitter") {
    SUBCASE("symmetric results give exactly zero scores") {
        auto r = bt_fit({"A", "B"}, {{0, 10}, {10, 0}});
        CHECK(std::abs(r.scores[0]) < 1e-12);
        CHECK(std::abs(r.scores[1]) < 1e-12);
    }

    SUBCASE("a shutout still fits and orders correctly") {
        auto r = bt_fit({"A", "B"}, {{0, 10}, {0, 0}});
        CHECK(r.scores[0] > r.scores[1]);
        CHECK(std::isfinite(r.scores[0]));
    }

    SUBCASE("doubling all counts leaves the scores unchanged") {
        std::vector<std::vector<double>> w = {{0, 8, 9}, {2, 0, 7}, {1, 3, 0}};
        auto w2 = w;
        for (auto& row : w2)
            for (double& v : row) v *= 2.0;
        auto r1 = bt_fit({"A", "B", "C"}, w);
        auto r2 = bt_fit({"A", "B", "C"}, w2);
        for (int i = 0; i < 3; ++i)
            CHECK(std::abs(r1.scores[i] - r2.scores[i]) < 1e-9);
    }

    SUBCASE("three-method fit matches a grid-search oracle") {
        const std::vector<std::vector<double>> wins = {{0, 8, 9}, {2, 0, 7}, {1, 3, 0}};
        auto fitted = bt_fit({"A", "B", "C"}, wins);
        const auto aug = bt_augment(wins, 0.05);  // 0.5 pseudo-wins on 10-game pairs
        // coarse-to-fine maximization over the two free parameters
        double best_a = 0.0, best_b = 0.0, span = 4.0;
        for (int round = 0; round < 8; ++round) {
            double best_ll = -1e300, next_a = best_a, next_b = best_b;
            for (int i = -20; i <= 20; ++i)
                for (int j = -20; j <= 20; ++j) {
                    const double sa = best_a + span * i / 20.0;
                    const double sb = best_b + span * j / 20.0;
                    const double ll = bt_log_likelihood(aug, {sa, sb, -sa - sb});
                    if (ll > best_ll) {
                        best_ll = ll;
                        next_a = sa;
                        next_b = sb;
                    }
                }
            best_a = next_a;
            best_b = next_b;
            span /= 8.0;
        }
        CHECK(fitted.scores[0] == doctest::Approx(best_a).epsilon(1e-4));
        CHECK(fitted.scores[1] == doctest::Approx(best_b).epsilon(1e-4));
        CHECK(fitted.scores[2] == doctest::Approx(-best_a - best_b).epsilon(1e-4));
        // zero-mean gauge
        CHECK(std::abs(fitted.scores[0] + fitted.scores[1] + fitted.scores[2]) < 1e-12);
    }

    SUBCASE("disconnected graphs and idle methods are rejected") {
        CHECK_THROWS_WITH_AS(
            bt_fit({"A", "B", "C", "D"},
                   {{0, 5, 0, 0}, {3, 0, 0, 0}, {0, 0, 0, 2}, {0, 0, 6, 0}}),
            doctest::Contains("disconnected"), Error);
        CHECK_THROWS_WITH_AS(bt_fit({"A", "B", "C"}, {{0, 5, 0}, {3, 0, 0}, {0, 0, 0}}),
                             doctest::Contains("zero total games"), Error);
    }

    SUBCASE("pairwise line format parses") {
        std::istringstream in(
            "# comment\n"
            "PAIR ours baseline 8 2\n"
            "PAIR baseline third 7 3\n"
            "PAIR ours third 9 1\n");
        auto [methods, wins] = parse_pairwise(in);
        REQUIRE(methods.size() == 3);
        CHECK(methods[0] == "ours");
        CHECK(wins[0][1] == 8.0);
        CHECK(wins[1][0] == 2.0);
        CHECK(wins[2][1] == 3.0);
        auto r = bt_fit(methods, wins);
        CHECK(r.scores[0] > r.scores[1]);
        CHECK(r.scores[1] > r.scores[2]);
    }
}
