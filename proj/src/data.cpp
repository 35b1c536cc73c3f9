#include "phar/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace phar {

namespace fs = std::filesystem;

CorpusManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw_io("cannot open manifest '" + path + "'");
    const fs::path base = fs::path(path).parent_path();
    CorpusManifest m;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream ss(line);
        std::string tag;
        if (!(ss >> tag)) continue;
        if (tag == "FG") {
            std::string image, mask;
            if (!(ss >> image >> mask))
                throw_format("manifest '" + path + "' line " + std::to_string(lineno) +
                             ": FG needs <image> <mask>");
            m.foregrounds.push_back({(base / image).string(), (base / mask).string()});
        } else if (tag == "BG") {
            std::string image;
            if (!(ss >> image))
                throw_format("manifest '" + path + "' line " + std::to_string(lineno) +
                             ": BG needs <image>");
            m.backgrounds.push_back((base / image).string());
        } else {
            throw_format("manifest '" + path + "' line " + std::to_string(lineno) +
                         ": unknown tag '" + tag + "'");
        }
    }
    for (const auto& fg : m.foregrounds) {
        if (!fs::exists(fg.image)) throw_io("manifest references missing file " + fg.image);
        if (!fs::exists(fg.mask)) throw_io("manifest references missing file " + fg.mask);
    }
    for (const auto& bg : m.backgrounds)
        if (!fs::exists(bg)) throw_io("manifest references missing file " + bg);
    if (m.foregrounds.empty() || m.backgrounds.empty())
        throw_format("manifest '" + path + "' needs at least one FG and one BG entry");
    return m;
}

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w) {
    const Shape& s = image.shape();
    if (out_h < 1 || out_w < 1) throw_value("resize_bilinear: non-positive target size");
    Tensor out(Shape(s.n, s.c, out_h, out_w));
    const float sy = static_cast<float>(s.h) / out_h;
    const float sx = static_cast<float>(s.w) / out_w;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const float* src = image.data() + (static_cast<size_t>(n) * s.c + c) *
                                                  static_cast<size_t>(s.h) * s.w;
            float* dst = out.data() + (static_cast<size_t>(n) * s.c + c) *
                                          static_cast<size_t>(out_h) * out_w;
            for (int y = 0; y < out_h; ++y) {
                const float fy = std::max(0.0f, (y + 0.5f) * sy - 0.5f);
                const int y0 = std::min(static_cast<int>(fy), s.h - 1);
                const int y1 = std::min(y0 + 1, s.h - 1);
                const float wy = fy - static_cast<float>(y0);
                for (int x = 0; x < out_w; ++x) {
                    const float fx = std::max(0.0f, (x + 0.5f) * sx - 0.5f);
                    const int x0 = std::min(static_cast<int>(fx), s.w - 1);
                    const int x1 = std::min(x0 + 1, s.w - 1);
                    const float wx = fx - static_cast<float>(x0);
                    const float top = src[static_cast<size_t>(y0) * s.w + x0] * (1.0f - wx) +
                                      src[static_cast<size_t>(y0) * s.w + x1] * wx;
                    const float bot = src[static_cast<size_t>(y1) * s.w + x0] * (1.0f - wx) +
                                      src[static_cast<size_t>(y1) * s.w + x1] * wx;
                    dst[static_cast<size_t>(y) * out_w + x] = top * (1.0f - wy) + bot * wy;
                }
            }
        }
    return out;
}

Tensor resize_nearest(const Tensor& image, int out_h, int out_w) {
    const Shape& s = image.shape();
    if (out_h < 1 || out_w < 1) throw_value("resize_nearest: non-positive target size");
    Tensor out(Shape(s.n, s.c, out_h, out_w));
    const float sy = static_cast<float>(s.h) / out_h;
    const float sx = static_cast<float>(s.w) / out_w;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const float* src = image.data() + (static_cast<size_t>(n) * s.c + c) *
                                                  static_cast<size_t>(s.h) * s.w;
            float* dst = out.data() + (static_cast<size_t>(n) * s.c + c) *
                                          static_cast<size_t>(out_h) * out_w;
            for (int y = 0; y < out_h; ++y) {
                const int sy_i = std::min(static_cast<int>((y + 0.5f) * sy), s.h - 1);
                for (int x = 0; x < out_w; ++x) {
                    const int sx_i = std::min(static_cast<int>((x + 0.5f) * sx), s.w - 1);
                    dst[static_cast<size_t>(y) * out_w + x] =
                        src[static_cast<size_t>(sy_i) * s.w + sx_i];
                }
            }
        }
    return out;
}

namespace {

struct Box {
    int top, left, height, width;
};

Box mask_bbox(const Tensor& mask) {
    const Shape& s = mask.shape();
    int top = s.h, bottom = -1, left = s.w, right = -1;
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
            if (mask.at(0, 0, y, x) > 0.5f) {
                top = std::min(top, y);
                bottom = std::max(bottom, y);
                left = std::min(left, x);
                right = std::max(right, x);
            }
    if (bottom < 0) return {0, 0, 0, 0};
    return {top, left, bottom - top + 1, right - left + 1};
}

Tensor crop_tensor(const Tensor& t, const Box& box) {
    const Shape& s = t.shape();
    Tensor out(Shape(1, s.c, box.height, box.width));
    for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < box.height; ++y)
            for (int x = 0; x < box.width; ++x)
                out.at(0, c, y, x) = t.at(0, c, box.top + y, box.left + x);
    return out;
}

size_t count_mask(const Tensor& mask) {
    size_t n = 0;
    for (size_t i = 0; i < mask.numel(); ++i)
        if (mask.data()[i] > 0.5f) ++n;
    return n;
}

}  // namespace

CompositeResult make_composite(const Tensor& fg_image, const Tensor& fg_mask,
                               const Tensor& bg_image, int canvas_size, Rng& rng) {
    if (canvas_size < 8) throw_value("make_composite: canvas too small");
    if (fg_image.shape().h != fg_mask.shape().h || fg_image.shape().w != fg_mask.shape().w)
        throw_shape("make_composite: foreground image and mask sizes differ");

    CompositeResult result;
    const Box box = mask_bbox(fg_mask);
    if (box.height < 2 || box.width < 2) {
        result.skip_reason = "foreground mask degenerate (empty or single pixel)";
        return result;
    }
    const Tensor fg_crop = crop_tensor(fg_image, box);
    const Tensor mask_crop = crop_tensor(fg_mask, box);
    const double box_area = static_cast<double>(count_mask(mask_crop));
    const double canvas_area = static_cast<double>(canvas_size) * canvas_size;

    // Largest scale that still fits on the canvas, and the mask ratio there.
    const double fit = std::min(static_cast<double>(canvas_size) / box.height,
                                static_cast<double>(canvas_size) / box.width);
    const double density = box_area / (static_cast<double>(box.height) * box.width);
    const double max_ratio_fit =
        density * (fit * box.height) * (fit * box.width) / canvas_area;
    if (max_ratio_fit < 0.05) {
        result.skip_reason = "foreground too sparse: cannot reach 5% canvas coverage";
        return result;
    }

    const double hi = std::min(0.3, max_ratio_fit);
    double target = 0.05 + (hi - 0.05) * rng.uniform();
    Tensor scaled_mask;
    int out_h = 0, out_w = 0;
    bool ok = false;
    for (int attempt = 0; attempt < 8 && !ok; ++attempt) {
        double f = std::sqrt(target * canvas_area / box_area);
        f = std::min(f, fit);
        out_h = std::max(2, static_cast<int>(std::lround(f * box.height)));
        out_w = std::max(2, static_cast<int>(std::lround(f * box.width)));
        out_h = std::min(out_h, canvas_size);
        out_w = std::min(out_w, canvas_size);
        scaled_mask = resize_nearest(mask_crop, out_h, out_w);
        const double ratio = static_cast<double>(count_mask(scaled_mask)) / canvas_area;
        if (ratio >= 0.05 && ratio <= 0.3) {
            ok = true;
        } else if (ratio > 0.3) {
            target = std::max(0.05, target * 0.28 / ratio);
        } else if (ratio > 0.0) {
            target = std::min(hi, target * 0.06 / ratio);
        } else {
            break;  // rasterized mask vanished; this foreground cannot work
        }
    }
    if (!ok) {
        result.skip_reason = "could not land mask area in [0.05, 0.3] after rescaling";
        return result;
    }

    Tensor canvas = (bg_image.shape().h == canvas_size && bg_image.shape().w == canvas_size)
                        ? bg_image.clone()
                        : resize_bilinear(bg_image, canvas_size, canvas_size);
    Tensor composite = canvas.clone();
    Tensor mask(Shape(1, 1, canvas_size, canvas_size), 0.0f);
    const Tensor scaled_fg = resize_bilinear(fg_crop, out_h, out_w);

    const int max_top = canvas_size - out_h;
    const int max_left = canvas_size - out_w;
    const int top = max_top > 0 ? static_cast<int>(rng.uniform_int(max_top + 1)) : 0;
    const int left = max_left > 0 ? static_cast<int>(rng.uniform_int(max_left + 1)) : 0;

    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            if (scaled_mask.at(0, 0, y, x) <= 0.5f) continue;
            mask.at(0, 0, top + y, left + x) = 1.0f;
            for (int c = 0; c < 3; ++c)
                composite.at(0, c, top + y, left + x) = scaled_fg.at(0, c, y, x);
        }

    result.sample = CompositeSample{canvas, composite, mask};
    return result;
}

CorpusManifest synth_corpus(const std::string& dir, int n_fg, int n_bg, int size,
                            uint64_t seed) {
    if (n_fg < 1 || n_bg < 1 || size < 16) throw_value("synth_corpus: bad parameters");
    fs::create_directories(dir);
    Rng rng(seed);
    CorpusManifest manifest;
    std::ostringstream lines;

    // Foregrounds: smooth-gradient superellipse objects on mid-gray canvases,
    // channels centered near 0.5.
    for (int i = 0; i < n_fg; ++i) {
        Tensor img(Shape(1, 3, size, size), 0.0f);
        Tensor mask(Shape(1, 1, size, size), 0.0f);
        const float cx = size * rng.uniform(0.4f, 0.6f);
        const float cy = size * rng.uniform(0.4f, 0.6f);
        const float ax = size * rng.uniform(0.22f, 0.4f);
        const float ay = size * rng.uniform(0.22f, 0.4f);
        const float power = rng.uniform(1.6f, 3.0f);
        float c0[3], c1[3];
        for (int c = 0; c < 3; ++c) {
            c0[c] = rng.uniform(0.35f, 0.65f);
            c1[c] = rng.uniform(0.35f, 0.65f);
        }
        const float gx = rng.uniform(-1.0f, 1.0f), gy = rng.uniform(-1.0f, 1.0f);
        const float wobble = rng.uniform(2.0f, 5.0f);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const float u = (x - cx) / ax, v = (y - cy) / ay;
                const float r = std::pow(std::abs(u), power) + std::pow(std::abs(v), power);
                if (r <= 1.0f) mask.at(0, 0, y, x) = 1.0f;
                float t = 0.5f + 0.5f * (gx * (x / static_cast<float>(size) - 0.5f) +
                                         gy * (y / static_cast<float>(size) - 0.5f));
                t += 0.06f * std::sin(wobble * 6.2831853f * y / size);
                t = std::min(1.0f, std::max(0.0f, t));
                for (int c = 0; c < 3; ++c)
                    img.at(0, c, y, x) =
                        std::min(1.0f, std::max(0.0f, c0[c] * (1.0f - t) + c1[c] * t));
            }
        char img_name[32], mask_name[32];
        std::snprintf(img_name, sizeof(img_name), "fg_%03d.ppm", i);
        std::snprintf(mask_name, sizeof(mask_name), "fg_%03d_mask.pgm", i);
        save_image(img, (fs::path(dir) / img_name).string());
        save_mask(mask, (fs::path(dir) / mask_name).string());
        manifest.foregrounds.push_back({(fs::path(dir) / img_name).string(),
                                        (fs::path(dir) / mask_name).string()});
        lines << "FG " << img_name << " " << mask_name << "\n";
    }

    // Backgrounds: cool-palette stroke textures. The blue channel sits in
    // [0.7, 0.9] while foregrounds stay near 0.5, so the two populations have
    // clearly separated channel statistics.
    for (int i = 0; i < n_bg; ++i) {
        Tensor img(Shape(1, 3, size, size), 0.0f);
        const float base_r = rng.uniform(0.1f, 0.35f);
        const float base_g = rng.uniform(0.25f, 0.55f);
        const float base_b = rng.uniform(0.72f, 0.88f);
        const float theta = rng.uniform(0.0f, 3.1415926f);
        const float lam = rng.uniform(4.0f, 12.0f);
        const float amp = rng.uniform(0.05f, 0.12f);
        const float lam2 = rng.uniform(2.0f, 6.0f);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const float s1 =
                    std::sin((x * std::cos(theta) + y * std::sin(theta)) * 6.2831853f / lam);
                const float s2 =
                    std::sin((x * std::sin(theta) - y * std::cos(theta)) * 6.2831853f / (lam * lam2));
                const float stroke = amp * s1 + 0.5f * amp * s2;
                const float base[3] = {base_r, base_g, base_b};
                for (int c = 0; c < 3; ++c)
                    img.at(0, c, y, x) =
                        std::min(1.0f, std::max(0.0f, base[c] + stroke * (c == 2 ? 0.5f : 1.0f)));
            }
        char name[32];
        std::snprintf(name, sizeof(name), "bg_%03d.ppm", i);
        save_image(img, (fs::path(dir) / name).string());
        manifest.backgrounds.push_back((fs::path(dir) / name).string());
        lines << "BG " << name << "\n";
    }

    std::ofstream mf(fs::path(dir) / "manifest.txt");
    if (!mf) throw_io("cannot write manifest in " + dir);
    mf << "# synthetic corpus, seed " << seed << "\n" << lines.str();
    return manifest;
}

Tensor stack_batch(const std::vector<Tensor>& items) {
    if (items.empty()) throw_value("stack_batch: no items");
    const Shape& s0 = items[0].shape();
    Tensor out(Shape(static_cast<int>(items.size()), s0.c, s0.h, s0.w));
    const size_t chw = static_cast<size_t>(s0.c) * s0.h * s0.w;
    for (size_t i = 0; i < items.size(); ++i) {
        if (items[i].shape() != s0)
            throw_shape("stack_batch: item " + std::to_string(i) + " shape " +
                        items[i].shape().str() + " differs from " + s0.str());
        std::copy(items[i].data(), items[i].data() + chw, out.data() + i * chw);
    }
    return out;
}

namespace {

constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

// Pure function of (seed, tag, index): every sample's randomness is
// reproducible regardless of how many batches were drawn before it.
Rng derived_rng(uint64_t seed, uint64_t tag, uint64_t index) {
    return Rng(seed ^ (tag * 0x100000001b3ULL) ^ ((index + 1) * kGolden));
}

std::vector<size_t> epoch_permutation(uint64_t seed, uint64_t epoch, size_t n) {
    std::vector<size_t> perm(n);
    for (size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng = derived_rng(seed, 0x5au, epoch);
    for (size_t i = n; i > 1; --i) {
        const size_t j = rng.uniform_int(i);
        std::swap(perm[i - 1], perm[j]);
    }
    return perm;
}

}  // namespace

CorpusSampler::CorpusSampler(const CorpusManifest& manifest, const std::string& base_dir,
                             uint64_t seed)
    : seed_(seed) {
    (void)base_dir;
    for (const auto& fg : manifest.foregrounds) {
        fg_images_.push_back(load_image(fg.image));
        fg_masks_.push_back(load_mask(fg.mask));
    }
    for (const auto& bg : manifest.backgrounds) bg_images_.push_back(load_image(bg));
}

Batch CorpusSampler::batch_at(int64_t position, int batch_size, int image_size) const {
    std::vector<Tensor> comps, bgs, masks;
    const size_t n_fg = fg_images_.size();
    for (int i = 0; i < batch_size; ++i) {
        const uint64_t p = static_cast<uint64_t>(position) * batch_size + i;
        const uint64_t epoch = p / n_fg;
        const auto perm = epoch_permutation(seed_, epoch, n_fg);
        const size_t fg_idx = perm[p % n_fg];
        Rng rng = derived_rng(seed_, 0x51u, p);
        bool done = false;
        for (int attempt = 0; attempt < 32 && !done; ++attempt) {
            const size_t bg_idx = rng.uniform_int(bg_images_.size());
            CompositeResult r = make_composite(fg_images_[fg_idx], fg_masks_[fg_idx],
                                               bg_images_[bg_idx], image_size, rng);
            if (r.sample) {
                comps.push_back(r.sample->composite);
                bgs.push_back(r.sample->background);
                masks.push_back(r.sample->mask);
                done = true;
            }
        }
        if (!done)
            throw_value("corpus sampler: foreground " + std::to_string(fg_idx) +
                        " cannot produce a valid composite");
    }
    return Batch{stack_batch(comps), stack_batch(bgs), stack_batch(masks)};
}

}  // namespace phar
