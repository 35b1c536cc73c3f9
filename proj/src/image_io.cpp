#include "phar/image_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

namespace phar {

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw_io("cannot open '" + path + "'");
    in.seekg(0, std::ios::end);
    const std::streamoff size = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<uint8_t> data(static_cast<size_t>(size));
    in.read(reinterpret_cast<char*>(data.data()), size);
    if (!in) throw_io("failed reading '" + path + "'");
    return data;
}

// ---- PNM (PPM/PGM) ---------------------------------------------------------

struct PnmHeader {
    int width = 0, height = 0, maxval = 0;
    size_t payload_offset = 0;
};

// Parses "P6"/"P5" headers with whitespace and '#' comments.
PnmHeader parse_pnm_header(const std::vector<uint8_t>& data, const char* magic,
                           const std::string& path) {
    size_t pos = 0;
    auto fail = [&](const std::string& what) {
        throw_format("'" + path + "': " + what + " at byte " + std::to_string(pos));
    };
    if (data.size() < 2 || data[0] != static_cast<uint8_t>(magic[0]) ||
        data[1] != static_cast<uint8_t>(magic[1]))
        fail(std::string("expected ") + magic + " magic");
    pos = 2;
    auto next_int = [&]() -> int {
        while (pos < data.size()) {
            if (data[pos] == '#') {
                while (pos < data.size() && data[pos] != '\n') ++pos;
            } else if (std::isspace(data[pos])) {
                ++pos;
            } else {
                break;
            }
        }
        if (pos >= data.size() || !std::isdigit(data[pos])) fail("expected integer");
        long v = 0;
        while (pos < data.size() && std::isdigit(data[pos])) {
            v = v * 10 + (data[pos] - '0');
            if (v > 1 << 24) fail("integer out of range");
            ++pos;
        }
        return static_cast<int>(v);
    };
    PnmHeader h;
    h.width = next_int();
    h.height = next_int();
    h.maxval = next_int();
    if (pos >= data.size() || !std::isspace(data[pos])) fail("expected whitespace after maxval");
    ++pos;
    h.payload_offset = pos;
    if (h.width < 1 || h.height < 1) fail("non-positive dimensions");
    if (h.maxval != 255) fail("unsupported maxval " + std::to_string(h.maxval) +
                              " (only 8-bit supported)");
    return h;
}

Tensor decode_pnm(const std::string& path, bool color) {
    const std::vector<uint8_t> data = read_file(path);
    const PnmHeader h = parse_pnm_header(data, color ? "P6" : "P5", path);
    const int channels = color ? 3 : 1;
    const size_t need = static_cast<size_t>(h.width) * h.height * channels;
    if (data.size() - h.payload_offset < need)
        throw_format("'" + path + "': truncated payload at byte " + std::to_string(data.size()) +
                     ", expected " + std::to_string(h.payload_offset + need) + " bytes");
    Tensor out(Shape(1, channels, h.height, h.width));
    const uint8_t* p = data.data() + h.payload_offset;
    float* o = out.data();
    const size_t hw = static_cast<size_t>(h.width) * h.height;
    for (size_t i = 0; i < hw; ++i)
        for (int c = 0; c < channels; ++c)
            o[c * hw + i] = static_cast<float>(p[i * channels + c]) / 255.0f;
    return out;
}

// ---- PNG -------------------------------------------------------------------

uint32_t be32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

Tensor decode_png(const std::string& path) {
    const std::vector<uint8_t> data = read_file(path);
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (data.size() < 8 || std::memcmp(data.data(), sig, 8) != 0)
        throw_format("'" + path + "': not a PNG (bad signature at byte 0)");

    size_t pos = 8;
    int width = 0, height = 0, channels = 0;
    bool seen_ihdr = false, seen_iend = false;
    std::vector<uint8_t> idat;
    while (pos + 8 <= data.size() && !seen_iend) {
        const uint32_t len = be32(&data[pos]);
        if (pos + 12 + len > data.size())
            throw_format("'" + path + "': truncated chunk at byte " + std::to_string(pos));
        const char* type = reinterpret_cast<const char*>(&data[pos + 4]);
        const uint8_t* payload = &data[pos + 8];
        const uint32_t stored_crc = be32(&data[pos + 8 + len]);
        uint32_t crc = crc32(0L, Z_NULL, 0);
        crc = crc32(crc, &data[pos + 4], len + 4);
        if (crc != stored_crc)
            throw_format("'" + path + "': chunk CRC mismatch at byte " + std::to_string(pos));
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13)
                throw_format("'" + path + "': bad IHDR length at byte " + std::to_string(pos));
            width = static_cast<int>(be32(payload));
            height = static_cast<int>(be32(payload + 4));
            const int bit_depth = payload[8];
            const int color_type = payload[9];
            const int interlace = payload[12];
            if (bit_depth != 8)
                throw_format("'" + path + "': unsupported bit depth " +
                             std::to_string(bit_depth) + " (only 8-bit supported)");
            if (color_type == 0)
                channels = 1;
            else if (color_type == 2)
                channels = 3;
            else
                throw_format("'" + path + "': unsupported color type " +
                             std::to_string(color_type) + " (only gray and RGB)");
            if (interlace != 0)
                throw_format("'" + path + "': interlaced PNG not supported");
            seen_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            seen_iend = true;
        }
        pos += 12 + len;
    }
    if (!seen_ihdr) throw_format("'" + path + "': missing IHDR");
    if (!seen_iend) throw_format("'" + path + "': missing IEND (truncated at byte " +
                                 std::to_string(pos) + ")");
    if (width < 1 || height < 1) throw_format("'" + path + "': bad dimensions");

    const size_t stride = static_cast<size_t>(width) * channels;
    std::vector<uint8_t> raw(static_cast<size_t>(height) * (stride + 1));
    z_stream zs{};
    if (inflateInit(&zs) != Z_OK) throw_io("zlib init failed");
    zs.next_in = idat.data();
    zs.avail_in = static_cast<uInt>(idat.size());
    zs.next_out = raw.data();
    zs.avail_out = static_cast<uInt>(raw.size());
    const int zret = inflate(&zs, Z_FINISH);
    inflateEnd(&zs);
    if (zret != Z_STREAM_END || zs.total_out != raw.size())
        throw_format("'" + path + "': IDAT inflate failed (got " +
                     std::to_string(zs.total_out) + " of " + std::to_string(raw.size()) +
                     " bytes)");

    // undo per-scanline filters
    std::vector<uint8_t> img(static_cast<size_t>(height) * stride);
    const int bpp = channels;
    for (int y = 0; y < height; ++y) {
        const uint8_t filter = raw[static_cast<size_t>(y) * (stride + 1)];
        const uint8_t* src = &raw[static_cast<size_t>(y) * (stride + 1) + 1];
        uint8_t* dst = &img[static_cast<size_t>(y) * stride];
        const uint8_t* up = y > 0 ? &img[static_cast<size_t>(y - 1) * stride] : nullptr;
        for (size_t x = 0; x < stride; ++x) {
            const int a = x >= static_cast<size_t>(bpp) ? dst[x - bpp] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= static_cast<size_t>(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default:
                    throw_format("'" + path + "': unknown filter " + std::to_string(filter) +
                                 " on row " + std::to_string(y));
            }
            dst[x] = static_cast<uint8_t>(v & 0xff);
        }
    }

    Tensor out(Shape(1, channels, height, width));
    float* o = out.data();
    const size_t hw = static_cast<size_t>(width) * height;
    for (size_t i = 0; i < hw; ++i)
        for (int c = 0; c < channels; ++c)
            o[c * hw + i] = static_cast<float>(img[i * channels + c]) / 255.0f;
    return out;
}

bool has_suffix(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool looks_like_png(const std::string& path) {
    return has_suffix(path, ".png") || has_suffix(path, ".PNG");
}

uint8_t quantize(float v) {
    v = std::min(1.0f, std::max(0.0f, v));
    return static_cast<uint8_t>(std::lround(v * 255.0f));
}

}  // namespace

Tensor load_image(const std::string& path) {
    Tensor t = looks_like_png(path) ? decode_png(path) : decode_pnm(path, true);
    if (t.shape().c == 3) return t;
    // grayscale: replicate to 3 channels
    const Shape& s = t.shape();
    Tensor out(Shape(1, 3, s.h, s.w));
    const size_t hw = static_cast<size_t>(s.h) * s.w;
    for (int c = 0; c < 3; ++c)
        std::copy(t.data(), t.data() + hw, out.data() + c * hw);
    return out;
}

Tensor load_mask(const std::string& path) {
    Tensor t = looks_like_png(path) ? decode_png(path) : decode_pnm(path, false);
    if (t.shape().c != 1)
        throw_format("'" + path + "': mask must be single-channel, got " + t.shape().str());
    Tensor out(t.shape());
    const float threshold = 128.0f / 255.0f;
    for (size_t i = 0; i < t.numel(); ++i)
        out.data()[i] = t.data()[i] > threshold ? 1.0f : 0.0f;  // strict > 128
    return out;
}

void save_image(const Tensor& image, const std::string& path) {
    const Shape& s = image.shape();
    if (s.n != 1 || s.c != 3)
        throw_shape("save_image: expected [1,3,H,W], got " + s.str());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw_io("cannot open '" + path + "' for writing");
    out << "P6\n" << s.w << " " << s.h << "\n255\n";
    const size_t hw = static_cast<size_t>(s.h) * s.w;
    std::vector<uint8_t> row(static_cast<size_t>(s.w) * 3);
    const float* d = image.data();
    for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x)
            for (int c = 0; c < 3; ++c)
                row[static_cast<size_t>(x) * 3 + c] =
                    quantize(d[c * hw + static_cast<size_t>(y) * s.w + x]);
        out.write(reinterpret_cast<const char*>(row.data()), row.size());
    }
    if (!out) throw_io("failed writing '" + path + "'");
}

void save_mask(const Tensor& mask, const std::string& path) {
    const Shape& s = mask.shape();
    if (s.n != 1 || s.c != 1)
        throw_shape("save_mask: expected [1,1,H,W], got " + s.str());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw_io("cannot open '" + path + "' for writing");
    out << "P5\n" << s.w << " " << s.h << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(s.w));
    const float* d = mask.data();
    for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x)
            row[x] = quantize(d[static_cast<size_t>(y) * s.w + x]);
        out.write(reinterpret_cast<const char*>(row.data()), row.size());
    }
    if (!out) throw_io("failed writing '" + path + "'");
}

}  // namespace phar
