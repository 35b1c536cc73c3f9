#include "phar/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace phar {

namespace {

constexpr char kMagic[4] = {'P', 'H', 'R', 'N'};
constexpr uint32_t kVersion = 1;

class Writer {
public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw_io("cannot open '" + path + "' for writing");
    }
    void bytes(const void* p, size_t n) { out_.write(static_cast<const char*>(p), n); }
    void u8(uint8_t v) { bytes(&v, 1); }
    void u16(uint16_t v) {
        uint8_t b[2] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8)};
        bytes(b, 2);
    }
    void u32(uint32_t v) {
        uint8_t b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
        bytes(b, 4);
    }
    void u64(uint64_t v) {
        uint8_t b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
        bytes(b, 8);
    }
    void f32_array(const float* p, size_t n) {
        for (size_t i = 0; i < n; ++i) u32(std::bit_cast<uint32_t>(p[i]));
    }
    void str(const std::string& s) {
        if (s.size() > 0xffff) throw_value("checkpoint: path too long");
        u16(static_cast<uint16_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void close() {
        out_.flush();
        if (!out_) throw_io("checkpoint write failed");
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw_io("cannot open '" + path + "' for reading");
    }
    void set_context(const std::string& c) { context_ = c; }
    void bytes(void* p, size_t n) {
        in_.read(static_cast<char*>(p), n);
        const size_t got = static_cast<size_t>(in_.gcount());
        if (got != n)
            throw_io("checkpoint '" + path_ + "' truncated at byte " + std::to_string(offset_) +
                     " while reading " + context_ + ": expected " + std::to_string(n) +
                     " bytes, got " + std::to_string(got));
        offset_ += n;
    }
    uint8_t u8() {
        uint8_t v;
        bytes(&v, 1);
        return v;
    }
    uint16_t u16() {
        uint8_t b[2];
        bytes(b, 2);
        return static_cast<uint16_t>(b[0] | (b[1] << 8));
    }
    uint32_t u32() {
        uint8_t b[4];
        bytes(b, 4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
        return v;
    }
    uint64_t u64() {
        uint8_t b[8];
        bytes(b, 8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
        return v;
    }
    void f32_array(float* p, size_t n) {
        for (size_t i = 0; i < n; ++i) p[i] = std::bit_cast<float>(u32());
    }
    std::string str() {
        const uint16_t n = u16();
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }

private:
    std::ifstream in_;
    std::string path_;
    std::string context_ = "header";
    size_t offset_ = 0;
};

void write_header(Writer& w, const TrainConfig& cfg, bool has_state) {
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    const std::string cfg_json = cfg.to_json();
    w.u32(static_cast<uint32_t>(cfg_json.size()));
    w.bytes(cfg_json.data(), cfg_json.size());
    w.u8(has_state ? 1 : 0);
}

struct Header {
    TrainConfig cfg;
    bool has_state = false;
};

Header read_header(Reader& r, const std::string& path) {
    char magic[4];
    r.set_context("magic");
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw_format("'" + path + "' is not a checkpoint (bad magic)");
    r.set_context("version");
    const uint32_t version = r.u32();
    if (version != kVersion)
        throw_format("checkpoint '" + path + "' has format version " +
                     std::to_string(version) + ", expected " + std::to_string(kVersion));
    r.set_context("config");
    const uint32_t cfg_len = r.u32();
    std::string cfg_json(cfg_len, '\0');
    r.bytes(cfg_json.data(), cfg_len);
    Header h;
    h.cfg = TrainConfig::from_json(cfg_json);
    h.has_state = r.u8() != 0;
    return h;
}

void write_tensor(Writer& w, const std::string& path, const Tensor& t) {
    w.str(path);
    w.u8(0);  // dtype: f32
    const Shape& s = t.shape();
    w.u32(static_cast<uint32_t>(s.n));
    w.u32(static_cast<uint32_t>(s.c));
    w.u32(static_cast<uint32_t>(s.h));
    w.u32(static_cast<uint32_t>(s.w));
    w.u64(t.numel());
    w.f32_array(t.data(), t.numel());
}

std::pair<std::string, Tensor> read_tensor(Reader& r) {
    r.set_context("tensor path");
    const std::string path = r.str();
    r.set_context("tensor '" + path + "'");
    const uint8_t dtype = r.u8();
    if (dtype != 0)
        throw_format("checkpoint tensor '" + path + "' has unsupported dtype tag " +
                     std::to_string(dtype));
    // sequenced reads: argument evaluation order is unspecified
    const int sn = static_cast<int>(r.u32());
    const int sc = static_cast<int>(r.u32());
    const int sh = static_cast<int>(r.u32());
    const int sw = static_cast<int>(r.u32());
    Shape s(sn, sc, sh, sw);
    const uint64_t numel = r.u64();
    if (numel != s.numel())
        throw_format("checkpoint tensor '" + path + "' claims " + std::to_string(numel) +
                     " elements for shape " + s.str());
    Tensor t(s);
    r.f32_array(t.data(), numel);
    return {path, t};
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainConfig& cfg,
                     const std::vector<StoreRef>& stores, const Rng& rng, int64_t step) {
    Writer w(path);
    write_header(w, cfg, true);

    uint32_t n_params = 0, n_train = 0;
    for (const StoreRef& ref : stores)
        for (const auto& e : ref.store->entries()) {
            ++n_params;
            if (e.trainable) ++n_train;
        }
    w.u32(n_params);
    for (const StoreRef& ref : stores)
        for (const auto& e : ref.store->entries())
            write_tensor(w, ref.name + "." + e.path, e.tensor);

    w.u32(n_train);
    for (const StoreRef& ref : stores)
        for (const auto& e : ref.store->entries()) {
            if (!e.trainable) continue;
            w.str(ref.name + "." + e.path);
            w.u64(static_cast<uint64_t>(e.adam_step));
            w.u64(e.tensor.numel());
            w.f32_array(e.adam_m.data(), e.adam_m.size());
            w.f32_array(e.adam_v.data(), e.adam_v.size());
        }

    for (uint64_t word : rng.state()) w.u64(word);
    w.u64(static_cast<uint64_t>(step));
    w.close();
}

TrainConfig peek_checkpoint_config(const std::string& path) {
    Reader r(path);
    return read_header(r, path).cfg;
}

void load_checkpoint(const std::string& path, const std::vector<StoreRef>& stores, Rng& rng,
                     int64_t& step) {
    Reader r(path);
    const Header h = read_header(r, path);
    if (!h.has_state)
        throw_format("checkpoint '" + path + "' carries no training state");

    auto find_entry = [&](const std::string& full) -> ParamStore::Entry* {
        for (const StoreRef& ref : stores) {
            const std::string prefix = ref.name + ".";
            if (full.rfind(prefix, 0) == 0) {
                const std::string inner = full.substr(prefix.size());
                if (ref.store->contains(inner)) return &ref.store->entry(inner);
            }
        }
        return nullptr;
    };

    r.set_context("tensor count");
    const uint32_t n_params = r.u32();
    for (uint32_t i = 0; i < n_params; ++i) {
        auto [full, t] = read_tensor(r);
        ParamStore::Entry* e = find_entry(full);
        if (!e) throw_format("checkpoint tensor '" + full + "' has no matching parameter");
        if (e->tensor.shape() != t.shape())
            throw_format("checkpoint tensor '" + full + "' shape " + t.shape().str() +
                         " does not match model shape " + e->tensor.shape().str());
        std::copy(t.data(), t.data() + t.numel(), e->tensor.data());
    }

    r.set_context("adam count");
    const uint32_t n_train = r.u32();
    for (uint32_t i = 0; i < n_train; ++i) {
        r.set_context("adam path");
        const std::string full = r.str();
        r.set_context("adam state '" + full + "'");
        ParamStore::Entry* e = find_entry(full);
        if (!e || !e->trainable)
            throw_format("checkpoint adam state '" + full + "' has no trainable parameter");
        e->adam_step = static_cast<int64_t>(r.u64());
        const uint64_t numel = r.u64();
        if (numel != e->tensor.numel())
            throw_format("checkpoint adam state '" + full + "' size mismatch");
        r.f32_array(e->adam_m.data(), numel);
        r.f32_array(e->adam_v.data(), numel);
    }

    r.set_context("rng state");
    std::array<uint64_t, 4> state;
    for (auto& word : state) word = r.u64();
    rng.set_state(state);
    r.set_context("step counter");
    step = static_cast<int64_t>(r.u64());
}

void save_named_tensors(const std::string& path,
                        const std::vector<std::pair<std::string, Tensor>>& tensors) {
    Writer w(path);
    write_header(w, TrainConfig{}, false);
    w.u32(static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) write_tensor(w, name, t);
    w.close();
}

std::vector<std::pair<std::string, Tensor>> load_named_tensors(const std::string& path) {
    Reader r(path);
    read_header(r, path);
    r.set_context("tensor count");
    const uint32_t n = r.u32();
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        auto [full, t] = read_tensor(r);
        if (full.rfind("gen.", 0) == 0) full = full.substr(4);
        out.emplace_back(full, t);
    }
    return out;
}

// ---- TrainConfig JSON ------------------------------------------------------

std::string TrainConfig::to_json() const {
    nlohmann::json j;
    j["learning_rate"] = learning_rate;
    j["adam_beta1"] = adam_beta1;
    j["adam_beta2"] = adam_beta2;
    j["adam_eps"] = adam_eps;
    j["batch_size"] = batch_size;
    j["max_steps"] = max_steps;
    j["seed"] = seed;
    j["image_size"] = image_size;
    j["scale"] = scale;
    j["use_residual_encoder"] = use_residual_encoder;
    j["use_feature_disc"] = use_feature_disc;
    j["use_image_disc"] = use_image_disc;
    j["use_blending"] = use_blending;
    j["residual_layers"] = std::vector<int>(residual_layers.begin(), residual_layers.end());
    j["checkpoint_every"] = checkpoint_every;
    j["encoder_weights"] = encoder_weights;
    return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw_format(std::string("config snapshot is not valid JSON: ") + e.what());
    }
    TrainConfig c;
    try {
        c.learning_rate = j.at("learning_rate").get<float>();
        c.adam_beta1 = j.at("adam_beta1").get<float>();
        c.adam_beta2 = j.at("adam_beta2").get<float>();
        c.adam_eps = j.at("adam_eps").get<float>();
        c.batch_size = j.at("batch_size").get<int>();
        c.max_steps = j.at("max_steps").get<int64_t>();
        c.seed = j.at("seed").get<uint64_t>();
        c.image_size = j.at("image_size").get<int>();
        c.scale = j.at("scale").get<int>();
        c.use_residual_encoder = j.at("use_residual_encoder").get<bool>();
        c.use_feature_disc = j.at("use_feature_disc").get<bool>();
        c.use_image_disc = j.at("use_image_disc").get<bool>();
        c.use_blending = j.at("use_blending").get<bool>();
        auto layers = j.at("residual_layers").get<std::vector<int>>();
        c.residual_layers = std::set<int>(layers.begin(), layers.end());
        c.checkpoint_every = j.at("checkpoint_every").get<int64_t>();
        c.encoder_weights = j.at("encoder_weights").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw_format(std::string("config snapshot is missing fields: ") + e.what());
    }
    c.validate();
    return c;
}

void TrainConfig::apply_ablation(const std::string& tag) {
    if (tag == "V1") {
        use_residual_encoder = false;
        use_feature_disc = false;
        use_image_disc = false;
    } else if (tag == "V2") {
        use_residual_encoder = false;
        use_feature_disc = false;
        use_image_disc = true;
    } else if (tag == "V3") {
        use_residual_encoder = true;
        use_feature_disc = false;
        use_image_disc = true;
    } else if (tag == "V4") {
        use_residual_encoder = true;
        use_feature_disc = true;
        use_image_disc = true;
    } else {
        throw_usage("unknown ablation tag '" + tag + "' (expected V1..V4)");
    }
}

}  // namespace phar
