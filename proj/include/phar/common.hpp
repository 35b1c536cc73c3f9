#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace phar {

// Error taxonomy used across the library. Every throw site goes through
// Error so callers can branch on kind instead of parsing messages.
class Error : public std::runtime_error {
public:
    enum class Kind { shape, value, io, format, usage };

    Error(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

[[noreturn]] inline void throw_shape(const std::string& msg) { throw Error(Error::Kind::shape, msg); }
[[noreturn]] inline void throw_value(const std::string& msg) { throw Error(Error::Kind::value, msg); }
[[noreturn]] inline void throw_io(const std::string& msg) { throw Error(Error::Kind::io, msg); }
[[noreturn]] inline void throw_format(const std::string& msg) { throw Error(Error::Kind::format, msg); }
[[noreturn]] inline void throw_usage(const std::string& msg) { throw Error(Error::Kind::usage, msg); }

// xoshiro256** seeded through splitmix64. Fully portable: the generated
// stream depends only on the seed, never on the platform or standard
// library, and the four-word state serializes directly into checkpoints.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            w = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

    // Uniform in [0, 1) with 24 bits of mantissa, exact in float.
    float uniform() { return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f); }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be positive.
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

    std::array<uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::array<uint64_t, 4> state_{};
};

}  // namespace phar
