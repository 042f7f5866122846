#pragma once

// Counter-based random numbers (Philox4x32-10). A stream is identified by a
// 64-bit seed plus a path of 64-bit keys, so every (sample, attempt, step,
// purpose) tuple gets its own independent sequence without any shared state.

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <vector>

#include "maskdime/tensor.hpp"

namespace maskdime {

using Philox4x32 = std::array<std::uint32_t, 4>;

/// One Philox4x32 block with 10 rounds.
inline Philox4x32 philox4x32_10(Philox4x32 ctr, std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
    constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
        const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
        ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
               static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
        key[0] += kW0;
        key[1] += kW1;
    }
    return ctr;
}

/// splitmix64 finalizer, used to fold stream keys into a Philox key.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Sequential view over a Philox stream. Copying a stream copies its position.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed = 0) : key_(mix64(seed)) {}

    /// Independent child stream; the parent's position does not matter.
    RngStream substream(std::initializer_list<std::uint64_t> path) const {
        RngStream child;
        child.key_ = key_;
        for (std::uint64_t p : path) child.key_ = mix64(child.key_ ^ mix64(p + 0x632BE59BD9B4E019ull));
        return child;
    }

    std::uint64_t key() const noexcept { return key_; }

    std::uint32_t next_u32() {
        if (pos_ == 4) refill();
        return block_[pos_++];
    }

    std::uint64_t next_u64() {
        const std::uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] (inclusive), by rejection.
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(static_cast<std::int64_t>(hi) - lo) + 1;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t v;
        do v = next_u64();
        while (v >= limit);
        return lo + static_cast<int>(v % span);
    }

    /// Standard normal via Box-Muller; both outputs of a pair are used.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(th);
        has_spare_ = true;
        return r * std::cos(th);
    }

    Tensor normal_tensor(const Shape& shape) {
        Tensor t(shape);
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(normal());
        return t;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    void refill() {
        block_ = philox4x32_10({static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32), 0u, 0u},
                               {static_cast<std::uint32_t>(key_), static_cast<std::uint32_t>(key_ >> 32)});
        ++counter_;
        pos_ = 0;
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    Philox4x32 block_{};
    int pos_ = 4;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Stream tags used across the library so that purposes never collide.
enum class StreamTag : std::uint64_t {
    dataset = 1,
    init_noise = 2,
    step_noise = 3,
    reference_noise = 4,
    inner_loop = 5,
    training = 6,
    split = 7,
    weights = 8,
    diversity = 9,
};

inline std::uint64_t tag(StreamTag t) { return static_cast<std::uint64_t>(t); }

}  // namespace maskdime
