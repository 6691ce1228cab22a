// SPDX-License-Identifier: Apache-2.0
//
// Deterministic random streams. Every stochastic operation in the library
// takes an explicit RngStream; there is no global generator. The generator
// is PCG32 (O'Neill), chosen because its whole state is two u64 words that
// serialize into checkpoints and reproduce bit-identically on any platform.
// Normal deviates use Box-Muller without a cached spare so the state never
// hides a half-drawn value.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace dskd {

class RngStream {
public:
    RngStream() : RngStream(0, 0) {}

    RngStream(uint64_t seed, uint64_t stream_id) {
        state_ = 0u;
        inc_ = (stream_id << 1u) | 1u;
        next_u32();
        state_ += seed + 0x9e3779b97f4a7c15ull;
        next_u32();
    }

    uint32_t next_u32() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ull + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        uint64_t hi = next_u32();
        uint64_t lo = next_u32();
        uint64_t bits = ((hi << 32) | lo) >> 11;
        return static_cast<double>(bits) * (1.0 / 9007199254740992.0);
    }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("RngStream::uniform_int: n must be positive");
        // rejection sampling to avoid modulo bias
        uint32_t bound = static_cast<uint32_t>(n);
        uint32_t threshold = (0u - bound) % bound;
        for (;;) {
            uint32_t r = next_u32();
            if (r >= threshold) return static_cast<int>(r % bound);
        }
    }

    // Standard normal via Box-Muller; two uniforms per draw, no cached spare.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // Raw state access for checkpoint serialization.
    std::array<uint64_t, 2> save_state() const { return {state_, inc_}; }
    void restore_state(const std::array<uint64_t, 2>& s) {
        state_ = s[0];
        inc_ = s[1];
    }

private:
    uint64_t state_;
    uint64_t inc_;
};

// Stream tags keep the named streams of a run distinct even under equal seeds.
namespace stream_tag {
inline constexpr uint64_t init = 0x01;
inline constexpr uint64_t data_order = 0x02;
inline constexpr uint64_t diffusion_noise = 0x03;
inline constexpr uint64_t guidance_sampling = 0x04;
inline constexpr uint64_t dataset = 0x05;
inline constexpr uint64_t lsh = 0x06;
inline constexpr uint64_t split = 0x07;
inline constexpr uint64_t label_noise = 0x08;
}  // namespace stream_tag

}  // namespace dskd
