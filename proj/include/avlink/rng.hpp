// SPDX-License-Identifier: Apache-2.0
//
// Seeded random streams. A run has one base seed; independent consumers
// (data noise, timestep draws, dropout draws, ...) each get their own
// generator derived as splitmix64(seed, stream id, sub id), so adding draws
// to one stream never shifts another.

#pragma once

#include "avlink/common.hpp"

#include <cstdint>
#include <random>

namespace avlink {

enum class Stream : std::uint64_t {
    init = 1,
    data = 2,
    batch = 3,
    gen_noise = 4,
    timestep = 5,
    dropout = 6,
    cond_noise = 7,
    sampler = 8,
    eval = 9,
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t sub = 0);

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    static Rng stream(std::uint64_t seed, Stream s, std::uint64_t sub = 0) { return Rng(derive_seed(seed, s, sub)); }

    Real uniform() { return uniform_(engine_); }
    Real normal() { return normal_(engine_); }
    bool bernoulli(Real p) { return uniform() < p; }
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_); }
    Matrix normal_matrix(Index rows, Index cols);
    // Normal(0, std) resampled until |z| <= 2 std.
    Real truncated_normal(Real std);

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::uniform_real_distribution<Real> uniform_{0.0, 1.0};
    std::normal_distribution<Real> normal_{0.0, 1.0};
};

}  // namespace avlink
