// SPDX-License-Identifier: Apache-2.0
#include "avlink/rng.hpp"

namespace avlink {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t sub) {
    return splitmix64(splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(stream)) ^ sub);
}

Matrix Rng::normal_matrix(Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal();
    return m;
}

Real Rng::truncated_normal(Real std) {
    for (;;) {
        const Real z = normal();
        if (z >= -2.0 && z <= 2.0) return z * std;
    }
}

}  // namespace avlink
