#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace prism {

// ---------------------------------------------------------------------------
// Error types. Every failure mode the library reports deliberately gets its
// own exception so callers can distinguish a bad input from a bad file.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor/image dimensions violate a documented precondition.
struct ShapeError : Error {
    using Error::Error;
};

/// Numeric input outside the documented domain (e.g. unnormalized joint).
struct ValueError : Error {
    using Error::Error;
};

/// An attention level whose key mask is entirely zero.
struct EmptyKeyError : Error {
    using Error::Error;
};

/// Pruning removed every patch of one image; matching cannot proceed.
struct DegeneratePruningError : Error {
    using Error::Error;
};

/// File I/O, checkpoint integrity or version problems.
struct IoError : Error {
    using Error::Error;
};

/// Pose estimation could not produce a result (too few or degenerate matches).
struct NoPoseError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

#define PRISM_CHECK_SHAPE(cond, msg) \
    do { if (!(cond)) throw ::prism::ShapeError(msg); } while (0)
#define PRISM_CHECK_VALUE(cond, msg) \
    do { if (!(cond)) throw ::prism::ValueError(msg); } while (0)

// ---------------------------------------------------------------------------
// Deterministic random numbers. The distributions are implemented here rather
// than taken from <random> so that a given seed produces the same stream on
// every standard library.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {
        uint64_t s = seed;
        for (auto& w : state_) w = splitmix64(s);
    }

    // xoshiro256**
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

    /// Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t span = uint64_t(hi - lo) + 1;
        return lo + int64_t(next_u64() % span);
    }

    /// Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Derive an independent generator for a named substream.
    /// Derive an independent stream. Depends only on the construction seed and
    /// the stream id, never on how much the parent has already drawn.
    Rng fork(uint64_t stream) const {
        uint64_t s = seed_ ^ (0x632be59bd9b4e019ull + stream * 0x9e3779b97f4a7c15ull);
        return Rng(splitmix64(s));
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t seed_ = 0;
    uint64_t state_[4];
};

}  // namespace prism
