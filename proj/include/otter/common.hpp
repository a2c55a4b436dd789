#pragma once

// Shared scalar utilities: error type, deterministic RNG streams, fast
// transcendentals for the float pipeline, activation kinds.

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace otter {

class OtterError : public std::runtime_error {
public:
    explicit OtterError(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& where, const std::string& what) {
    throw OtterError(where + ": " + what);
}

inline void check(bool cond, const std::string& where, const std::string& what) {
    if (!cond) {
        fail(where, what);
    }
}

// ----------------------------- deterministic RNG -----------------------------
// splitmix64 core; all randomness in the project flows through this so runs
// are bit-reproducible across platforms (no std::distribution involved).
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed) : state(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Box-Muller, one value per call (second value discarded to keep the
    // stream position independent of call parity).
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) {
            u1 = 1e-300;
        }
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586 * u2);
    }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) {
        return next_u64() % n;
    }
};

// Derive an independent stream from a master seed and a stream index.
// Stateless: the same (seed, index) always yields the same stream, which is
// what makes checkpoint resume bit-exact.
inline uint64_t substream(uint64_t seed, uint64_t index) {
    Rng r(seed ^ (0x632be59bd9b4e019ull * (index + 1)));
    return r.next_u64();
}

// ----------------------------- fast exp (float path) -----------------------------
// Polynomial exp with exact power-of-two scaling, ~1e-13 relative accuracy.
// Pure function of the bits of x, so results are reproducible run to run.
inline double fast_exp(double x) {
    if (x < -708.0) {
        return 0.0;
    }
    if (x > 709.0) {
        return std::numeric_limits<double>::infinity();
    }
    const double log2e = 1.4426950408889634;
    const double ln2_hi = 6.93147180369123816490e-01;
    const double ln2_lo = 1.90821492927058770002e-10;
    // round-to-nearest via the 2^52 shifter trick; the rounded integer sits
    // in the low mantissa bits as two's complement
    const double shifter = 6755399441055744.0;  // 1.5 * 2^52
    const double t = x * log2e + shifter;
    const int32_t ki = static_cast<int32_t>(std::bit_cast<uint64_t>(t) & 0xffffffffull);
    const double k = t - shifter;
    const double r = (x - k * ln2_hi) - k * ln2_lo;
    // degree-7 Taylor on |r| <= 0.3466, Estrin grouping for a short chain
    const double r2 = r * r;
    const double r4 = r2 * r2;
    const double p01 = 1.0 + r;
    const double p23 = 0.5 + r * (1.0 / 6.0);
    const double p45 = 1.0 / 24.0 + r * (1.0 / 120.0);
    const double p67 = 1.0 / 720.0 + r * (1.0 / 5040.0);
    const double p = (p01 + r2 * p23) + r4 * (p45 + r2 * p67);
    // assemble 2^k into the exponent field (|k| <= 1025 here, biased fits)
    const uint64_t ebits = static_cast<uint64_t>(1023 + ki) << 52;
    return p * std::bit_cast<double>(ebits);
}

// guard-free core for arguments already clamped to a safe range; the loops
// around it vectorize
inline double fast_exp_unsafe(double x) {
    const double log2e = 1.4426950408889634;
    const double ln2_hi = 6.93147180369123816490e-01;
    const double ln2_lo = 1.90821492927058770002e-10;
    const double shifter = 6755399441055744.0;
    const double t = x * log2e + shifter;
    const int32_t ki = static_cast<int32_t>(std::bit_cast<uint64_t>(t) & 0xffffffffull);
    const double k = t - shifter;
    const double r = (x - k * ln2_hi) - k * ln2_lo;
    const double r2 = r * r;
    const double r4 = r2 * r2;
    const double p01 = 1.0 + r;
    const double p23 = 0.5 + r * (1.0 / 6.0);
    const double p45 = 1.0 / 24.0 + r * (1.0 / 120.0);
    const double p67 = 1.0 / 720.0 + r * (1.0 / 5040.0);
    const double p = (p01 + r2 * p23) + r4 * (p45 + r2 * p67);
    const uint64_t ebits = static_cast<uint64_t>(1023 + ki) << 52;
    return p * std::bit_cast<double>(ebits);
}

// sigmoid via the clamped core; saturation below 1e-13 is flushed exactly
template <class Real>
inline Real sigmoid_r(Real x) {
    double t = -static_cast<double>(x);
    t = t < -30.0 ? -30.0 : (t > 30.0 ? 30.0 : t);
    return static_cast<Real>(1.0 / (1.0 + fast_exp_unsafe(t)));
}

template <class Real>
inline Real exp_r(Real x) {
    if constexpr (sizeof(Real) == sizeof(float)) {
        return static_cast<Real>(fast_exp(static_cast<double>(x)));
    } else {
        return std::exp(x);
    }
}

// log for positive finite x, ~1e-14 relative: atanh-series on the mantissa.
inline double fast_log(double x) {
    int e = 0;
    double m = std::frexp(x, &e);  // m in [0.5, 1)
    if (m < 0.70710678118654752) {
        m *= 2.0;
        e -= 1;
    }
    double s = (m - 1.0) / (m + 1.0);
    double s2 = s * s;
    double p = s * (2.0 + s2 * (2.0 / 3.0 + s2 * (2.0 / 5.0 + s2 * (2.0 / 7.0 +
               s2 * (2.0 / 9.0 + s2 * (2.0 / 11.0 + s2 * (2.0 / 13.0)))))));
    return p + 0.6931471805599453 * e;
}

template <class Real>
inline double log_r(double x) {
    if constexpr (sizeof(Real) == sizeof(float)) {
        return fast_log(x);
    } else {
        return std::log(x);
    }
}

// ----------------------------- activations -----------------------------
enum class Act {
    Sigmoid,
    Relu,
    Silu,
    Identity,
    One,  // constant 1; used to freeze gates / disable learned weights
};

inline const char* act_name(Act a) {
    switch (a) {
        case Act::Sigmoid: return "sigmoid";
        case Act::Relu: return "relu";
        case Act::Silu: return "silu";
        case Act::Identity: return "identity";
        case Act::One: return "one";
    }
    return "?";
}

inline Act act_from_name(const std::string& s) {
    if (s == "sigmoid") return Act::Sigmoid;
    if (s == "relu") return Act::Relu;
    if (s == "silu") return Act::Silu;
    if (s == "identity") return Act::Identity;
    if (s == "one") return Act::One;
    fail("act_from_name", "unknown activation '" + s + "'");
}

}  // namespace otter
