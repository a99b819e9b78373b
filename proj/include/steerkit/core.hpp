#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace steerkit {

/// Error categories map onto CLI exit codes (config 2, data 3, runtime 4).
enum class ErrorKind { Config, Data, Runtime };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

    const char* kind_name() const noexcept {
        switch (kind_) {
        case ErrorKind::Config: return "config";
        case ErrorKind::Data: return "data";
        case ErrorKind::Runtime: return "runtime";
        }
        return "runtime";
    }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

// splitmix64 finalizer; used to derive independent seeds from one global seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t global, std::uint64_t stage) {
    return mix_seed(global ^ (stage * 0x9E3779B97F4A7C15ULL));
}

/// Seeded generator whose draws are identical across standard libraries.
/// std::*_distribution output is implementation-defined, so the two draws
/// used everywhere are implemented directly on top of mt19937_64.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n), rejection sampled.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller (the spare value is cached).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <typename T>
bool all_finite(std::span<const T> v) {
    for (const T x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

template <typename A, typename B>
double dot(std::span<const A> a, std::span<const B> b) {
    if (a.size() != b.size()) fail(ErrorKind::Runtime, "dot: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

template <typename T>
double norm(std::span<const T> a) {
    return std::sqrt(dot(a, a));
}

/// Cosine similarity; throws on a zero-norm argument.
template <typename A, typename B>
double cosine(std::span<const A> a, std::span<const B> b) {
    const double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) fail(ErrorKind::Runtime, "cosine similarity of a zero-norm vector");
    return dot(a, b) / (na * nb);
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    return cosine(std::span<const double>(a), std::span<const double>(b));
}

/// 64-bit FNV-1a, used for artifact fingerprints.
inline std::uint64_t fnv1a(std::span<const char> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace steerkit
