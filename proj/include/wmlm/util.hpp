#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace wmlm {

// Bad user input: missing files, malformed data, invalid configuration.
// The CLI maps this to exit code 1; anything else escaping to main is 2.
struct user_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (diverged training,
// NaN gradients). Carries the offending tensor name when known.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Deterministic randomness. mt19937_64's output sequence is pinned by the
// standard; the distributions below are hand-rolled because the std
// distributions are implementation-defined and would break bit-reproducible
// checkpoints across compilers.
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

// Derives a stream-specific seed (epoch shuffles, per-kind substreams).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller.
inline double gaussian(Rng& rng) {
    double u1 = 0.0;
    do {
        u1 = uniform01(rng);
    } while (u1 <= 0.0);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
}

// Fisher-Yates with explicit modulo sampling (std::shuffle is
// implementation-defined).
template <class T>
void deterministic_shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(v[i - 1], v[j]);
    }
}

// Uniform integer in [0, n).
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
    return n == 0 ? 0 : rng() % n;
}

// ---------------------------------------------------------------------------
// FNV-1a 64-bit, used for tokenizer file hashes in checkpoints.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (const char c : bytes) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}

inline std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Number formatting/parsing. format_double emits the shortest string that
// round-trips, so encode/parse of constraint specs is exact.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, std::string_view what) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw user_error("not a number for " + std::string(what) + ": '" +
                         std::string(s) + "'");
    }
    return v;
}

inline long long parse_int(std::string_view s, std::string_view what) {
    long long v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw user_error("not an integer for " + std::string(what) + ": '" +
                         std::string(s) + "'");
    }
    return v;
}

// ---------------------------------------------------------------------------
// Small string helpers.
// ---------------------------------------------------------------------------

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' ||
                          s.front() == '\r')) {
        s.remove_prefix(1);
    }
    while (!s.empty() &&
           (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
        if (i == s.size() || s[i] == sep) {
            parts.push_back(s.substr(start, i - start));
            start = i + 1;
        }
    }
    return parts;
}

// Escapes bytes for single-line text output (token dumps).
inline std::string escape_bytes(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (const char c : s) {
        const auto u = static_cast<unsigned char>(c);
        switch (c) {
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case '\\': out += "\\\\"; break;
            default:
                if (u < 0x20 || u == 0x7F) {
                    static const char* digits = "0123456789abcdef";
                    out += "\\x";
                    out += digits[u >> 4];
                    out += digits[u & 0xF];
                } else {
                    out += c;
                }
        }
    }
    return out;
}

}  // namespace wmlm
