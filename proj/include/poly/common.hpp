#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace poly {

enum class ErrorCode {
    decode_error,
    bad_magic,
    unsupported_version,
    truncated,
    non_finite,
    dimension_mismatch,
    duplicate_id,
    malformed_json,
    missing_record,
    insufficient_data,
    degenerate_input,
    invalid_argument,
    config_error,
    io_error,
};

/// Library-wide exception; every failure carries a stable code plus context.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

std::string_view error_code_name(ErrorCode code);

/// Deterministic, platform-independent random stream (splitmix64 core).
/// Used everywhere instead of <random> distributions so that seeded runs
/// produce byte-identical artifacts regardless of standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1).
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, n); n must be positive.
    std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

    /// Standard normal via Box-Muller.
    double normal() {
        double u1 = 1.0 - uniform01();
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

/// Derives a stream seed from a base seed and salt values; sub-components
/// get independent deterministic streams without sharing state.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt_a, std::uint64_t salt_b = 0);

/// FNV-1a 64-bit over a byte buffer; the pipeline manifest hash.
std::uint64_t fnv1a64(const void* data, std::size_t size);

bool is_valid_utf8(std::string_view bytes);

std::string ascii_lower(std::string_view s);

/// Runs fn(i) for i in [0, count) on up to `threads` workers. Results must be
/// written to per-index slots; the split is by contiguous blocks and the
/// output is independent of the worker count.
template <typename Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
    if (threads <= 1 || count < 2) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    unsigned workers = std::min<unsigned>(threads, static_cast<unsigned>(count));
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::size_t chunk = (count + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
        std::size_t begin = static_cast<std::size_t>(w) * chunk;
        std::size_t end = std::min(count, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([begin, end, &fn] {
            for (std::size_t i = begin; i < end; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace poly
