// Copyright (c) 2026 dggf authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared plumbing: error types, deterministic RNG, digests, timers, CSV.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dggf {

using Vec = std::vector<double>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct SingularityError : Error {
    explicit SingularityError(const std::string& msg) : Error(msg) {}
};

struct TrainingError : Error {
    int epoch;
    TrainingError(const std::string& msg, int epoch_index)
        : Error(msg + " (epoch " + std::to_string(epoch_index) + ")"), epoch(epoch_index) {}
};

struct UnsupportedPrimitiveError : Error {
    explicit UnsupportedPrimitiveError(const std::string& prim)
        : Error("unsupported primitive in loss graph: " + prim) {}
};

// Model-file errors are distinct categories so callers can tell apart a
// corrupt header, an unsupported version, and a short read.
struct BadMagicError : Error {
    explicit BadMagicError(const std::string& msg) : Error(msg) {}
};

struct BadVersionError : Error {
    explicit BadVersionError(const std::string& msg) : Error(msg) {}
};

struct TruncatedFileError : Error {
    explicit TruncatedFileError(const std::string& msg) : Error(msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// mt19937_64 with hand-rolled output mappings. The standard distributions are
// implementation-defined, so uniform/normal are derived from raw bits here to
// keep streams bit-stable across toolchains.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : s_(splitmix(seed)) {}

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next();
        while (x >= limit) x = next();
        return x % n;
    }

    // Box-Muller; consumes two uniforms per pair, caches the second.
    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_cached_) {
            have_cached_ = false;
            return mean + stddev * cached_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double rad = std::sqrt(-2.0 * std::log(u1));
        const double ang = 6.283185307179586476925286766559 * u2;
        cached_ = rad * std::sin(ang);
        have_cached_ = true;
        return mean + stddev * rad * std::cos(ang);
    }

    // Derives a seed for an independent child stream (per-epoch samplers etc.)
    // without disturbing this stream's state.
    std::uint64_t derive(std::uint64_t tag) const {
        std::uint64_t x = s_ ^ (0x9e3779b97f4a7c15ULL * (tag + 1));
        return splitmix_once(x);
    }

    std::uint64_t next() { return state_advance(); }

private:
    std::uint64_t s_;
    bool have_cached_ = false;
    double cached_ = 0.0;
    std::uint64_t mt_[312];
    int mti_ = 313;  // 313 = engine not yet seeded

    static std::uint64_t splitmix_once(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    static std::uint64_t splitmix(std::uint64_t x) { return splitmix_once(x); }

    void seed_engine() {
        mt_[0] = s_;
        for (int i = 1; i < 312; ++i)
            mt_[i] = 6364136223846793005ULL * (mt_[i - 1] ^ (mt_[i - 1] >> 62)) + static_cast<std::uint64_t>(i);
        mti_ = 312;
    }

    std::uint64_t state_advance() {
        if (mti_ >= 312) {
            if (mti_ == 313) seed_engine();
            for (int i = 0; i < 312; ++i) {
                const std::uint64_t x = (mt_[i] & 0xFFFFFFFF80000000ULL) | (mt_[(i + 1) % 312] & 0x7FFFFFFFULL);
                std::uint64_t y = x >> 1;
                if (x & 1ULL) y ^= 0xB5026F5AA96619E9ULL;
                mt_[i] = mt_[(i + 156) % 312] ^ y;
            }
            mti_ = 0;
        }
        std::uint64_t x = mt_[mti_++];
        x ^= (x >> 29) & 0x5555555555555555ULL;
        x ^= (x << 17) & 0x71D67FFFEDA60000ULL;
        x ^= (x << 37) & 0xFFF7EEE000000000ULL;
        x ^= x >> 43;
        return x;
    }
};

// ---------------------------------------------------------------------------
// Digest / timing / misc
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

inline std::string digest_of(const Vec& v) {
    return hex64(fnv1a64(v.data(), v.size() * sizeof(double)));
}

class Timer {
public:
    Timer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

inline int worker_count() {
    if (const char* env = std::getenv("DGGF_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

// Runs fn(block) for block = 0..n_blocks-1. Blocks are distributed over
// workers but the block decomposition itself is fixed, so any reduction that
// combines per-block results in block order is independent of thread count.
inline void run_blocks(int n_blocks, const std::function<void(int)>& fn) {
    const int workers = std::min(worker_count(), n_blocks);
    if (workers <= 1) {
        for (int b = 0; b < n_blocks; ++b) fn(b);
        return;
    }
    std::atomic<int> cursor{0};
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        threads.emplace_back([&] {
            for (int b = cursor.fetch_add(1); b < n_blocks; b = cursor.fetch_add(1)) fn(b);
        });
    }
    for (auto& t : threads) t.join();
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header) : out_(path) {
        if (!out_) throw Error("cannot open for writing: " + path);
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (i) out_ << ',';
            out_ << header[i];
        }
        out_ << '\n';
        columns_ = header.size();
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != columns_) throw Error("csv row width mismatch");
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
    }

private:
    std::ofstream out_;
    std::size_t columns_ = 0;
};

inline std::string fmt_g(double v, int prec = 17) {
    std::ostringstream ss;
    ss.precision(prec);
    ss << v;
    return ss.str();
}

}  // namespace dggf
