#pragma once

// Shared error types and small utilities used across the library.

#include <cstdint>
#include <cstring>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace liger {

// ----------------------------- error taxonomy -----------------------------
// All failures surface as exceptions rooted at liger::Error so callers can
// catch the whole family or a specific kind.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension disagreement between operands.
struct DimensionError : Error {
    using Error::Error;
};

// An index (token id, target class, item id) outside its valid range.
struct IndexError : Error {
    using Error::Error;
};

// Mathematically degenerate input (e.g. zero-norm vector for cosine).
struct DegenerateInputError : Error {
    using Error::Error;
};

// API contract violated (backward on non-scalar, missing tape, ...).
struct ContractError : Error {
    using Error::Error;
};

// Bad configuration values.
struct ConfigError : Error {
    using Error::Error;
};

// File ingestion problems; message names the offending record.
struct IngestionError : Error {
    using Error::Error;
};

// Metric undefined for the given references (e.g. NPG zero denominator).
struct UndefinedMetricError : Error {
    using Error::Error;
};

// ----------------------------- hashing -----------------------------

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = 1469598103934665603ull) {
    return fnv1a64(s.data(), s.size(), h);
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

// ----------------------------- numeric checks -----------------------------

inline bool all_finite(std::span<const double> xs) {
    for (double x : xs) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

}  // namespace liger
