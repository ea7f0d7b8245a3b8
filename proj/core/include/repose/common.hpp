#pragma once

// Shared error types, shape helpers, and small utilities used across the
// library. Everything numeric in this project is deterministic: no
// fast-math, no unordered reductions, no hidden global state.

#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace repose {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched or invalid tensor shapes / axes.
struct ShapeError : Error { using Error::Error; };
// Bad configuration values (schedules, model dims, CLI/config files).
struct ConfigError : Error { using Error::Error; };
// Filesystem / serialization problems.
struct IoError : Error { using Error::Error; };
// NaN/Inf or other numeric blowups. Never silently propagated.
struct NumericError : Error { using Error::Error; };
// API misuse: backward twice, capture without bank, etc.
struct StateError : Error { using Error::Error; };
// Serialized file carries an unsupported format version.
struct VersionError : Error { using Error::Error; };
// Stored digest does not match content (corruption or truncation).
struct IntegrityError : Error { using Error::Error; };

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

template <class E>
inline void require_t(bool cond, const std::string& msg) {
    if (!cond) throw E(msg);
}

// True if v is NaN or +-Inf. Written so it also works under weird FP modes.
template <class T>
inline bool not_finite(T v) {
    return !(v >= std::numeric_limits<T>::lowest() && v <= std::numeric_limits<T>::max());
}

// Shortest decimal text that parses back to exactly v. Used wherever floats
// enter a text format that must be byte-stable and lossless (config echoes,
// metric reports).
std::string fmt_shortest(double v);

}  // namespace repose
