#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace dwpix {

/// Error caused by bad user input (CLI flags, config files, malformed data).
/// The CLI maps this (and std::invalid_argument) to exit code 1; anything
/// else is treated as an internal invariant violation (exit code 2).
class UserError : public std::runtime_error {
public:
    explicit UserError(const std::string& msg) : std::runtime_error(msg) {}
};

inline double clamp(double v, double lo, double hi) {
    return std::min(std::max(v, lo), hi);
}

inline double clamp01(double v) { return clamp(v, 0.0, 1.0); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline void require_user(bool cond, const std::string& msg) {
    if (!cond) throw UserError(msg);
}

inline bool nearly_equal(double a, double b, double rel_tol, double abs_tol = 0.0) {
    const double diff = std::fabs(a - b);
    return diff <= abs_tol || diff <= rel_tol * std::max(std::fabs(a), std::fabs(b));
}

} // namespace dwpix
