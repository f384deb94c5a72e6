#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "dwpix/common.hpp"

namespace dwpix {

/// Dense polynomial in monomial basis: coeffs[k] * x^k.
struct Polynomial {
    std::vector<double> coeffs;

    double eval(double x) const {
        double acc = 0.0;
        for (size_t k = coeffs.size(); k-- > 0;) acc = acc * x + coeffs[k];
        return acc;
    }
    Polynomial derivative() const {
        Polynomial d;
        for (size_t k = 1; k < coeffs.size(); ++k)
            d.coeffs.push_back(coeffs[k] * static_cast<double>(k));
        if (d.coeffs.empty()) d.coeffs.push_back(0.0);
        return d;
    }
    int degree() const { return static_cast<int>(coeffs.size()) - 1; }
};

/// Ordinary least squares fit of a degree-`degree` polynomial.
///
/// The solve runs on a domain normalized to [-1, 1] (QR on the scaled
/// Vandermonde matrix) and the coefficients are expanded back to the
/// monomial basis in x, which keeps the fit well conditioned without
/// changing the reported basis.
inline Polynomial polyfit(const std::vector<double>& xs, const std::vector<double>& ys,
                          int degree, double* rmse_out = nullptr) {
    require(xs.size() == ys.size(), "polyfit: x/y size mismatch");
    require(degree >= 0, "polyfit: negative degree");
    const size_t n = xs.size();
    std::set<double> distinct(xs.begin(), xs.end());
    if (distinct.size() < static_cast<size_t>(degree) + 1) {
        std::string grid = "{";
        size_t i = 0;
        for (double x : distinct) {
            if (i++) grid += ", ";
            grid += std::to_string(x);
            if (i > 8) { grid += ", ..."; break; }
        }
        grid += "}";
        throw std::invalid_argument("polyfit: rank-deficient design matrix, need " +
                                    std::to_string(degree + 1) + " distinct x values but grid " +
                                    grid + " has " + std::to_string(distinct.size()));
    }

    double lo = *distinct.begin(), hi = *distinct.rbegin();
    const double mid = 0.5 * (lo + hi);
    const double half = (hi > lo) ? 0.5 * (hi - lo) : 1.0;

    Eigen::MatrixXd A(n, degree + 1);
    Eigen::VectorXd b(n);
    for (size_t i = 0; i < n; ++i) {
        const double t = (xs[i] - mid) / half;
        double p = 1.0;
        for (int k = 0; k <= degree; ++k) {
            A(static_cast<Eigen::Index>(i), k) = p;
            p *= t;
        }
        b(static_cast<Eigen::Index>(i)) = ys[i];
    }
    Eigen::VectorXd beta = A.colPivHouseholderQr().solve(b);

    // Expand sum_k beta_k ((x-mid)/half)^k into monomials of x.
    std::vector<double> mono(degree + 1, 0.0);
    std::vector<double> basis{1.0}; // coefficients of ((x-mid)/half)^k
    for (int k = 0; k <= degree; ++k) {
        for (size_t j = 0; j < basis.size(); ++j) mono[j] += beta(k) * basis[j];
        if (k < degree) {
            std::vector<double> next(basis.size() + 1, 0.0);
            for (size_t j = 0; j < basis.size(); ++j) {
                next[j] += basis[j] * (-mid / half);
                next[j + 1] += basis[j] / half;
            }
            basis = std::move(next);
        }
    }
    Polynomial poly{std::move(mono)};

    if (rmse_out) {
        double se = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double r = poly.eval(xs[i]) - ys[i];
            se += r * r;
        }
        *rmse_out = n ? std::sqrt(se / static_cast<double>(n)) : 0.0;
    }
    return poly;
}

} // namespace dwpix
