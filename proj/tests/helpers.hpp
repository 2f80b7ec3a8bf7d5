#pragma once

#include "dblocks/ops.hpp"
#include "dblocks/parameter.hpp"

#include <cmath>
#include <functional>
#include <random>

namespace testing {

using namespace dblocks;

inline Matrix uniform_matrix(Index r, Index c, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

// Independent central-difference gradient of a scalar function of one matrix.
inline Matrix numeric_grad(const std::function<double(const Matrix&)>& f, Matrix x, double h = 1e-5) {
    Matrix g(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) {
        const double keep = x.data()[i];
        x.data()[i] = keep + h;
        const double up = f(x);
        x.data()[i] = keep - h;
        const double down = f(x);
        x.data()[i] = keep;
        g.data()[i] = (up - down) / (2.0 * h);
    }
    return g;
}

inline double max_rel_error(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    for (Index i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a.data()[i]), std::abs(b.data()[i]), 1e-8});
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]) / denom);
    }
    return worst;
}

// Adaptive Simpson on [a, b].
inline double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol = 1e-12,
                               int depth = 40) {
    const auto simpson = [&](double lo, double hi, double flo, double fmid, double fhi) {
        return (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi);
    };
    const std::function<double(double, double, double, double, double, double, double, int)> rec =
        [&](double lo, double hi, double flo, double fmid, double fhi, double whole, double eps, int d) {
            const double mid = 0.5 * (lo + hi);
            const double lm = 0.5 * (lo + mid), rm = 0.5 * (mid + hi);
            const double flm = f(lm), frm = f(rm);
            const double left = simpson(lo, mid, flo, flm, fmid);
            const double right = simpson(mid, hi, fmid, frm, fhi);
            if (d <= 0 || std::abs(left + right - whole) <= 15.0 * eps) {
                return left + right + (left + right - whole) / 15.0;
            }
            return rec(lo, mid, flo, flm, fmid, left, eps / 2.0, d - 1) +
                   rec(mid, hi, fmid, frm, fhi, right, eps / 2.0, d - 1);
        };
    const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
    return rec(a, b, fa, fm, fb, simpson(a, b, fa, fm, fb), tol, depth);
}

}  // namespace testing
