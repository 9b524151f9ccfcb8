#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "semibmd/bmd.hpp"

namespace semibmd::detail {

struct RootResult {
    double x = 0.0;
    double slope = 0.0;
    int iterations = 0;
    bool used_bisection = false;
};

// Reflective Newton for an increasing u with u(lo) < 0 < u(hi); iterates are
// folded back into [lo, hi]. After max_iter Newton steps without |u| <= tol
// the bracket is bisected down to a relative width of a few ulps. eval(x) returns {u(x), u'(x)}.
template <typename Eval>
RootResult increasing_root(Eval&& eval, double lo, double hi, double tol, int max_iter) {
    RootResult r;
    double x = 0.5 * (lo + hi);
    for (int t = 0; t < max_iter; ++t) {
        const auto [u, up] = eval(x);
        r.iterations = t + 1;
        if (std::abs(u) <= tol) {
            r.x = x;
            r.slope = up;
            return r;
        }
        const double next = x - u / up;
        if (!std::isfinite(next)) break;
        x = reflect(next, lo, hi);
    }
    r.used_bisection = true;
    double a = lo;
    double b = hi;
    for (int t = 0; t < 1100; ++t) {  // enough to reach any positive double
        const double mid = 0.5 * (a + b);
        const auto [u, up] = eval(mid);
        ++r.iterations;
        r.x = mid;
        r.slope = up;
        if (std::abs(u) <= tol || b - a <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(a), std::abs(b))) {
            return r;
        }
        (u < 0.0 ? a : b) = mid;
    }
    return r;
}

}  // namespace semibmd::detail
