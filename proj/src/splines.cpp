#include "semibmd/splines.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include "semibmd/errors.hpp"

namespace semibmd {

namespace {

[[noreturn]] void out_of_support(double x, const KnotVector& kv) {
    std::ostringstream msg;
    msg << "x = " << x << " outside spline support [" << kv.lower() << ", " << kv.upper() << "]";
    throw Error(ErrorKind::OutOfSupport, msg.str());
}

// Nonzero order-q basis values at x on span k (Piegl & Tiller A2.2), written to
// out[0..q-1] for functions k-q+1 .. k.
void local_basis(double x, std::span<const double> t, int k, int q, double* out) {
    std::array<double, kMaxSplineOrder> left{};
    std::array<double, kMaxSplineOrder> right{};
    out[0] = 1.0;
    for (int j = 1; j < q; ++j) {
        left[j] = x - t[k + 1 - j];
        right[j] = t[k + j] - x;
        double saved = 0.0;
        for (int r = 0; r < j; ++r) {
            const double temp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

double safe_ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

}  // namespace

KnotVector::KnotVector(std::vector<double> knots, int order)
    : knots_(std::move(knots)), order_(order) {
    if (order_ < 1 || order_ > kMaxSplineOrder) {
        throw Error(ErrorKind::UnsupportedOrder, "spline order must be in [1, " +
                                                     std::to_string(kMaxSplineOrder) + "]");
    }
    basis_count_ = static_cast<int>(knots_.size()) - order_;
    if (basis_count_ < order_) {
        throw Error(ErrorKind::InvalidArgument, "knot vector needs at least 2*order knots");
    }
    for (std::size_t i = 0; i < knots_.size(); ++i) {
        if (!std::isfinite(knots_[i])) throw Error(ErrorKind::InvalidArgument, "non-finite knot");
        if (i > 0 && knots_[i] < knots_[i - 1]) {
            throw Error(ErrorKind::InvalidArgument, "knots must be nondecreasing");
        }
    }
    if (!(lower() < upper())) {
        throw Error(ErrorKind::DegenerateKnots, "knot vector has zero-width support");
    }
}

int KnotVector::find_span(double x) const {
    if (!(x >= lower() && x <= upper())) out_of_support(x, *this);
    const auto first = knots_.begin() + (order_ - 1);
    const auto last = knots_.begin() + (basis_count_ + 1);
    int k = static_cast<int>(std::upper_bound(first, last, x) - knots_.begin()) - 1;
    if (k >= basis_count_) {
        k = basis_count_ - 1;
        while (knot(k) == knot(k + 1)) --k;
    }
    return k;
}

KnotVector KnotVector::derivative_view() const {
    if (order_ < 2) throw Error(ErrorKind::NoDerivative, "order-1 splines have no derivative");
    return KnotVector(std::vector<double>(knots_.begin() + 1, knots_.end() - 1), order_ - 1);
}

Eigen::VectorXd KnotVector::greville() const {
    Eigen::VectorXd g(basis_count_);
    for (int l = 0; l < basis_count_; ++l) {
        if (order_ == 1) {
            g[l] = 0.5 * (knot(l) + knot(l + 1));
            continue;
        }
        double sum = 0.0;
        for (int j = 1; j < order_; ++j) sum += knot(l + j);
        g[l] = sum / (order_ - 1);
    }
    return g;
}

Spline::Spline(KnotVector knots, Eigen::VectorXd weights)
    : knots_(std::move(knots)), weights_(std::move(weights)) {
    if (weights_.size() != knots_.basis_count()) {
        throw Error(ErrorKind::InvalidArgument, "spline weights length does not match basis count");
    }
}

double Spline::operator()(double x) const { return de_boor(x, weights_, knots_); }

KnotVector make_uniform_knots(double lower, double upper, int basis_count, int order) {
    if (order < 1 || basis_count < order) {
        throw Error(ErrorKind::InvalidArgument, "make_uniform_knots: need basis_count >= order >= 1");
    }
    if (order > kMaxSplineOrder) throw Error(ErrorKind::UnsupportedOrder, "make_uniform_knots: order too large");
    if (!std::isfinite(lower) || !std::isfinite(upper) || !(lower < upper)) {
        throw Error(ErrorKind::DegenerateKnots, "make_uniform_knots: zero-width support");
    }
    const int spans = basis_count - order + 1;
    const double h = (upper - lower) / spans;
    std::vector<double> knots(static_cast<std::size_t>(basis_count + order));
    for (int i = 0; i < basis_count + order; ++i) knots[static_cast<std::size_t>(i)] = lower + (i - (order - 1)) * h;
    // Pin the ends of the evaluation interval exactly.
    knots[static_cast<std::size_t>(order - 1)] = lower;
    knots[static_cast<std::size_t>(basis_count)] = upper;
    return KnotVector(std::move(knots), order);
}

KnotVector make_knots(std::span<const double> points, int basis_count, int order) {
    if (points.empty()) throw Error(ErrorKind::InvalidArgument, "make_knots: no sample points");
    const auto [lo, hi] = std::minmax_element(points.begin(), points.end());
    return make_knots(points, basis_count, order, *lo, *hi);
}

KnotVector make_knots(std::span<const double> points, int basis_count, int order, double lower,
                      double upper) {
    if (points.empty()) throw Error(ErrorKind::InvalidArgument, "make_knots: no sample points");
    if (order < 1 || basis_count < order) {
        throw Error(ErrorKind::InvalidArgument, "make_knots: need basis_count >= order >= 1");
    }
    if (order > kMaxSplineOrder) throw Error(ErrorKind::UnsupportedOrder, "make_knots: order too large");
    std::vector<double> sorted(points.begin(), points.end());
    for (double v : sorted) {
        if (!std::isfinite(v)) throw Error(ErrorKind::InvalidArgument, "make_knots: non-finite point");
    }
    std::sort(sorted.begin(), sorted.end());
    if (!(lower < upper)) throw Error(ErrorKind::DegenerateKnots, "make_knots: zero-width support");
    if (sorted.front() < lower || sorted.back() > upper) {
        throw Error(ErrorKind::InvalidArgument, "make_knots: points outside boundary knots");
    }
    const int interior = basis_count - order;
    const auto distinct = std::unique(sorted.begin(), sorted.end()) - sorted.begin();
    if (distinct < interior) {
        throw Error(ErrorKind::DegenerateKnots,
                    "make_knots: " + std::to_string(distinct) + " distinct points for " +
                        std::to_string(interior) + " interior knots");
    }
    // Quantiles are taken over the full sample, ties included.
    sorted.assign(points.begin(), points.end());
    std::sort(sorted.begin(), sorted.end());

    std::vector<double> knots;
    knots.reserve(static_cast<std::size_t>(basis_count + order));
    knots.insert(knots.end(), static_cast<std::size_t>(order), lower);
    const double n1 = static_cast<double>(sorted.size() - 1);
    for (int k = 1; k <= interior; ++k) {
        const double h = n1 * k / (interior + 1);
        const auto i = static_cast<std::size_t>(std::floor(h));
        const double frac = h - static_cast<double>(i);
        const double q = i + 1 < sorted.size() ? sorted[i] + frac * (sorted[i + 1] - sorted[i]) : sorted[i];
        knots.push_back(q);
    }
    knots.insert(knots.end(), static_cast<std::size_t>(order), upper);
    return KnotVector(std::move(knots), order);
}

Eigen::VectorXd eval_basis(double x, const KnotVector& kv) {
    const int p = kv.order();
    const int k = kv.find_span(x);
    std::array<double, kMaxSplineOrder> local{};
    local_basis(x, kv.knots(), k, p, local.data());
    Eigen::VectorXd out = Eigen::VectorXd::Zero(kv.basis_count());
    for (int j = 0; j < p; ++j) out[k - p + 1 + j] = local[j];
    return out;
}

Eigen::VectorXd basis_derivative(double x, const KnotVector& kv, int nderiv) {
    const int p = kv.order();
    if (nderiv < 0) throw Error(ErrorKind::InvalidArgument, "negative derivative order");
    if (nderiv == 0) return eval_basis(x, kv);
    const int L = kv.basis_count();
    if (nderiv >= p) return Eigen::VectorXd::Zero(L);

    const auto t = kv.knots();
    const int k = kv.find_span(x);
    // Order-q functions on the same knots, q = p - nderiv; there are L + nderiv of them.
    const int q = p - nderiv;
    std::array<double, kMaxSplineOrder> local{};
    local_basis(x, t, k, q, local.data());
    Eigen::VectorXd vals = Eigen::VectorXd::Zero(L + nderiv);
    for (int j = 0; j < q; ++j) vals[k - q + 1 + j] = local[j];

    for (int ord = q + 1; ord <= p; ++ord) {
        Eigen::VectorXd next(vals.size() - 1);
        for (Eigen::Index l = 0; l < next.size(); ++l) {
            next[l] = (ord - 1) * (safe_ratio(vals[l], t[l + ord - 1] - t[l]) -
                                   safe_ratio(vals[l + 1], t[l + ord] - t[l + 1]));
        }
        vals = std::move(next);
    }
    return vals;
}

double de_boor(double x, std::span<const double> coeffs, const KnotVector& kv) {
    if (static_cast<int>(coeffs.size()) != kv.basis_count()) {
        throw Error(ErrorKind::InvalidArgument, "de_boor: coefficient length mismatch");
    }
    const int d = kv.order() - 1;
    const int k = kv.find_span(x);
    const auto t = kv.knots();
    std::array<double, kMaxSplineOrder> work{};
    for (int j = 0; j <= d; ++j) work[j] = coeffs[j + k - d];
    for (int r = 1; r <= d; ++r) {
        for (int j = d; j >= r; --j) {
            const double lo = t[j + k - d];
            const double a = (x - lo) / (t[j + 1 + k - r] - lo);
            work[j] = (1.0 - a) * work[j - 1] + a * work[j];
        }
    }
    return work[d];
}

double de_boor(double x, const Eigen::VectorXd& coeffs, const KnotVector& kv) {
    return de_boor(x, std::span<const double>(coeffs.data(), static_cast<std::size_t>(coeffs.size())), kv);
}

Spline derivative_coeffs(const Eigen::VectorXd& coeffs, const KnotVector& kv) {
    const int p = kv.order();
    if (p < 2) throw Error(ErrorKind::NoDerivative, "order-1 splines have no derivative");
    const int L = kv.basis_count();
    if (coeffs.size() != L) throw Error(ErrorKind::InvalidArgument, "derivative_coeffs: length mismatch");
    Eigen::VectorXd d(L - 1);
    for (int l = 1; l < L; ++l) {
        const double span = kv.knot(l + p - 1) - kv.knot(l);
        d[l - 1] = span > 0.0 ? (p - 1) * (coeffs[l] - coeffs[l - 1]) / span : 0.0;
    }
    return Spline(kv.derivative_view(), std::move(d));
}

Eigen::MatrixXd penalty_root(const KnotVector& kv) {
    if (kv.order() != 4) throw Error(ErrorKind::UnsupportedOrder, "penalty_root supports cubic splines only");
    const int L = kv.basis_count();
    std::vector<Eigen::VectorXd> rows;
    // Second derivatives are linear on each span, so 2-point Gauss-Legendre is exact.
    const double g = 1.0 / std::sqrt(3.0);
    for (int k = kv.order() - 1; k < L; ++k) {
        const double a = kv.knot(k);
        const double b = kv.knot(k + 1);
        if (!(b > a)) continue;
        const double mid = 0.5 * (a + b);
        const double half = 0.5 * (b - a);
        for (double node : {mid - half * g, mid + half * g}) {
            rows.push_back(std::sqrt(half) * basis_derivative(node, kv, 2));
        }
    }
    Eigen::MatrixXd R(static_cast<Eigen::Index>(rows.size()), L);
    for (std::size_t i = 0; i < rows.size(); ++i) R.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    return R;
}

Eigen::MatrixXd penalty_matrix(const KnotVector& kv) {
    if (kv.order() != 4) throw Error(ErrorKind::UnsupportedOrder, "penalty_matrix supports cubic splines only");
    const Eigen::MatrixXd R = penalty_root(kv);
    const Eigen::MatrixXd S = R.transpose() * R;
    return 0.5 * (S + S.transpose());
}

Eigen::MatrixXd basis_matrix(std::span<const double> xs, const KnotVector& kv) {
    Eigen::MatrixXd B(static_cast<Eigen::Index>(xs.size()), kv.basis_count());
    for (std::size_t i = 0; i < xs.size(); ++i) B.row(static_cast<Eigen::Index>(i)) = eval_basis(xs[i], kv).transpose();
    return B;
}

}  // namespace semibmd
