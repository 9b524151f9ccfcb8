#include "semibmd/bmd.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include <boost/math/distributions/normal.hpp>

#include "semibmd/errors.hpp"
#include "root_finding.hpp"

namespace semibmd {

void BmdConfig::validate() const {
    if (!(p0 > 0.0 && p0 < 1.0)) throw Error(ErrorKind::InvalidArgument, "p0 must lie in (0, 1)");
    if (!(p_plus > 0.0 && p_plus < 1.0 - p0)) throw Error(ErrorKind::InvalidArgument, "p_plus must lie in (0, 1 - p0)");
    if (xmax && !(x0 < *xmax)) throw Error(ErrorKind::InvalidArgument, "x0 must be smaller than xmax");
    if (!(tol > 0.0)) throw Error(ErrorKind::InvalidArgument, "tol must be positive");
    if (max_iter < 1) throw Error(ErrorKind::InvalidArgument, "max_iter must be at least 1");
}

DoseCurve dose_curve(const FittedModel& model) {
    return DoseCurve{model.exposure_spline(), model.sigma_hat, model.exposure_center};
}

double c_const(double p0, double p_plus) {
    if (!(p0 > 0.0 && p0 < 1.0) || !(p_plus > 0.0 && p_plus < 1.0 - p0)) {
        throw Error(ErrorKind::InvalidArgument, "c_const: need 0 < p0 < 1 and 0 < p_plus < 1 - p0");
    }
    const boost::math::normal_distribution<double> normal;
    return boost::math::quantile(normal, p0 + p_plus) - boost::math::quantile(normal, p0);
}

double u_n(double x, const DoseCurve& curve, const BmdConfig& cfg) {
    return (curve.spline(cfg.x0) - curve.spline(x)) / curve.sigma - c_const(cfg.p0, cfg.p_plus);
}

double u_n_derivative(double x, const DoseCurve& curve) {
    const Spline d = derivative_coeffs(curve.spline);
    return -d(x) / curve.sigma;
}

double resolve_xmax(const DoseCurve& curve, const BmdConfig& cfg) {
    const double xmax = cfg.xmax.value_or(curve.spline.knots().upper());
    if (!curve.spline.knots().contains(xmax)) {
        throw Error(ErrorKind::OutOfSupport, "xmax lies outside the exposure knot range");
    }
    if (!curve.spline.knots().contains(cfg.x0)) {
        throw Error(ErrorKind::OutOfSupport, "x0 lies outside the exposure knot range");
    }
    return xmax;
}

double existence_check(const DoseCurve& curve, const BmdConfig& cfg) {
    return u_n(resolve_xmax(curve, cfg), curve, cfg);
}

double reflect(double x, double l, double u) {
    const double period = 2.0 * (u - l);
    const double w = std::fmod(std::abs(x - l), period);
    return std::min(w, period - w) + l;
}

BmdSolver::BmdSolver(const KnotVector& knots, const BmdConfig& cfg)
    : knots_(knots), deriv_knots_(knots.derivative_view()), cfg_(cfg), c_(c_const(cfg.p0, cfg.p_plus)), xmax_(0.0) {
    cfg_.validate();
    xmax_ = cfg.xmax.value_or(knots_.upper());
    if (!knots_.contains(xmax_) || !knots_.contains(cfg.x0)) {
        throw Error(ErrorKind::OutOfSupport, "x0 and xmax must lie inside the exposure knot range");
    }
    if (!(cfg.x0 < xmax_)) throw Error(ErrorKind::InvalidArgument, "x0 must be smaller than xmax");
}

std::optional<BmdEstimate> BmdSolver::solve(const Eigen::VectorXd& beta_c, double sigma) const {
    const int p = knots_.order();
    const int L = knots_.basis_count();
    Eigen::VectorXd dcoef(L - 1);
    for (int i = 1; i < L; ++i) {
        const double span = knots_.knot(i + p - 1) - knots_.knot(i);
        dcoef[i - 1] = span > 0.0 ? (p - 1) * (beta_c[i] - beta_c[i - 1]) / span : 0.0;
    }
    const double f0 = de_boor(cfg_.x0, beta_c, knots_);
    BmdEstimate est;
    est.existence_margin = (f0 - de_boor(xmax_, beta_c, knots_)) / sigma - c_;
    if (!(est.existence_margin > 0.0)) return std::nullopt;

    auto eval = [&](double x) {
        const double f = de_boor(x, beta_c, knots_);
        const double fp = de_boor(x, dcoef, deriv_knots_);
        return std::pair{(f0 - f) / sigma - c_, -fp / sigma};
    };
    const detail::RootResult r = detail::increasing_root(eval, cfg_.x0, xmax_, cfg_.tol, cfg_.max_iter);
    est.xb_hat = r.x;
    est.iterations = r.iterations;
    est.u_prime_at_root = r.slope;
    est.used_bisection = r.used_bisection;
    return est;
}

BmdEstimate estimate_bmd(const DoseCurve& curve, const BmdConfig& cfg) {
    cfg.validate();
    const BmdSolver solver(curve.spline.knots(), cfg);
    auto est = solver.solve(curve.spline.weights(), curve.sigma);
    if (!est) {
        std::ostringstream msg;
        msg << "benchmark dose not estimable: U_n(xmax) = " << existence_check(curve, cfg)
            << " <= 0; decrease p_plus (currently " << cfg.p_plus << ")";
        throw Error(ErrorKind::BmdNotEstimable, msg.str());
    }
    return *est;
}

}  // namespace semibmd
