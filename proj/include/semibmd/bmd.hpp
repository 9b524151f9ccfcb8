#pragma once
// Benchmark dose estimation: U_n(x) = (f(x0) - f(x)) / sigma - c(p0, p+),
// solved on (x0, xmax) by a reflective Newton iteration.

#include <optional>

#include "semibmd/model.hpp"
#include "semibmd/splines.hpp"

namespace semibmd {

struct BmdConfig {
    double x0 = 0.0;
    std::optional<double> xmax;  // defaults to the upper end of the exposure knots
    double p0 = 0.025;
    double p_plus = 0.01;
    double tol = 1e-8;
    int max_iter = 50;

    void validate() const;
};

// Decreasing dose-response curve f(x) = spline(x) - offset with residual sd.
// The offset is a reporting convenience and cancels from every BMD quantity.
struct DoseCurve {
    Spline spline;
    double sigma = 1.0;
    double offset = 0.0;

    double operator()(double x) const { return spline(x) - offset; }
};

DoseCurve dose_curve(const FittedModel& model);

struct BmdEstimate {
    double xb_hat = 0.0;
    int iterations = 0;
    double u_prime_at_root = 0.0;
    double existence_margin = 0.0;
    bool used_bisection = false;
};

// Phi^{-1}(p0 + p+) - Phi^{-1}(p0)
double c_const(double p0, double p_plus);

double u_n(double x, const DoseCurve& curve, const BmdConfig& cfg);
double u_n_derivative(double x, const DoseCurve& curve);

double resolve_xmax(const DoseCurve& curve, const BmdConfig& cfg);

// U_n(xmax); a positive margin guarantees a root in (x0, xmax).
double existence_check(const DoseCurve& curve, const BmdConfig& cfg);

// Folds x into [l, u] by reflection at the bounds.
double reflect(double x, double l, double u);

// Throws BmdNotEstimable when the existence margin is not positive.
BmdEstimate estimate_bmd(const DoseCurve& curve, const BmdConfig& cfg);

inline double existence_check(const FittedModel& m, const BmdConfig& cfg) { return existence_check(dose_curve(m), cfg); }
inline BmdEstimate estimate_bmd(const FittedModel& m, const BmdConfig& cfg) { return estimate_bmd(dose_curve(m), cfg); }

// Precomputed state for repeated solves on curves sharing knots (bootstrap).
class BmdSolver {
public:
    BmdSolver(const KnotVector& knots, const BmdConfig& cfg);

    // Root of U_n for weights beta_c; nullopt when U_n(xmax) <= 0.
    std::optional<BmdEstimate> solve(const Eigen::VectorXd& beta_c, double sigma) const;

    double c() const { return c_; }
    double xmax() const { return xmax_; }

private:
    KnotVector knots_;
    KnotVector deriv_knots_;
    BmdConfig cfg_;
    double c_;
    double xmax_;
};

}  // namespace semibmd
