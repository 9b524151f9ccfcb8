#pragma once
// B-spline bases, de Boor evaluation and curvature penalties.
//
// Knots are stored 0-based: t[0..L+p-1] for L basis functions of order p
// (degree p-1). The evaluation interval is [t[p-1], t[L]]: the full knot
// range for the clamped vectors of make_knots, the inner part for the
// extended vectors of make_uniform_knots.

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace semibmd {

inline constexpr int kMaxSplineOrder = 10;

class KnotVector {
public:
    KnotVector(std::vector<double> knots, int order);

    int order() const noexcept { return order_; }
    int basis_count() const noexcept { return basis_count_; }
    std::span<const double> knots() const noexcept { return knots_; }
    double knot(int i) const { return knots_[static_cast<std::size_t>(i)]; }

    double lower() const { return knot(order_ - 1); }
    double upper() const { return knot(basis_count_); }
    bool contains(double x) const { return x >= lower() && x <= upper(); }

    // Index k with t[k] <= x < t[k+1] and t[k] < t[k+1]; the right end of the
    // interval belongs to the last non-empty span. Throws OutOfSupport.
    int find_span(double x) const;

    // Same knots viewed as order-(p-1) with the outermost knot dropped at each end.
    KnotVector derivative_view() const;

    // Greville abscissae: coefficient-space images of the identity function.
    Eigen::VectorXd greville() const;

    bool operator==(const KnotVector&) const = default;

private:
    std::vector<double> knots_;
    int order_;
    int basis_count_;
};

// Spline curve f(x) = sum_l b_{l,p}(x) weights_l.
class Spline {
public:
    Spline(KnotVector knots, Eigen::VectorXd weights);

    const KnotVector& knots() const noexcept { return knots_; }
    const Eigen::VectorXd& weights() const noexcept { return weights_; }

    double operator()(double x) const;

private:
    KnotVector knots_;
    Eigen::VectorXd weights_;
};

// Clamped knots: boundary values repeated `order` times, L - p interior knots at
// evenly spaced quantiles of `points`.
KnotVector make_knots(std::span<const double> points, int basis_count, int order);

// As above but with explicit boundary values; interior knots still come from the
// quantiles of `points`, which must lie inside [lower, upper].
KnotVector make_knots(std::span<const double> points, int basis_count, int order,
                      double lower, double upper);

// Evenly spaced knots with spacing h = (upper - lower) / (L - p + 1), extended
// p - 1 spacings beyond each end so that [t[p-1], t[L]] = [lower, upper] and
// the Greville abscissae are evenly spaced.
KnotVector make_uniform_knots(double lower, double upper, int basis_count, int order);

// All L basis functions at x (Cox-de Boor recursion).
Eigen::VectorXd eval_basis(double x, const KnotVector& kv);

// nderiv-th derivative of every basis function at x.
Eigen::VectorXd basis_derivative(double x, const KnotVector& kv, int nderiv = 1);

// de Boor's triangular scheme on the p active coefficients.
double de_boor(double x, std::span<const double> coeffs, const KnotVector& kv);
double de_boor(double x, const Eigen::VectorXd& coeffs, const KnotVector& kv);

// Coefficients of f' on the order-(p-1) derivative view of the knots.
// Zero-width spans contribute zero. Throws NoDerivative for p = 1.
Spline derivative_coeffs(const Eigen::VectorXd& coeffs, const KnotVector& kv);
inline Spline derivative_coeffs(const Spline& s) { return derivative_coeffs(s.weights(), s.knots()); }

// S_ij = integral of b''_i b''_j over [lower, upper]; cubic only.
Eigen::MatrixXd penalty_matrix(const KnotVector& kv);
// R with R^T R = S: rows are quadrature-weighted b'' at the Gauss nodes.
// beta^T S beta = |R beta|^2 avoids the cancellation of the dense form.
Eigen::MatrixXd penalty_root(const KnotVector& kv);

// Dense n x L design with rows eval_basis(x_i).
Eigen::MatrixXd basis_matrix(std::span<const double> xs, const KnotVector& kv);

}  // namespace semibmd
