#pragma once
// Monotone additive dose-response model
//
//   y_i = alpha + f(x_i) + sum_j g_j(z_ij) + sigma * eps_i
//
// f is a cubic B-spline whose weights beta_c are a monotone (decreasing)
// transform of unconstrained parameters beta; each g_j is an unconstrained
// cubic B-spline. Smoothing and variance parameters phi = (tau, loglambda) are
// chosen by maximizing a Laplace-approximate marginal likelihood, with the
// regression parameters psi = (alpha, beta, gamma) profiled out by Newton's
// method.

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "semibmd/splines.hpp"

namespace semibmd {

using Rng = std::mt19937_64;

// Independent generator for (seed, stream); streams never depend on call order.
Rng stream_rng(std::uint64_t seed, std::uint64_t stream);

struct DoseResponseData {
    Eigen::VectorXd y;
    Eigen::VectorXd x;
    Eigen::MatrixXd z;  // n x m, may have zero columns

    Eigen::Index n() const { return y.size(); }
    Eigen::Index m() const { return z.cols(); }

    // Throws DataError on shape mismatch or non-finite values.
    void validate() const;
};

// How unconstrained beta maps to the spline weights of f.
enum class MonotoneLink {
    Exponential,  // beta_c,1 = beta_1, beta_c,l = beta_c,l-1 - exp(beta_l)
    Identity,     // beta_c = beta (no shape constraint; l is quadratic in psi)
};

// Exposure knot layout. Uniform (extended, evenly spaced) keeps the Greville
// abscissae evenly spaced, so a curve with geometric decrements, e.g. an
// exponential decay, lies in the null space of the penalty on beta; clamped
// quantile knots bend the log-decrements near the ends and bias f near x0.
enum class KnotPlacement { Uniform, Quantile };

struct FitConfig {
    int basis_count = 20;
    KnotPlacement exposure_knots = KnotPlacement::Uniform;
    // Boundary knots of the exposure smooth; default to the data range. Set the
    // lower one to x0 when the baseline exposure lies below the smallest x.
    std::optional<double> exposure_lower;
    std::optional<double> exposure_upper;
    MonotoneLink link = MonotoneLink::Exponential;
    double ridge = 1e-8;

    int max_inner_iter = 200;
    double inner_tol = 1e-8;

    int max_outer_iter = 100;
    double fd_step = 1e-4;
    double outer_value_tol = 1e-6;
    double outer_grad_tol = 1e-4;
    double loglambda_min = -20.0;
    double loglambda_max = 20.0;
};

struct ModelParams {
    double alpha = 0.0;
    Eigen::VectorXd beta;
    Eigen::VectorXd gamma;
    double tau = 0.0;
    Eigen::VectorXd loglambda;

    Eigen::VectorXd psi() const;
    Eigen::VectorXd phi() const;
    void set_psi(const Eigen::VectorXd& psi);
    void set_phi(const Eigen::VectorXd& phi);
};

// Exponential-link monotone transform; output is strictly decreasing.
Eigen::VectorXd reparameterize(const Eigen::VectorXd& beta);
Eigen::VectorXd constrained_weights(const Eigen::VectorXd& beta, MonotoneLink link);

struct Design {
    KnotVector exposure_knots;
    std::vector<KnotVector> covariate_knots;
    Eigen::MatrixXd B;                     // n x L
    Eigen::MatrixXd Z;                     // n x mL, blocks per covariate
    // S_1 (exposure), S_2..S_{m+1}, each scaled so |S_k|_2 = |B_k^T B_k|_2
    std::vector<Eigen::MatrixXd> penalty;
    std::vector<Eigen::MatrixXd> penalty_root;  // R_k with R_k^T R_k = S_k
    std::vector<int> penalty_rank;
    // D x D basis with |det| = 1 in which log|H| is assembled: per smooth the
    // exact penalty null space (constant, linear) then the range eigenvectors,
    // plus explicit columns for the intercept / spline-level confounding,
    // whose curvature is only the ridge.
    Eigen::MatrixXd logdet_basis;
    Eigen::VectorXd exposure_basis_mean;   // column means of B
    Eigen::MatrixXd covariate_basis_mean;  // L x m, column means of each Z_j

    // Linear design X = [1 | B | Z] and X^T X. Residuals are formed from X
    // directly; the Gram expansion of the RSS cancels badly near the optimum.
    Eigen::MatrixXd X;
    Eigen::MatrixXd gram;

    DoseResponseData data;
    MonotoneLink link = MonotoneLink::Exponential;
    double ridge = 1e-8;

    int n() const { return static_cast<int>(data.n()); }
    int m() const { return static_cast<int>(data.m()); }
    int basis_count() const { return exposure_knots.basis_count(); }
    int dim_psi() const { return 1 + basis_count() * (1 + m()); }
    int dim_phi() const { return m() + 2; }
};

Design build_design(const DoseResponseData& data, const FitConfig& config = {});

// Penalized negative log-likelihood in psi for fixed phi, including the
// Gaussian normalizing term -(n/2) tau + (n/2) log(2 pi) and the ridge.
class PenalizedObjective {
public:
    explicit PenalizedObjective(const Design& design) : design_(design) {}

    struct Eval {
        double value = 0.0;
        Eigen::VectorXd gradient;
        Eigen::MatrixXd hessian;
    };

    double value(const Eigen::VectorXd& psi, const Eigen::VectorXd& phi) const;
    Eval evaluate(const Eigen::VectorXd& psi, const Eigen::VectorXd& phi, bool with_hessian = true) const;

    // log|H + shift I|, with the Hessian formed from its factors in logdet_basis.
    double log_det_hessian(const Eigen::VectorXd& psi, const Eigen::VectorXd& phi, double shift = 0.0) const;

    const Design& design() const { return design_; }

private:
    // theta_lin = (alpha, beta_c, gamma)
    Eigen::VectorXd linear_coefficients(const Eigen::VectorXd& psi) const;

    const Design& design_;
};

double penalized_nll(const ModelParams& params, const Design& design);

struct InnerResult {
    Eigen::VectorXd psi;
    double nll = 0.0;
    Eigen::MatrixXd hessian;
    Eigen::MatrixXd chol;  // lower factor of hessian (+ ridge if flagged)
    double log_det = 0.0;
    double grad_norm = 0.0;
    int iterations = 0;
    bool ridge_added = false;
};

InnerResult inner_opt(const Eigen::VectorXd& phi, const Design& design, const Eigen::VectorXd& start,
                      const FitConfig& config = {});

// log L_LA(phi) = (D/2) log(2 pi) - (1/2) log|H| - l(psi_hat, phi)
double laml(const InnerResult& inner, const Design& design);
double laml(const Eigen::VectorXd& phi, const Design& design, const Eigen::VectorXd& start,
            const FitConfig& config = {});

// (1/2) sum_k rank(S_k) lambda_k: the phi-dependent part of the normalizing
// constant of the Gaussian smoothing prior. Added to laml in the outer objective.
double penalty_log_normalizer(const Eigen::VectorXd& phi, const Design& design);

// Starting values: linear least-squares trend mapped to spline weights.
ModelParams initial_params(const Design& design);

struct FittedModel {
    ModelParams params;
    Eigen::VectorXd beta_c;
    Eigen::MatrixXd hessian;
    Eigen::MatrixXd chol;
    std::shared_ptr<const Design> design;
    double sigma_hat = 0.0;

    // Post-hoc centering: sum_i f_hat(x_i) = 0 and sum_i g_hat_j(z_ij) = 0.
    double exposure_center = 0.0;
    Eigen::VectorXd covariate_centers;
    double alpha_centered = 0.0;

    double log_laml = 0.0;
    double objective = 0.0;
    int outer_iterations = 0;
    int inner_iterations = 0;
    bool hessian_ridge_added = false;

    const KnotVector& exposure_knots() const { return design->exposure_knots; }
    Spline exposure_spline() const { return Spline(design->exposure_knots, beta_c); }
    double f_hat(double x) const;
    double g_hat(int j, double z) const;
    Eigen::VectorXd smoothing_parameters() const { return params.loglambda.array().exp(); }
};

FittedModel fit(const DoseResponseData& data, const FitConfig& config = {});

struct PosteriorDraws {
    Eigen::MatrixXd psi;     // D x M
    Eigen::MatrixXd beta_c;  // L x M
};

// psi_j = psi_hat + v, L^T v = z, z ~ N(0, I); phi held at phi_hat.
PosteriorDraws posterior_sample(const FittedModel& model, int draws, Rng& rng);

}  // namespace semibmd
