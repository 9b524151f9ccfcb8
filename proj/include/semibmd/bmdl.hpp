#pragma once
// Benchmark dose lower limits: Delta method, approximate pivot, and the
// Bayesian parametric bootstrap over approximate posterior draws.

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "semibmd/bmd.hpp"
#include "semibmd/model.hpp"

namespace semibmd {

// Sample covariance of constrained exposure weights beta_c.
struct CoefCovariance {
    Eigen::MatrixXd sigma;  // L x L
};

// From an L x M matrix of draws (M >= 2).
CoefCovariance coef_covariance(const Eigen::MatrixXd& beta_c_draws);
CoefCovariance coef_covariance(const FittedModel& model, int draws, Rng& rng);

// V_n(x) = (b(x0) - b(x))^T Sigma (b(x0) - b(x)) / sigma^2
double v_n(double x, const DoseCurve& curve, const CoefCovariance& cov, const BmdConfig& cfg);
// V_n'(x) = -2 b'(x)^T Sigma (b(x0) - b(x)) / sigma^2
double v_n_derivative(double x, const DoseCurve& curve, const CoefCovariance& cov, const BmdConfig& cfg);

// q with P(chi^2_1 < q) = alpha_level.
double chi2_1_quantile(double alpha_level);

struct DeltaBmdl {
    double value = 0.0;
    bool below_x0 = false;  // no information about the BMD when set
    double var_at_xb = 0.0;
    double u_prime_at_xb = 0.0;
};

// x_b - 2 sqrt(V_n(x_b)) / |U_n'(x_b)|; throws DegenerateSlope if |U_n'| < 1e-14.
DeltaBmdl delta_bmdl(const DoseCurve& curve, const BmdEstimate& est, const CoefCovariance& cov,
                     const BmdConfig& cfg);

struct PivotOptions {
    double alpha_level = 0.95;
    // Count sign changes of kappa_n on a grid over (x0, x_b) as a diagnostic.
    bool scan_roots = true;
    int scan_points = 1000;
};

struct PivotBmdl {
    double value = 0.0;
    double kappa_at_root = 0.0;
    int iterations = 0;
    bool used_bisection = false;
    bool degenerate = false;  // V_n(x_b) = 0; value is x_b
    int sign_changes = -1;    // -1 when not scanned
};

// kappa_n(x) = U_n(x)^2 - V_n(x) q
double kappa_n(double x, const DoseCurve& curve, const CoefCovariance& cov, const BmdConfig& cfg, double q);

PivotBmdl pivot_bmdl(const DoseCurve& curve, const BmdEstimate& est, const CoefCovariance& cov,
                     const BmdConfig& cfg, const PivotOptions& opts = {});

// Linear interpolation between order statistics, q in [0, 1].
double percentile(std::vector<double> samples, double q);

struct BootstrapOptions {
    int draws = 1000;
    std::uint64_t seed = 0;
    int threads = 1;
    double level = 0.025;
    bool keep_samples = false;
};

struct BootstrapBmdl {
    double value = 0.0;
    int used = 0;
    int failures = 0;
    std::vector<double> samples;  // converged BMD draws, in draw order, when kept
};

// Draws are generated in fixed blocks with one generator stream per block, so
// the result depends only on (model, cfg, draws, seed), not on threads.
// Throws BmdlNotEstimable when no draw admits a BMD.
BootstrapBmdl bootstrap_bmdl(const FittedModel& model, const BmdConfig& cfg, const BootstrapOptions& opts);

inline constexpr int kBootstrapBlock = 64;

struct BmdlReport {
    double delta = 0.0;
    bool delta_below_x0 = false;
    double pivot = 0.0;
    double boot = 0.0;
    double var_at_xb = 0.0;
    double u_prime_at_xb = 0.0;
    int boot_samples_used = 0;
    int boot_failures = 0;
    int pivot_sign_changes = -1;
    bool pivot_degenerate = false;
    // Wall-clock seconds per lower limit; delta and pivot include the
    // covariance draws they depend on.
    double time_delta = 0.0;
    double time_pivot = 0.0;
    double time_boot = 0.0;
};

struct BmdlOptions {
    int draws = 1000;
    std::uint64_t seed = 0;
    int threads = 1;
    double alpha_level = 0.95;
    bool scan_roots = true;
    bool bootstrap = true;
};

// Covariance draws use stream 0 of the seed; bootstrap blocks use streams 1, 2, ...
BmdlReport compute_bmdls(const FittedModel& model, const BmdEstimate& est, const BmdConfig& cfg,
                         const BmdlOptions& opts, std::vector<double>* boot_samples = nullptr);

}  // namespace semibmd
