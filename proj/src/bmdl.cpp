#include "semibmd/bmdl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <thread>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "root_finding.hpp"
#include "semibmd/errors.hpp"

namespace semibmd {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

// Shared pieces of V_n: b(x0) and the scaling 1/sigma^2. On the span holding
// x0 the difference b(x0) - b(x) is taken from the exact Taylor expansion of
// the cubic piece, so it keeps full relative precision as x -> x0.
struct VarianceForm {
    const CoefCovariance& cov;
    const KnotVector& knots;
    double x0;
    int span0;
    Eigen::VectorXd b0;
    std::vector<Eigen::VectorXd> taylor;  // b^(k)(x0) / k!
    double inv_sigma2;

    VarianceForm(const DoseCurve& curve, const CoefCovariance& c, const BmdConfig& cfg)
        : cov(c), knots(curve.spline.knots()), x0(cfg.x0), span0(knots.find_span(cfg.x0)),
          b0(eval_basis(cfg.x0, knots)), inv_sigma2(1.0 / (curve.sigma * curve.sigma)) {
        if (cov.sigma.rows() != knots.basis_count() || cov.sigma.cols() != knots.basis_count()) {
            throw Error(ErrorKind::InvalidArgument, "covariance dimension does not match the exposure basis");
        }
        double fact = 1.0;
        for (int k = 1; k < knots.order(); ++k) {
            fact *= k;
            taylor.push_back(basis_derivative(cfg.x0, knots, k) / fact);
        }
    }

    Eigen::VectorXd diff(double x) const {
        if (knots.find_span(x) != span0) return b0 - eval_basis(x, knots);
        const double h = x - x0;
        Eigen::VectorXd d = Eigen::VectorXd::Zero(b0.size());
        for (auto it = taylor.rbegin(); it != taylor.rend(); ++it) d = (d + *it) * h;
        return -d;
    }

    double value(double x) const {
        const Eigen::VectorXd d = diff(x);
        return inv_sigma2 * d.dot(cov.sigma * d);
    }

    std::pair<double, double> value_and_derivative(double x) const {
        const Eigen::VectorXd d = diff(x);
        const Eigen::VectorXd sd = cov.sigma * d;
        const Eigen::VectorXd db = basis_derivative(x, knots, 1);
        return {inv_sigma2 * d.dot(sd), -2.0 * inv_sigma2 * db.dot(sd)};
    }
};

}  // namespace

CoefCovariance coef_covariance(const Eigen::MatrixXd& draws) {
    if (draws.cols() < 2) throw Error(ErrorKind::InvalidArgument, "coef_covariance: need at least 2 draws");
    const Eigen::VectorXd mean = draws.rowwise().mean();
    const Eigen::MatrixXd centered = draws.colwise() - mean;
    CoefCovariance out;
    out.sigma = centered * centered.transpose() / static_cast<double>(draws.cols() - 1);
    if (!out.sigma.allFinite()) {
        throw Error(ErrorKind::BmdlNotEstimable,
                    "posterior draws of the exposure weights overflow; the covariance is not finite");
    }
    return out;
}

CoefCovariance coef_covariance(const FittedModel& model, int draws, Rng& rng) {
    if (draws < 2) throw Error(ErrorKind::InvalidArgument, "coef_covariance: need at least 2 draws");
    return coef_covariance(posterior_sample(model, draws, rng).beta_c);
}

double v_n(double x, const DoseCurve& curve, const CoefCovariance& cov, const BmdConfig& cfg) {
    return VarianceForm(curve, cov, cfg).value(x);
}

double v_n_derivative(double x, const DoseCurve& curve, const CoefCovariance& cov, const BmdConfig& cfg) {
    return VarianceForm(curve, cov, cfg).value_and_derivative(x).second;
}

double chi2_1_quantile(double alpha_level) {
    if (!(alpha_level > 0.0 && alpha_level < 1.0)) {
        throw Error(ErrorKind::InvalidArgument, "alpha_level must lie in (0, 1)");
    }
    return boost::math::quantile(boost::math::chi_squared_distribution<double>(1.0), alpha_level);
}

DeltaBmdl delta_bmdl(const DoseCurve& curve, const BmdEstimate& est, const CoefCovariance& cov,
                     const BmdConfig& cfg) {
    DeltaBmdl out;
    out.var_at_xb = v_n(est.xb_hat, curve, cov, cfg);
    out.u_prime_at_xb = u_n_derivative(est.xb_hat, curve);
    if (!(std::abs(out.u_prime_at_xb) >= 1e-14)) {
        throw Error(ErrorKind::DegenerateSlope, "U_n' vanishes at the estimated BMD");
    }
    out.value = est.xb_hat - 2.0 * std::sqrt(std::max(out.var_at_xb, 0.0)) / std::abs(out.u_prime_at_xb);
    out.below_x0 = out.value < cfg.x0;
    return out;
}

double kappa_n(double x, const DoseCurve& curve, const CoefCovariance& cov, const BmdConfig& cfg, double q) {
    const double u = u_n(x, curve, cfg);
    return u * u - v_n(x, curve, cov, cfg) * q;
}

PivotBmdl pivot_bmdl(const DoseCurve& curve, const BmdEstimate& est, const CoefCovariance& cov,
                     const BmdConfig& cfg, const PivotOptions& opts) {
    cfg.validate();
    const double q = chi2_1_quantile(opts.alpha_level);
    const double c = c_const(cfg.p0, cfg.p_plus);
    const VarianceForm var(curve, cov, cfg);
    const Spline deriv = derivative_coeffs(curve.spline);
    const double f0 = curve.spline(cfg.x0);
    const double xb = est.xb_hat;

    PivotBmdl out;
    if (!(var.value(xb) > 0.0)) {
        out.value = xb;
        out.degenerate = true;
        return out;
    }
    // -kappa_n is negative at x0 and positive at x_b.
    auto neg_kappa = [&](double x) {
        const double u = (f0 - curve.spline(x)) / curve.sigma - c;
        const double up = -deriv(x) / curve.sigma;
        const auto [v, vp] = var.value_and_derivative(x);
        return std::pair{-(u * u - v * q), -(2.0 * u * up - vp * q)};
    };
    const auto r = detail::increasing_root(neg_kappa, cfg.x0, xb, cfg.tol, cfg.max_iter);
    out.value = r.x;
    out.kappa_at_root = -neg_kappa(r.x).first;
    out.iterations = r.iterations;
    out.used_bisection = r.used_bisection;

    if (opts.scan_roots) {
        out.sign_changes = 0;
        double prev = c * c;
        for (int i = 1; i <= opts.scan_points; ++i) {
            const double x = cfg.x0 + (xb - cfg.x0) * i / (opts.scan_points + 1.0);
            const double k = -neg_kappa(x).first;
            if ((k < 0.0) != (prev < 0.0)) ++out.sign_changes;
            prev = k;
        }
        if (prev > 0.0) ++out.sign_changes;  // kappa_n(x_b) < 0
    }
    return out;
}

double percentile(std::vector<double> samples, double q) {
    if (samples.empty()) throw Error(ErrorKind::InvalidArgument, "percentile of an empty sample");
    if (!(q >= 0.0 && q <= 1.0)) throw Error(ErrorKind::InvalidArgument, "percentile level must lie in [0, 1]");
    std::sort(samples.begin(), samples.end());
    const double h = (static_cast<double>(samples.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= samples.size()) return samples.back();
    return samples[lo] + (h - static_cast<double>(lo)) * (samples[lo + 1] - samples[lo]);
}

BootstrapBmdl bootstrap_bmdl(const FittedModel& model, const BmdConfig& cfg, const BootstrapOptions& opts) {
    if (opts.draws < 40) throw Error(ErrorKind::InvalidArgument, "bootstrap needs at least 40 draws");
    cfg.validate();
    const BmdSolver solver(model.exposure_knots(), cfg);
    const int L = model.design->basis_count();
    const Eigen::Index D = model.chol.rows();
    const Eigen::VectorXd psi_hat = model.params.psi();
    const auto upper = model.chol.transpose().triangularView<Eigen::Upper>();
    const MonotoneLink link = model.design->link;

    const int blocks = (opts.draws + kBootstrapBlock - 1) / kBootstrapBlock;
    std::vector<std::optional<double>> xb(static_cast<std::size_t>(opts.draws));

    auto run_block = [&](int b) {
        Rng rng = stream_rng(opts.seed, 1 + static_cast<std::uint64_t>(b));
        std::normal_distribution<double> normal;
        const int first = b * kBootstrapBlock;
        const int count = std::min(kBootstrapBlock, opts.draws - first);
        Eigen::MatrixXd z(D, count);
        for (int j = 0; j < count; ++j) {
            for (Eigen::Index i = 0; i < D; ++i) z(i, j) = normal(rng);
        }
        const Eigen::MatrixXd v = upper.solve(z);
        for (int j = 0; j < count; ++j) {
            const Eigen::VectorXd beta = psi_hat.segment(1, L) + v.col(j).segment(1, L);
            const auto est = solver.solve(constrained_weights(beta, link), model.sigma_hat);
            if (est) xb[static_cast<std::size_t>(first + j)] = est->xb_hat;
        }
    };

    const int threads = std::max(1, std::min(opts.threads, blocks));
    if (threads == 1) {
        for (int b = 0; b < blocks; ++b) run_block(b);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                for (int b = t; b < blocks; b += threads) run_block(b);
            });
        }
        for (auto& th : pool) th.join();
    }

    BootstrapBmdl out;
    std::vector<double> ok;
    ok.reserve(xb.size());
    for (const auto& v : xb) {
        if (v) ok.push_back(*v);
    }
    out.used = static_cast<int>(ok.size());
    out.failures = opts.draws - out.used;
    if (ok.empty()) {
        throw Error(ErrorKind::BmdlNotEstimable, "no posterior draw admits a benchmark dose; decrease p_plus");
    }
    out.value = percentile(ok, opts.level);
    if (opts.keep_samples) out.samples = std::move(ok);
    return out;
}

BmdlReport compute_bmdls(const FittedModel& model, const BmdEstimate& est, const BmdConfig& cfg,
                         const BmdlOptions& opts, std::vector<double>* boot_samples) {
    const DoseCurve curve = dose_curve(model);
    BmdlReport rep;

    auto start = Clock::now();
    Rng rng = stream_rng(opts.seed, 0);
    const CoefCovariance cov = coef_covariance(model, opts.draws, rng);
    const double t_cov = seconds_since(start);

    start = Clock::now();
    const DeltaBmdl delta = delta_bmdl(curve, est, cov, cfg);
    rep.time_delta = t_cov + seconds_since(start);
    rep.delta = delta.value;
    rep.delta_below_x0 = delta.below_x0;
    rep.var_at_xb = delta.var_at_xb;
    rep.u_prime_at_xb = delta.u_prime_at_xb;

    start = Clock::now();
    const PivotBmdl piv = pivot_bmdl(curve, est, cov, cfg, PivotOptions{opts.alpha_level, false});
    rep.time_pivot = t_cov + seconds_since(start);
    rep.pivot = piv.value;
    rep.pivot_degenerate = piv.degenerate;
    if (opts.scan_roots) {
        rep.pivot_sign_changes = pivot_bmdl(curve, est, cov, cfg, PivotOptions{opts.alpha_level, true}).sign_changes;
    }

    if (opts.bootstrap) {
        start = Clock::now();
        const BootstrapBmdl boot = bootstrap_bmdl(
            model, cfg, BootstrapOptions{opts.draws, opts.seed, opts.threads, 0.025, boot_samples != nullptr});
        rep.time_boot = seconds_since(start);
        rep.boot = boot.value;
        rep.boot_samples_used = boot.used;
        rep.boot_failures = boot.failures;
        if (boot_samples) *boot_samples = boot.samples;
    }
    return rep;
}

}  // namespace semibmd
