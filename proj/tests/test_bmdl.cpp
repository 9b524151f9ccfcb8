#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <doctest.h>

#include "semibmd/bmd.hpp"
#include "semibmd/bmdl.hpp"
#include "semibmd/errors.hpp"
#include "semibmd/sim.hpp"

using namespace semibmd;

namespace {

constexpr double kC1 = 0.14805331158745652062659424638;  // c(0.025, 0.01)

DoseCurve linear_curve(double a, double b, double sigma, double hi = 1.0, int L = 10) {
    const auto kv = make_uniform_knots(0.0, hi, L, 4);
    return DoseCurve{Spline(kv, (a + b * kv.greville().array()).matrix()), sigma, 0.0};
}

Eigen::MatrixXd random_spd(std::mt19937_64& rng, int L, double scale) {
    std::normal_distribution<double> z;
    Eigen::MatrixXd A(L, L);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) A(i, j) = z(rng);
    return scale * (A * A.transpose() / L + 0.1 * Eigen::MatrixXd::Identity(L, L));
}

const FittedModel& fitted() {
    static const FittedModel m = [] {
        Rng rng(21);
        return fit(simulate_dataset(400, 3.0, 0.2, rng), FitConfig{.basis_count = 10, .exposure_lower = 0.0});
    }();
    return m;
}

// kappa_n root from a sign scan on a fine grid, then bisection.
double grid_bisection(const DoseCurve& c, const CoefCovariance& cov, const BmdConfig& cfg, double q, double hi, int points) {
    double lo = cfg.x0;
    double prev = kappa_n(lo, c, cov, cfg, q);
    double a = lo, b = hi;
    for (int i = 1; i <= points; ++i) {
        const double x = cfg.x0 + (hi - cfg.x0) * i / points;
        const double v = kappa_n(x, c, cov, cfg, q);
        if ((prev > 0.0) != (v > 0.0)) {
            a = cfg.x0 + (hi - cfg.x0) * (i - 1) / points;
            b = x;
            break;
        }
        prev = v;
    }
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (a + b);
        (kappa_n(mid, c, cov, cfg, q) > 0.0 ? a : b) = mid;
    }
    return 0.5 * (a + b);
}

}  // namespace

TEST_CASE("chi-square quantile") {
    CHECK(chi2_1_quantile(0.95) == doctest::Approx(3.8414588206941245).epsilon(1e-12));
    CHECK(chi2_1_quantile(0.99) == doctest::Approx(6.634896601021214).epsilon(1e-12));
}

TEST_CASE("coefficient covariance") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> z;
    Eigen::MatrixXd draws(4, 500);
    for (int j = 0; j < 500; ++j)
        for (int i = 0; i < 4; ++i) draws(i, j) = z(rng) + i;
    const auto cov = coef_covariance(draws);
    Eigen::MatrixXd naive = Eigen::MatrixXd::Zero(4, 4);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(4);
    for (int j = 0; j < 500; ++j) mean += draws.col(j) / 500.0;
    for (int j = 0; j < 500; ++j) naive += (draws.col(j) - mean) * (draws.col(j) - mean).transpose() / 499.0;
    CHECK((cov.sigma - naive).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(cov.sigma.diagonal().minCoeff() >= 0.0);

    SUBCASE("push-forward of an identity posterior under the identity link") {
        Rng r(2);
        const auto data = simulate_dataset(100, 2.0, 0.1, r);
        FitConfig cfg{.basis_count = 4};
        cfg.link = MonotoneLink::Identity;
        FittedModel m;
        m.design = std::make_shared<const Design>(build_design(data, cfg));
        m.params = initial_params(*m.design);
        m.chol = Eigen::MatrixXd::Identity(5, 5);
        m.hessian = m.chol;
        Rng a(3);
        const int M = 200000;
        const auto s = coef_covariance(m, M, a);
        // var of a sample variance / covariance of unit normals: 2/M and 1/M
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                const double se = std::sqrt((i == j ? 2.0 : 1.0) / M);
                CHECK(std::abs(s.sigma(i, j) - (i == j ? 1.0 : 0.0)) <= 5.0 * se);
            }
        Rng b1(4), b2(4);
        CHECK(coef_covariance(m, 100, b1).sigma == coef_covariance(m, 100, b2).sigma);
    }
}

TEST_CASE("V_n") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto c = linear_curve(1.0, -1.0, 0.7);
    BmdConfig cfg;
    cfg.x0 = 0.1;
    const CoefCovariance cov{random_spd(rng, 10, 0.01)};
    CHECK(v_n(0.1, c, cov, cfg) == 0.0);

    // Sigma = e_1 e_1^T picks out the squared change of the first basis function
    CoefCovariance e1{Eigen::MatrixXd::Zero(10, 10)};
    e1.sigma(0, 0) = 1.0;
    const DoseCurve unit{c.spline, 1.0, 0.0};
    const double d0 = eval_basis(0.1, c.spline.knots())[0] - eval_basis(0.9, c.spline.knots())[0];
    CHECK(v_n(0.9, unit, e1, cfg) == doctest::Approx(d0 * d0).epsilon(1e-14));

    const double h = 1e-6;
    for (int rep = 0; rep < 100; ++rep) {
        const double x = 0.01 + 0.98 * u(rng);
        const Eigen::VectorXd d = eval_basis(0.1, c.spline.knots()) - eval_basis(x, c.spline.knots());
        double quad = 0.0;
        for (int i = 0; i < 10; ++i)
            for (int j = 0; j < 10; ++j) quad += d[i] * cov.sigma(i, j) * d[j];
        CHECK(v_n(x, c, cov, cfg) == doctest::Approx(quad / (0.7 * 0.7)).epsilon(1e-12));
        CHECK(v_n(x, c, cov, cfg) >= 0.0);
        const double fd = (v_n(x + h, c, cov, cfg) - v_n(x - h, c, cov, cfg)) / (2 * h);
        CHECK(std::abs(v_n_derivative(x, c, cov, cfg) - fd) <= 1e-5 * std::max(1e-3, std::abs(fd)));
    }
}

TEST_CASE("V_n keeps its precision next to x0") {
    std::mt19937_64 rng(15);
    const auto c = linear_curve(1.0, -1.0, 0.7);
    const CoefCovariance cov{random_spd(rng, 10, 0.01)};
    for (double x0 : {0.0, 0.1, 0.35}) {
        BmdConfig cfg;
        cfg.x0 = x0;
        // leading term h^2 b'(x0)^T Sigma b'(x0) / sigma^2, exact to O(h)
        const Eigen::VectorXd d1 = basis_derivative(x0, c.spline.knots());
        const double lead = d1.dot(cov.sigma * d1) / (0.7 * 0.7);
        const double h = x0 == 0.0 ? 1e-60 : 1e-9;
        CHECK(v_n(x0 + h, c, cov, cfg) == doctest::Approx(h * h * lead).epsilon(h == 1e-9 ? 1e-6 : 1e-12));
    }
}

TEST_CASE("non-finite draws are not estimable") {
    Eigen::MatrixXd draws = Eigen::MatrixXd::Ones(3, 5);
    draws(1, 2) = std::numeric_limits<double>::infinity();
    try {
        (void)coef_covariance(draws);
        FAIL("expected BmdlNotEstimable");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::BmdlNotEstimable);
    }
}

TEST_CASE("Delta BMDL") {
    // slope -0.5 with sigma 1 gives |U_n'| = 0.5; x0 placed so x_b = 1
    BmdConfig cfg;
    const double x0 = 1.0 - 2.0 * kC1;
    cfg.x0 = x0;
    const auto c = linear_curve(1.0, -0.5, 1.0, 2.0);
    const auto est = estimate_bmd(c, cfg);
    REQUIRE(est.xb_hat == doctest::Approx(1.0).epsilon(1e-10));
    const Eigen::VectorXd d = eval_basis(x0, c.spline.knots()) - eval_basis(1.0, c.spline.knots());
    const CoefCovariance cov{0.01 * d * d.transpose() / std::pow(d.squaredNorm(), 2)};
    const auto del = delta_bmdl(c, est, cov, cfg);
    CHECK(del.var_at_xb == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(del.value == doctest::Approx(0.6).epsilon(1e-10));
    CHECK(del.below_x0);  // x0 = 1 - 2c is about 0.70

    const CoefCovariance zero{Eigen::MatrixXd::Zero(10, 10)};
    CHECK(delta_bmdl(c, est, zero, cfg).value == est.xb_hat);

    const CoefCovariance wide{100.0 * cov.sigma};
    const auto bad = delta_bmdl(c, est, wide, cfg);
    CHECK(bad.value == doctest::Approx(-3.0).epsilon(1e-9));
    CHECK(bad.below_x0);
}

TEST_CASE("pivot BMDL") {
    std::mt19937_64 rng(6);
    BmdConfig cfg;
    const double q = chi2_1_quantile(0.95);
    const auto c = linear_curve(0.5, -1.5, 0.4);
    const CoefCovariance cov{random_spd(rng, 10, 1e-3)};
    CHECK(kappa_n(0.0, c, cov, cfg, q) == doctest::Approx(kC1 * kC1).epsilon(1e-12));
    CHECK(kappa_n(0.0, c, cov, cfg, q) == doctest::Approx(0.02192).epsilon(1e-3));

    const auto est = estimate_bmd(c, cfg);
    const auto piv = pivot_bmdl(c, est, cov, cfg);
    CHECK(piv.value > cfg.x0);
    CHECK(piv.value < est.xb_hat);
    CHECK(std::abs(piv.kappa_at_root) <= 1e-8);
    CHECK(std::abs(kappa_n(piv.value, c, cov, cfg, q)) <= 1e-8);
    CHECK(piv.sign_changes == 1);
    CHECK(std::abs(piv.value - grid_bisection(c, cov, cfg, q, est.xb_hat, 1000000)) <= 1e-6);

    const CoefCovariance zero{Eigen::MatrixXd::Zero(10, 10)};
    const auto deg = pivot_bmdl(c, est, zero, cfg);
    CHECK(deg.degenerate);
    CHECK(deg.value == est.xb_hat);
}

TEST_CASE("pivot BMDL on fitted models") {
    const auto& m = fitted();
    BmdConfig cfg;
    const auto curve = dose_curve(m);
    const auto est = estimate_bmd(curve, cfg);
    Rng rng(7);
    const auto cov = coef_covariance(m, 1000, rng);
    const auto piv = pivot_bmdl(curve, est, cov, cfg);
    const double q = chi2_1_quantile(0.95);
    CHECK(piv.value > cfg.x0);
    CHECK(piv.value < est.xb_hat);
    CHECK(std::abs(piv.kappa_at_root) <= 1e-8);
    CHECK(std::abs(piv.value - grid_bisection(curve, cov, cfg, q, est.xb_hat, 100000)) <= 1e-6);
}

TEST_CASE("percentile") {
    std::vector<double> s;
    for (int i = 1; i <= 40; ++i) s.push_back(i / 40.0);
    // linear interpolation between order statistics at (N - 1) q
    CHECK(percentile(s, 0.025) == doctest::Approx(0.049375).epsilon(1e-12));
    CHECK(percentile(s, 0.0) == 1.0 / 40.0);
    CHECK(percentile(s, 1.0) == 1.0);
    CHECK(percentile(s, 0.5) == doctest::Approx(20.5 / 40.0).epsilon(1e-12));
    std::reverse(s.begin(), s.end());
    CHECK(percentile(s, 0.025) == doctest::Approx(0.049375).epsilon(1e-12));
}

TEST_CASE("bootstrap BMDL") {
    const auto& m = fitted();
    BmdConfig cfg;
    const auto est = estimate_bmd(m, cfg);

    SUBCASE("point-mass posterior") {
        FittedModel sharp = m;
        sharp.chol = 1e9 * Eigen::MatrixXd::Identity(m.chol.rows(), m.chol.cols());
        const auto b = bootstrap_bmdl(sharp, cfg, BootstrapOptions{.draws = 200, .seed = 1});
        CHECK(b.value == doctest::Approx(est.xb_hat).epsilon(1e-6));
        CHECK(b.failures == 0);
    }

    SUBCASE("deterministic and thread independent") {
        BootstrapOptions o{.draws = 1000, .seed = 11, .threads = 1, .keep_samples = true};
        const auto a = bootstrap_bmdl(m, cfg, o);
        o.threads = 4;
        const auto b = bootstrap_bmdl(m, cfg, o);
        CHECK(a.value == b.value);
        CHECK(a.samples == b.samples);
        CHECK(a.used + a.failures == 1000);
        const auto [lo, hi] = std::minmax_element(a.samples.begin(), a.samples.end());
        CHECK(a.value >= *lo);
        CHECK(a.value <= *hi);
        CHECK(a.value == percentile(a.samples, 0.025));
    }

    SUBCASE("no draw admits a BMD") {
        FittedModel noisy = m;
        noisy.sigma_hat = 100.0;
        try {
            (void)bootstrap_bmdl(noisy, cfg, BootstrapOptions{.draws = 100, .seed = 1});
            FAIL("expected BmdlNotEstimable");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::BmdlNotEstimable);
        }
    }
}

TEST_CASE("compute_bmdls ordering and reproducibility") {
    const auto& m = fitted();
    BmdConfig cfg;
    const auto est = estimate_bmd(m, cfg);
    BmdlOptions o;
    o.seed = 3;
    std::vector<double> samples;
    const auto r = compute_bmdls(m, est, cfg, o, &samples);
    CHECK(r.pivot > cfg.x0);
    CHECK(r.pivot < est.xb_hat);
    CHECK(r.delta < est.xb_hat);
    CHECK(r.boot_samples_used == static_cast<int>(samples.size()));
    CHECK(r.pivot_sign_changes == 1);
    const auto r2 = compute_bmdls(m, est, cfg, o);
    CHECK(r.delta == r2.delta);
    CHECK(r.pivot == r2.pivot);
    CHECK(r.boot == r2.boot);
}
