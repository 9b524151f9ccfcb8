#include <cmath>
#include <numbers>
#include <random>

#include <doctest.h>

#include "semibmd/errors.hpp"
#include "semibmd/model.hpp"
#include "semibmd/sim.hpp"

#include "oracles.hpp"

using namespace semibmd;
using namespace semibmd::testing;

namespace {

// l written out from its definition, dense penalty form.
double nll_oracle(const Eigen::VectorXd& psi, const Eigen::VectorXd& phi, const Design& d) {
    const int L = d.basis_count();
    const double n = d.n();
    const Eigen::VectorXd beta = psi.segment(1, L);
    const Eigen::VectorXd bc = constrained_weights(beta, d.link);
    Eigen::VectorXd fit = Eigen::VectorXd::Constant(d.n(), psi[0]) + d.B * bc;
    if (d.m() > 0) fit += d.Z * psi.tail(static_cast<Eigen::Index>(d.m()) * L);
    double rss = 0.0;
    for (int i = 0; i < d.n(); ++i) rss += (d.data.y[i] - fit[i]) * (d.data.y[i] - fit[i]);
    double v = 0.5 * std::exp(phi[0]) * rss - 0.5 * n * phi[0] + 0.5 * n * std::log(2.0 * std::numbers::pi);
    v += std::exp(phi[1]) * beta.dot(d.penalty[0] * beta) + d.ridge * beta.squaredNorm();
    for (int j = 0; j < d.m(); ++j) {
        const Eigen::VectorXd g = psi.segment(1 + L + j * L, L);
        v += std::exp(phi[2 + j]) * g.dot(d.penalty[static_cast<std::size_t>(j) + 1] * g) + d.ridge * g.squaredNorm();
    }
    return v;
}

}  // namespace

TEST_CASE("reparameterize") {
    const Eigen::VectorXd a = reparameterize(Eigen::Vector3d(0.0, 0.0, 0.0));
    CHECK(a[0] == 0.0);
    CHECK(a[1] == doctest::Approx(-1.0));
    CHECK(a[2] == doctest::Approx(-2.0));
    const Eigen::VectorXd one = reparameterize(Eigen::VectorXd::Constant(1, 5.0));
    CHECK(one[0] == 5.0);
    const Eigen::VectorXd b = reparameterize(Eigen::Vector3d(1.0, std::log(2.0), std::log(3.0)));
    CHECK(b[1] == doctest::Approx(-1.0).epsilon(1e-14));
    CHECK(b[2] == doctest::Approx(-4.0).epsilon(1e-14));

    Rng rng(1);
    for (int rep = 0; rep < 100; ++rep) {
        const Eigen::VectorXd w = reparameterize(random_vector(rng, 15, 3.0));
        for (int i = 1; i < 15; ++i) CHECK(w[i] < w[i - 1]);
    }
}

TEST_CASE("design matrices") {
    const auto data = with_covariate(150, 2);
    const Design d = build_design(data, FitConfig{.basis_count = 8});
    CHECK(d.B.rows() == 150);
    CHECK(d.B.cols() == 8);
    CHECK(d.Z.cols() == 8);
    for (int i = 0; i < 150; ++i) {
        CHECK(d.B.row(i).sum() == doctest::Approx(1.0).epsilon(1e-13));
        const Eigen::VectorXd b = eval_basis(data.x[i], d.exposure_knots);
        CHECK((d.B.row(i).transpose() - b).cwiseAbs().maxCoeff() == 0.0);
    }

    Rng rng(3);
    auto sim = simulate_dataset(100, 1.0, 0.1, rng);
    const Design d0 = build_design(sim, FitConfig{.basis_count = 8});
    CHECK(d0.Z.cols() == 0);
    CHECK(d0.dim_psi() == 9);
    CHECK(d0.dim_phi() == 2);

    sim.x.setConstant(0.5);
    try {
        (void)build_design(sim);
        FAIL("expected DegenerateKnots");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::DegenerateKnots);
    }
}

TEST_CASE("penalized nll matches the formula") {
    const auto data = with_covariate(120, 4);
    const Design d = build_design(data, FitConfig{.basis_count = 7});
    const PenalizedObjective obj(d);
    Rng rng(5);
    for (int rep = 0; rep < 20; ++rep) {
        const Eigen::VectorXd psi = random_vector(rng, d.dim_psi(), 1.0);
        const Eigen::VectorXd phi = random_vector(rng, d.dim_phi(), 1.0);
        const double want = nll_oracle(psi, phi, d);
        CHECK(obj.value(psi, phi) == doctest::Approx(want).epsilon(1e-12));
    }

    SUBCASE("doubling lambda adds one more penalty") {
        const Eigen::VectorXd psi = random_vector(rng, d.dim_psi(), 1.0);
        Eigen::VectorXd phi = random_vector(rng, d.dim_phi(), 1.0);
        const double v1 = obj.value(psi, phi);
        const Eigen::VectorXd beta = psi.segment(1, 7);
        const double added = std::exp(phi[1]) * beta.dot(d.penalty[0] * beta);
        phi[1] += std::log(2.0);
        CHECK(obj.value(psi, phi) - v1 == doctest::Approx(added).epsilon(1e-9));
    }

    SUBCASE("perfect fit without penalties") {
        Design dz = d;
        dz.ridge = 0.0;
        const Eigen::VectorXd psi = random_vector(rng, d.dim_psi(), 1.0);
        Eigen::VectorXd theta = psi;
        theta.segment(1, 7) = reparameterize(psi.segment(1, 7));
        dz.data.y = dz.X * theta;
        Eigen::VectorXd phi(3);
        phi << 0.7, -700.0, -700.0;
        const double n = dz.n();
        CHECK(PenalizedObjective(dz).value(psi, phi) ==
              doctest::Approx(-0.5 * n * 0.7 + 0.5 * n * std::log(2.0 * std::numbers::pi)).epsilon(1e-12));
    }
}

TEST_CASE("gradient and Hessian against central differences") {
    const auto data = with_covariate(200, 6);
    const Design d = build_design(data, FitConfig{.basis_count = 8});
    const PenalizedObjective obj(d);
    Rng rng(7);
    const double h = 1e-5;
    for (int rep = 0; rep < 20; ++rep) {
        const Eigen::VectorXd psi = random_vector(rng, d.dim_psi(), 0.7);
        const Eigen::VectorXd phi = random_vector(rng, d.dim_phi(), 1.0);
        const auto ev = obj.evaluate(psi, phi);
        double gerr = 0.0, herr = 0.0;
        for (int i = 0; i < d.dim_psi(); ++i) {
            Eigen::VectorXd p = psi, m = psi;
            p[i] += h;
            m[i] -= h;
            const double fd = (obj.value(p, phi) - obj.value(m, phi)) / (2 * h);
            gerr = std::max(gerr, std::abs(fd - ev.gradient[i]) / std::max(1.0, std::abs(fd)));
            const Eigen::VectorXd fdh = (obj.evaluate(p, phi, false).gradient - obj.evaluate(m, phi, false).gradient) / (2 * h);
            for (int j = 0; j < d.dim_psi(); ++j) {
                herr = std::max(herr, std::abs(fdh[j] - ev.hessian(j, i)) / std::max(1.0, std::abs(fdh[j])));
            }
        }
        CHECK(gerr <= 1e-5);
        CHECK(herr <= 1e-5);
    }
}

TEST_CASE("inner optimum on the quadratic special case") {
    Rng rng(8);
    const auto data = simulate_dataset(150, 2.0, 0.2, rng);
    FitConfig cfg{.basis_count = 8};
    cfg.link = MonotoneLink::Identity;
    const Design d = build_design(data, cfg);
    Eigen::VectorXd phi(2);
    phi << 3.0, -1.0;
    const auto g = gaussian_oracle(phi, d);
    const auto inner = inner_opt(phi, d, Eigen::VectorXd::Zero(d.dim_psi()), cfg);
    // the mode is weakly determined along the confounded direction; compare fits
    const Eigen::VectorXd fit = d.X * inner.psi;
    const Eigen::VectorXd want = d.X * g.mode;
    CHECK((fit - want).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(inner.grad_norm <= 1e-8);
    CHECK(inner.log_det == doctest::Approx(g.log_det).epsilon(1e-12));
    // the sampling factor is the plain Cholesky of H
    CHECK((inner.chol * inner.chol.transpose() - inner.hessian).cwiseAbs().maxCoeff() <=
          1e-12 * inner.hessian.cwiseAbs().maxCoeff());
}

TEST_CASE("inner optimum with the monotone link") {
    Rng rng(9);
    const auto data = simulate_dataset(300, 3.0, 0.1, rng);
    const Design d = build_design(data, FitConfig{.basis_count = 10});
    Eigen::VectorXd phi(2);
    phi << 2.0 * std::log(10.0), 0.0;
    const auto inner = inner_opt(phi, d, initial_params(d).psi());
    CHECK(inner.grad_norm <= 1e-8);
    CHECK_FALSE(inner.ridge_added);
}

TEST_CASE("laml equals the Gaussian evidence when l is quadratic") {
    const auto data = with_covariate(160, 10);
    FitConfig cfg{.basis_count = 7};
    cfg.link = MonotoneLink::Identity;
    const Design d = build_design(data, cfg);
    Rng rng(11);
    for (int rep = 0; rep < 6; ++rep) {
        Eigen::VectorXd phi = random_vector(rng, d.dim_phi(), 3.0);
        phi[0] = 2.0 + rep;
        const double evidence = gaussian_oracle(phi, d).log_evidence;
        const double got = laml(phi, d, Eigen::VectorXd::Zero(d.dim_psi()), cfg);
        CHECK(std::abs(got - evidence) <= 1e-8 * std::max(1.0, std::abs(evidence)));
    }
}

TEST_CASE("outer objective has a single interior maximum in lambda") {
    Rng rng(12);
    const auto data = simulate_dataset(200, 2.0, 0.2, rng);
    FitConfig cfg{.basis_count = 10};
    cfg.link = MonotoneLink::Identity;
    const Design d = build_design(data, cfg);
    Eigen::VectorXd phi(2);
    phi[0] = -2.0 * std::log(0.2);
    std::vector<double> v;
    for (double ll = -12.0; ll <= 16.0; ll += 0.5) {
        phi[1] = ll;
        v.push_back(laml(phi, d, Eigen::VectorXd::Zero(d.dim_psi()), cfg) + penalty_log_normalizer(phi, d));
    }
    int turns = 0;
    for (std::size_t i = 2; i < v.size(); ++i) {
        if ((v[i] - v[i - 1]) * (v[i - 1] - v[i - 2]) < 0.0) ++turns;
    }
    CHECK(turns == 1);
    const auto top = std::max_element(v.begin(), v.end()) - v.begin();
    CHECK(top > 0);
    CHECK(top < static_cast<long>(v.size()) - 1);
}

TEST_CASE("fit recovers sigma and a decreasing curve") {
    Rng rng(13);
    const auto data = simulate_dataset(1000, 5.0, 0.1, rng);
    const FittedModel m = fit(data);
    CHECK(m.sigma_hat == doctest::Approx(0.1).epsilon(0.1));
    double prev = m.f_hat(m.exposure_knots().lower());
    for (int i = 1; i < 1000; ++i) {
        const double x = m.exposure_knots().lower() + (m.exposure_knots().upper() - m.exposure_knots().lower()) * i / 999.0;
        const double f = m.f_hat(x);
        CHECK(f < prev);
        prev = f;
    }
    // centering
    double s = 0.0;
    for (int i = 0; i < data.n(); ++i) s += m.f_hat(data.x[i]);
    CHECK(std::abs(s / data.n()) <= 1e-10);
}

TEST_CASE("fit with a covariate smooth") {
    const auto data = with_covariate(400, 14);
    const FittedModel m = fit(data, FitConfig{.basis_count = 10});
    CHECK(m.sigma_hat == doctest::Approx(0.2).epsilon(0.15));
    // g(z) = 0.3 sin(3z) up to a constant
    const double g0 = m.g_hat(0, 0.1) - m.g_hat(0, 0.9);
    CHECK(g0 == doctest::Approx(0.3 * (std::sin(0.3) - std::sin(2.7))).epsilon(0.2));
}

TEST_CASE("duplicated rows give the same curve at matched smoothing") {
    // Doubling the data doubles the data term; doubling lambda keeps psi_hat.
    Rng rng(15);
    const auto data = simulate_dataset(150, 3.0, 0.1, rng);
    DoseResponseData twice;
    twice.x.resize(300);
    twice.y.resize(300);
    twice.z.resize(300, 0);
    twice.x << data.x, data.x;
    twice.y << data.y, data.y;
    const Design d1 = build_design(data, FitConfig{.basis_count = 10});
    const Design d2 = build_design(twice, FitConfig{.basis_count = 10});
    Eigen::VectorXd phi(2);
    phi << 4.0, 1.0;
    const auto a = inner_opt(phi, d1, initial_params(d1).psi());
    Eigen::VectorXd phi2 = phi;
    phi2[1] += std::log(2.0);
    // penalties are normalized by |B^T B|, which also doubles
    const double ratio = d2.penalty[0].norm() / d1.penalty[0].norm();
    phi2[1] -= std::log(ratio);
    const auto b = inner_opt(phi2, d2, initial_params(d2).psi());
    const Eigen::VectorXd ca = reparameterize(a.psi.segment(1, 10));
    const Eigen::VectorXd cb = reparameterize(b.psi.segment(1, 10));
    double worst = 0.0;
    for (int i = 0; i <= 1000; ++i) {
        const double x = d1.exposure_knots.lower() + (d1.exposure_knots.upper() - d1.exposure_knots.lower()) * i / 1000.0;
        const double fa = a.psi[0] + de_boor(x, ca, d1.exposure_knots);
        const double fb = b.psi[0] + de_boor(x, cb, d2.exposure_knots);
        worst = std::max(worst, std::abs(fa - fb));
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("posterior sampler") {
    Rng rng(16);
    const auto data = simulate_dataset(300, 2.0, 0.2, rng);
    const FittedModel m = fit(data, FitConfig{.basis_count = 6});
    const Eigen::Index D = m.chol.rows();
    REQUIRE(D <= 10);
    const int M = 100000;
    Rng r1(99);
    const auto draws = posterior_sample(m, M, r1);
    const Eigen::MatrixXd Hinv = m.hessian.inverse();
    const Eigen::VectorXd psi_hat = m.params.psi();

    const Eigen::VectorXd mean = draws.psi.rowwise().mean();
    for (Eigen::Index i = 0; i < D; ++i) {
        CHECK(std::abs(mean[i] - psi_hat[i]) <= 3.0 * std::sqrt(Hinv(i, i) / M));
    }
    const Eigen::MatrixXd c = draws.psi.colwise() - mean;
    const Eigen::MatrixXd cov = c * c.transpose() / (M - 1.0);
    for (Eigen::Index i = 0; i < D; ++i) {
        for (Eigen::Index j = 0; j < D; ++j) {
            const double se = std::sqrt((Hinv(i, i) * Hinv(j, j) + Hinv(i, j) * Hinv(i, j)) / M);
            CHECK(std::abs(cov(i, j) - Hinv(i, j)) <= 5.0 * se);
        }
    }
    CHECK((draws.beta_c.col(7) - reparameterize(draws.psi.col(7).segment(1, 6))).cwiseAbs().maxCoeff() == 0.0);

    Rng r2(99), r3(99);
    CHECK(posterior_sample(m, 50, r2).psi == posterior_sample(m, 50, r3).psi);
    try {
        (void)posterior_sample(m, 0, r2);
        FAIL("expected InvalidArgument");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::InvalidArgument);
    }
}
