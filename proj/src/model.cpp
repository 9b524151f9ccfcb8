#include "semibmd/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "semibmd/errors.hpp"

namespace semibmd {

namespace {

constexpr double kExpClamp = 700.0;
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

double clamped_exp(double v) { return std::exp(std::clamp(v, -kExpClamp, kExpClamp)); }

// Lower Cholesky factor of h, adding the smallest diagonal shift (from a 1e-12
// relative start, growing by 10x) that makes it positive definite.
struct Factor {
    Eigen::MatrixXd lower;
    double shift = 0.0;
};

std::optional<Factor> factor_with_shift(const Eigen::MatrixXd& h, bool allow_shift) {
    Eigen::LLT<Eigen::MatrixXd> llt(h);
    if (llt.info() == Eigen::Success) return Factor{llt.matrixL(), 0.0};
    if (!allow_shift) return std::nullopt;
    const double scale = std::max(1.0, h.diagonal().cwiseAbs().maxCoeff());
    for (double mu = 1e-12 * scale; mu < 1e12 * scale; mu *= 10.0) {
        Eigen::MatrixXd shifted = h;
        shifted.diagonal().array() += mu;
        llt.compute(shifted);
        if (llt.info() == Eigen::Success) return Factor{llt.matrixL(), mu};
    }
    return std::nullopt;
}

}  // namespace

Rng stream_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return Rng(seq);
}

void DoseResponseData::validate() const {
    if (x.size() != y.size()) throw Error(ErrorKind::DataError, "x and y have different lengths");
    if (z.cols() > 0 && z.rows() != y.size()) {
        throw Error(ErrorKind::DataError, "covariate matrix row count differs from response length");
    }
    if (y.size() == 0) throw Error(ErrorKind::DataError, "empty data");
    if (!y.allFinite() || !x.allFinite() || !z.allFinite()) {
        throw Error(ErrorKind::DataError, "data contain non-finite values");
    }
}

Eigen::VectorXd ModelParams::psi() const {
    Eigen::VectorXd out(1 + beta.size() + gamma.size());
    out << alpha, beta, gamma;
    return out;
}

Eigen::VectorXd ModelParams::phi() const {
    Eigen::VectorXd out(1 + loglambda.size());
    out << tau, loglambda;
    return out;
}

void ModelParams::set_psi(const Eigen::VectorXd& psi) {
    alpha = psi[0];
    beta = psi.segment(1, beta.size());
    gamma = psi.segment(1 + beta.size(), gamma.size());
}

void ModelParams::set_phi(const Eigen::VectorXd& phi) {
    tau = phi[0];
    loglambda = phi.tail(phi.size() - 1);
}

Eigen::VectorXd reparameterize(const Eigen::VectorXd& beta) {
    Eigen::VectorXd out(beta.size());
    if (beta.size() == 0) return out;
    out[0] = beta[0];
    for (Eigen::Index l = 1; l < beta.size(); ++l) out[l] = out[l - 1] - clamped_exp(beta[l]);
    return out;
}

Eigen::VectorXd constrained_weights(const Eigen::VectorXd& beta, MonotoneLink link) {
    return link == MonotoneLink::Exponential ? reparameterize(beta) : beta;
}

namespace {

// Orthonormal basis of coefficient space for one smooth: constant and linear
// (the exact null space of S), then the range eigenvectors of S.
Eigen::MatrixXd smooth_basis(const Eigen::MatrixXd& S, const KnotVector& kv) {
    const Eigen::Index L = S.rows();
    Eigen::MatrixXd U(L, L);
    U.col(0).setConstant(1.0 / std::sqrt(static_cast<double>(L)));
    Eigen::VectorXd g = kv.greville();
    g.array() -= g.mean();
    U.col(1) = g.normalized();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
    for (Eigen::Index c = 2; c < L; ++c) {
        Eigen::VectorXd v = es.eigenvectors().col(c);  // ascending, so skip the two null ones
        for (int pass = 0; pass < 2; ++pass) {
            for (Eigen::Index q = 0; q < c; ++q) v -= U.col(q).dot(v) * U.col(q);
        }
        U.col(c) = v.normalized();
    }
    return U;
}

Eigen::MatrixXd logdet_basis(const Design& d) {
    const int L = d.basis_count();
    const int D = d.dim_psi();
    const double rl = std::sqrt(static_cast<double>(L));
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(D, D);
    W(0, 0) = 1.0;
    for (int k = 0; k <= d.m(); ++k) {
        const KnotVector& kv = k == 0 ? d.exposure_knots : d.covariate_knots[static_cast<std::size_t>(k) - 1];
        W.block(1 + k * L, 1 + k * L, L, L) = smooth_basis(d.penalty[static_cast<std::size_t>(k)], kv);
    }
    // Shifting alpha against the level of a smooth leaves the fit unchanged.
    // For the exponential link the level of f is beta_1.
    if (d.link == MonotoneLink::Exponential) {
        W(1, 0) = -1.0;
    } else {
        W.block(1, 0, L, 1).setConstant(-1.0);
    }
    for (int j = 0; j < d.m(); ++j) W(0, 1 + (j + 1) * L) = -1.0 / rl;
    return W;
}

}  // namespace

Design build_design(const DoseResponseData& data, const FitConfig& config) {
    data.validate();
    const int L = config.basis_count;
    const auto xs = std::span<const double>(data.x.data(), static_cast<std::size_t>(data.x.size()));
    const double lo = config.exposure_lower.value_or(data.x.minCoeff());
    const double hi = config.exposure_upper.value_or(data.x.maxCoeff());
    if (!(data.x.maxCoeff() > data.x.minCoeff())) {
        throw Error(ErrorKind::DegenerateKnots, "exposure column is constant");
    }
    if (data.x.minCoeff() < lo || data.x.maxCoeff() > hi) {
        throw Error(ErrorKind::InvalidArgument, "exposure values fall outside the requested knot range");
    }
    KnotVector knots = config.exposure_knots == KnotPlacement::Uniform ? make_uniform_knots(lo, hi, L, 4)
                                                                       : make_knots(xs, L, 4, lo, hi);
    Design d{.exposure_knots = std::move(knots), .covariate_knots = {}, .B = {}, .Z = {}, .penalty = {},
             .penalty_root = {}, .penalty_rank = {}, .logdet_basis = {}, .exposure_basis_mean = {},
             .covariate_basis_mean = {}, .X = {}, .gram = {}, .data = data, .link = config.link,
             .ridge = config.ridge};
    const int n = static_cast<int>(data.n());
    const int m = static_cast<int>(data.m());
    d.B = basis_matrix(xs, d.exposure_knots);
    d.penalty_root.push_back(penalty_root(d.exposure_knots));
    d.penalty.push_back(penalty_matrix(d.exposure_knots));

    d.Z.resize(n, static_cast<Eigen::Index>(m) * L);
    d.covariate_basis_mean.resize(L, m);
    for (int j = 0; j < m; ++j) {
        const Eigen::VectorXd col = data.z.col(j);
        if (!(col.maxCoeff() > col.minCoeff())) {
            throw Error(ErrorKind::DegenerateKnots, "covariate column " + std::to_string(j) + " is constant");
        }
        const auto zs = std::span<const double>(col.data(), static_cast<std::size_t>(col.size()));
        d.covariate_knots.push_back(make_knots(zs, L, 4));
        d.Z.middleCols(static_cast<Eigen::Index>(j) * L, L) = basis_matrix(zs, d.covariate_knots.back());
        d.penalty_root.push_back(penalty_root(d.covariate_knots.back()));
        d.penalty.push_back(penalty_matrix(d.covariate_knots.back()));
        d.covariate_basis_mean.col(j) = d.Z.middleCols(static_cast<Eigen::Index>(j) * L, L).colwise().mean().transpose();
    }
    d.exposure_basis_mean = d.B.colwise().mean().transpose();
    // Scale each penalty to the spectral norm of its basis cross-product so
    // lambda does not depend on the units of the smoothed variable.
    for (std::size_t k = 0; k < d.penalty.size(); ++k) {
        const auto cols = k == 0 ? d.B.leftCols(L) : d.Z.middleCols(static_cast<Eigen::Index>(k - 1) * L, L);
        const Eigen::MatrixXd btb = cols.transpose() * cols;
        const double data_norm = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(btb, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
        const double pen_norm =
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(d.penalty[k], Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
        const double f = data_norm / pen_norm;
        d.penalty[k] *= f;
        d.penalty_root[k] *= std::sqrt(f);
    }
    for (std::size_t k = 0; k < d.penalty.size(); ++k) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(d.penalty[k]);
        const double tol = 1e-9 * es.eigenvalues().cwiseAbs().maxCoeff();
        d.penalty_rank.push_back(static_cast<int>((es.eigenvalues().array() > tol).count()));
    }
    d.logdet_basis = logdet_basis(d);
    const int D = d.dim_psi();
    if (n <= D) {
        throw Error(ErrorKind::DataError, "need more observations (" + std::to_string(n) +
                                              ") than regression parameters (" + std::to_string(D) + ")");
    }
    d.X.resize(n, D);
    d.X.col(0).setOnes();
    d.X.middleCols(1, L) = d.B;
    if (m > 0) d.X.rightCols(static_cast<Eigen::Index>(m) * L) = d.Z;
    d.gram = d.X.transpose() * d.X;
    return d;
}

Eigen::VectorXd PenalizedObjective::linear_coefficients(const Eigen::VectorXd& psi) const {
    const int L = design_.basis_count();
    Eigen::VectorXd theta = psi;
    theta.segment(1, L) = constrained_weights(psi.segment(1, L), design_.link);
    return theta;
}

double PenalizedObjective::value(const Eigen::VectorXd& psi, const Eigen::VectorXd& phi) const {
    return evaluate(psi, phi, false).value;
}

PenalizedObjective::Eval PenalizedObjective::evaluate(const Eigen::VectorXd& psi, const Eigen::VectorXd& phi,
                                                      bool with_hessian) const {
    const Design& d = design_;
    const int L = d.basis_count();
    const int m = d.m();
    const int D = d.dim_psi();
    const double n = d.n();
    const double tau = phi[0];
    const double prec = std::exp(tau);

    const Eigen::VectorXd theta = linear_coefficients(psi);
    const Eigen::VectorXd resid = d.data.y - d.X * theta;
    const double rss = resid.squaredNorm();

    Eval out;
    out.value = 0.5 * prec * rss - 0.5 * n * tau + 0.5 * n * kLog2Pi;

    const Eigen::VectorXd beta = psi.segment(1, L);
    const double lam1 = std::exp(phi[1]);
    const Eigen::VectorXd r1_beta = d.penalty_root[0] * beta;
    const Eigen::VectorXd s1_beta = d.penalty_root[0].transpose() * r1_beta;
    out.value += lam1 * r1_beta.squaredNorm() + d.ridge * beta.squaredNorm();
    std::vector<Eigen::VectorXd> s_gamma;
    for (int j = 0; j < m; ++j) {
        const Eigen::VectorXd g = psi.segment(1 + L + static_cast<Eigen::Index>(j) * L, L);
        const Eigen::MatrixXd& R = d.penalty_root[static_cast<std::size_t>(j) + 1];
        const Eigen::VectorXd rg = R * g;
        s_gamma.push_back(R.transpose() * rg);
        out.value += std::exp(phi[2 + j]) * rg.squaredNorm() + d.ridge * g.squaredNorm();
    }

    // Gradient of the data term in theta, then chain rule through beta_c(beta).
    const Eigen::VectorXd g_theta = -prec * (d.X.transpose() * resid);
    Eigen::MatrixXd jac = Eigen::MatrixXd::Identity(D, D);
    Eigen::VectorXd eb;
    if (d.link == MonotoneLink::Exponential) {
        eb = psi.segment(1, L).unaryExpr([](double v) { return clamped_exp(v); });
        auto J = jac.block(1, 1, L, L);
        J.setZero();
        J.col(0).setOnes();
        for (int k = 1; k < L; ++k) J.col(k).tail(L - k).setConstant(-eb[k]);
    }
    out.gradient = jac.transpose() * g_theta;
    out.gradient.segment(1, L) += 2.0 * lam1 * s1_beta + 2.0 * d.ridge * beta;
    for (int j = 0; j < m; ++j) {
        const Eigen::Index off = 1 + L + static_cast<Eigen::Index>(j) * L;
        out.gradient.segment(off, L) += 2.0 * std::exp(phi[2 + j]) * s_gamma[static_cast<std::size_t>(j)] +
                                        2.0 * d.ridge * psi.segment(off, L);
    }
    if (!with_hessian) return out;

    out.hessian = prec * jac.transpose() * d.gram * jac;
    if (d.link == MonotoneLink::Exponential) {
        // d^2 beta_c,l / d beta_k^2 = -exp(beta_k) for 2 <= k <= l.
        double tail = 0.0;
        for (int k = L - 1; k >= 1; --k) {
            tail += g_theta[1 + k];
            out.hessian(1 + k, 1 + k) -= eb[k] * tail;
        }
    }
    out.hessian.block(1, 1, L, L) += 2.0 * lam1 * d.penalty[0];
    out.hessian.block(1, 1, L, L).diagonal().array() += 2.0 * d.ridge;
    for (int j = 0; j < m; ++j) {
        const Eigen::Index off = 1 + L + static_cast<Eigen::Index>(j) * L;
        out.hessian.block(off, off, L, L) += 2.0 * std::exp(phi[2 + j]) * d.penalty[static_cast<std::size_t>(j) + 1];
        out.hessian.block(off, off, L, L).diagonal().array() += 2.0 * d.ridge;
    }
    out.hessian = 0.5 * (out.hessian + out.hessian.transpose());
    return out;
}

double PenalizedObjective::log_det_hessian(const Eigen::VectorXd& psi, const Eigen::VectorXd& phi, double shift) const {
    const Design& d = design_;
    const int L = d.basis_count();
    const Eigen::MatrixXd& W = d.logdet_basis;
    const double prec = std::exp(phi[0]);

    // J W, with J = d theta / d psi
    Eigen::MatrixXd JW = W;
    Eigen::VectorXd eb;
    if (d.link == MonotoneLink::Exponential) {
        eb = psi.segment(1, L).unaryExpr([](double v) { return clamped_exp(v); });
        for (Eigen::Index c = 0; c < W.cols(); ++c) {
            double acc = W(1, c);
            for (int l = 1; l < L; ++l) {
                acc -= eb[l] * W(1 + l, c);
                JW(1 + l, c) = acc;
            }
        }
    }
    const Eigen::MatrixXd A = d.X * JW;
    Eigen::MatrixXd h = prec * A.transpose() * A;
    for (int k = 0; k <= d.m(); ++k) {
        const auto Wk = W.middleRows(1 + static_cast<Eigen::Index>(k) * L, L);
        const Eigen::MatrixXd RW = d.penalty_root[static_cast<std::size_t>(k)] * Wk;
        h += 2.0 * std::exp(phi[1 + k]) * RW.transpose() * RW + 2.0 * d.ridge * Wk.transpose() * Wk;
    }
    if (d.link == MonotoneLink::Exponential) {
        const Eigen::VectorXd resid = d.data.y - d.X * linear_coefficients(psi);
        const Eigen::VectorXd g_beta = -prec * (d.B.transpose() * resid);
        Eigen::VectorXd curv = Eigen::VectorXd::Zero(L);
        double tail = 0.0;
        for (int k = L - 1; k >= 1; --k) {
            tail += g_beta[k];
            curv[k] = -eb[k] * tail;
        }
        const auto Wb = W.middleRows(1, L);
        h += Wb.transpose() * curv.asDiagonal() * Wb;
    }
    if (shift > 0.0) h += shift * W.transpose() * W;
    h = 0.5 * (h + h.transpose());

    const Eigen::VectorXd scale = h.diagonal().cwiseAbs().cwiseSqrt().cwiseMax(1e-300);
    const Eigen::MatrixXd eq = scale.cwiseInverse().asDiagonal() * h * scale.cwiseInverse().asDiagonal();
    Eigen::LLT<Eigen::MatrixXd> llt(eq);
    if (llt.info() != Eigen::Success) throw Error(ErrorKind::InnerOptFailed, "Hessian at inner optimum cannot be factored");
    const Eigen::MatrixXd lower = llt.matrixL();
    return 2.0 * (lower.diagonal().array().log().sum() + scale.array().log().sum());
}

double penalized_nll(const ModelParams& params, const Design& design) {
    return PenalizedObjective(design).value(params.psi(), params.phi());
}

InnerResult inner_opt(const Eigen::VectorXd& phi, const Design& design, const Eigen::VectorXd& start,
                      const FitConfig& config) {
    if (!start.allFinite() || start.size() != design.dim_psi()) {
        throw Error(ErrorKind::InvalidArgument, "inner_opt: start must be finite with length D");
    }
    if (!phi.allFinite() || phi.size() != design.dim_phi()) {
        throw Error(ErrorKind::InvalidArgument, "inner_opt: phi must be finite with length m + 2");
    }
    const PenalizedObjective obj(design);
    InnerResult res;
    res.psi = start;
    auto ev = obj.evaluate(res.psi, phi);
    bool converged = false;
    for (int it = 0; it < config.max_inner_iter; ++it) {
        res.iterations = it;
        res.grad_norm = ev.gradient.norm();
        if (res.grad_norm <= config.inner_tol) {
            converged = true;
            break;
        }
        const auto fac = factor_with_shift(ev.hessian, true);
        if (!fac) break;
        Eigen::VectorXd step = fac->lower.transpose().triangularView<Eigen::Upper>().solve(
            fac->lower.triangularView<Eigen::Lower>().solve(ev.gradient));
        const double decrement = ev.gradient.dot(step);
        // Within rounding of the optimum the objective can no longer resolve
        // descent and the gradient sits at its noise floor (which grows with
        // lambda); take the full Newton step and stop.
        if (fac->shift == 0.0 && decrement <= 1e-13 * (1.0 + std::abs(ev.value))) {
            res.psi -= step;
            ev = obj.evaluate(res.psi, phi);
            converged = true;
            break;
        }
        bool accepted = false;
        for (double t = 1.0; t > 1e-12; t *= 0.5) {
            const Eigen::VectorXd cand = res.psi - t * step;
            const double v = obj.value(cand, phi);
            if (std::isfinite(v) && v < ev.value) {
                res.psi = cand;
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            converged = decrement <= 1e-10 * (1.0 + std::abs(ev.value));
            break;
        }
        ev = obj.evaluate(res.psi, phi);
    }
    res.grad_norm = ev.gradient.norm();
    if (!converged && res.grad_norm <= config.inner_tol) converged = true;
    if (!converged) {
        std::ostringstream msg;
        msg << "inner Newton did not converge (gradient norm " << res.grad_norm << " after " << res.iterations
            << " iterations)";
        throw Error(ErrorKind::InnerOptFailed, msg.str());
    }
    res.nll = ev.value;
    res.hessian = ev.hessian;
    auto fac = factor_with_shift(res.hessian, true);
    if (!fac) throw Error(ErrorKind::InnerOptFailed, "Hessian at inner optimum cannot be factored");
    res.ridge_added = fac->shift > 0.0;
    res.chol = std::move(fac->lower);
    res.log_det = obj.log_det_hessian(res.psi, phi, fac->shift);
    return res;
}

double laml(const InnerResult& inner, const Design& design) {
    return 0.5 * design.dim_psi() * kLog2Pi - 0.5 * inner.log_det - inner.nll;
}

double laml(const Eigen::VectorXd& phi, const Design& design, const Eigen::VectorXd& start, const FitConfig& config) {
    return laml(inner_opt(phi, design, start, config), design);
}

double penalty_log_normalizer(const Eigen::VectorXd& phi, const Design& design) {
    double out = 0.0;
    for (std::size_t k = 0; k < design.penalty_rank.size(); ++k) out += 0.5 * design.penalty_rank[k] * phi[1 + static_cast<Eigen::Index>(k)];
    return out;
}

ModelParams initial_params(const Design& design) {
    const auto& data = design.data;
    const int L = design.basis_count();
    const int m = design.m();
    const double n = design.n();

    const double xbar = data.x.mean();
    const double ybar = data.y.mean();
    const Eigen::ArrayXd xc = data.x.array() - xbar;
    const double sxx = xc.square().sum();
    double slope = sxx > 0.0 ? (xc * (data.y.array() - ybar)).sum() / sxx : 0.0;
    const double intercept = ybar - slope * xbar;
    const Eigen::ArrayXd resid = data.y.array() - intercept - slope * data.x.array();
    const double sd = std::sqrt(std::max(resid.square().sum() / std::max(1.0, n - 2.0), 1e-12));

    const double range = data.x.maxCoeff() - data.x.minCoeff();
    // Keep the starting trend decreasing: a gentle slope if the data go the other way.
    if (design.link == MonotoneLink::Exponential) slope = std::min(slope, -1e-3 * sd / range);

    const Eigen::VectorXd xi = design.exposure_knots.greville();
    Eigen::VectorXd beta_c = slope * (xi.array() - xbar).matrix();

    ModelParams p;
    p.beta.resize(L);
    if (design.link == MonotoneLink::Exponential) {
        const double floor_step = 1e-6 * std::abs(slope) * range;
        p.beta[0] = beta_c[0];
        for (int l = 1; l < L; ++l) p.beta[l] = std::log(std::max(beta_c[l - 1] - beta_c[l], floor_step));
        beta_c = reparameterize(p.beta);
    } else {
        p.beta = beta_c;
    }
    p.alpha = ybar - design.exposure_basis_mean.dot(beta_c);
    p.gamma = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m) * L);
    p.tau = -2.0 * std::log(sd);
    p.loglambda = Eigen::VectorXd::Zero(m + 1);
    return p;
}

namespace {

// Maximizes laml + penalty_log_normalizer over phi by BFGS with central
// finite-difference gradients, warm-starting every inner solve.
class OuterProblem {
public:
    OuterProblem(const Design& design, const FitConfig& config, Eigen::VectorXd psi0)
        : design_(design), config_(config), cold_(psi0), warm_(std::move(psi0)) {}

    // Negated objective; throws from inner_opt propagate. The exponential link
    // makes the inner problem multimodal, so the warm start alone would make
    // the objective depend on the path taken; the lower of the warm and cold
    // solutions is kept.
    double evaluate(const Eigen::VectorXd& phi, InnerResult* keep = nullptr) {
        std::optional<InnerResult> best;
        std::optional<Error> first_error;
        for (const Eigen::VectorXd* start : {&warm_, &cold_}) {
            if (best && start == &cold_ && warm_ == cold_) break;
            try {
                InnerResult r = inner_opt(phi, design_, *start, config_);
                inner_iterations_ += r.iterations;
                if (!best || r.nll < best->nll) best = std::move(r);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::InnerOptFailed) throw;
                if (!first_error) first_error = e;
            }
        }
        if (!best) throw *first_error;
        const double v = -(laml(*best, design_) + penalty_log_normalizer(phi, design_));
        if (keep) *keep = std::move(*best);
        return v;
    }

    Eigen::VectorXd gradient(const Eigen::VectorXd& phi) {
        Eigen::VectorXd g(phi.size());
        const double h = config_.fd_step;
        for (Eigen::Index i = 0; i < phi.size(); ++i) {
            Eigen::VectorXd up = phi;
            Eigen::VectorXd down = phi;
            up[i] += h;
            down[i] -= h;
            g[i] = (evaluate(up) - evaluate(down)) / (2.0 * h);
        }
        return g;
    }

    Eigen::VectorXd clamp(Eigen::VectorXd phi) const {
        for (Eigen::Index i = 1; i < phi.size(); ++i) {
            phi[i] = std::clamp(phi[i], config_.loglambda_min, config_.loglambda_max);
        }
        return phi;
    }

    // Gradient with components zeroed where a bound blocks descent.
    Eigen::VectorXd projected(const Eigen::VectorXd& phi, Eigen::VectorXd g) const {
        for (Eigen::Index i = 1; i < phi.size(); ++i) {
            if ((phi[i] <= config_.loglambda_min && g[i] > 0.0) || (phi[i] >= config_.loglambda_max && g[i] < 0.0)) {
                g[i] = 0.0;
            }
        }
        return g;
    }

    void set_warm(const Eigen::VectorXd& psi) { warm_ = psi; }
    int inner_iterations() const { return inner_iterations_; }

private:
    const Design& design_;
    const FitConfig& config_;
    Eigen::VectorXd cold_;
    Eigen::VectorXd warm_;
    int inner_iterations_ = 0;
};

// Nelder-Mead on the boxed outer objective, used when the quasi-Newton
// iteration stalls where the objective jumps between inner modes. Returns
// true when the simplex collapses or its values agree to value_tol.
bool nelder_mead(OuterProblem& outer, Eigen::VectorXd& phi, double& f, double value_tol, int max_iter) {
    const Eigen::Index s = phi.size();
    std::vector<Eigen::VectorXd> pts{phi};
    std::vector<double> vals{f};
    auto eval = [&](const Eigen::VectorXd& p) {
        try {
            return outer.evaluate(p);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::InnerOptFailed) throw;
            return std::numeric_limits<double>::infinity();
        }
    };
    for (Eigen::Index i = 0; i < s; ++i) {
        Eigen::VectorXd p = phi;
        p[i] += 0.25;
        p = outer.clamp(p);
        if (p == phi) p[i] -= 0.25;
        pts.push_back(outer.clamp(p));
        vals.push_back(eval(pts.back()));
    }
    std::vector<std::size_t> order(pts.size());
    bool done = false;
    for (int it = 0; it < max_iter && !done; ++it) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
        const std::size_t best = order.front(), worst = order.back(), second = order[order.size() - 2];
        double diameter = 0.0;
        for (const auto& p : pts) diameter = std::max(diameter, (p - pts[best]).cwiseAbs().maxCoeff());
        if (vals[worst] - vals[best] <= value_tol || diameter <= 1e-8) {
            done = true;
            break;
        }
        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(s);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (i != worst) centroid += pts[i];
        }
        centroid /= static_cast<double>(s);
        auto along = [&](double t) { return outer.clamp(centroid + t * (pts[worst] - centroid)); };
        const Eigen::VectorXd xr = along(-1.0);
        const double fr = eval(xr);
        if (fr < vals[best]) {
            const Eigen::VectorXd xe = along(-2.0);
            const double fe = eval(xe);
            if (fe < fr) {
                pts[worst] = xe;
                vals[worst] = fe;
            } else {
                pts[worst] = xr;
                vals[worst] = fr;
            }
        } else if (fr < vals[second]) {
            pts[worst] = xr;
            vals[worst] = fr;
        } else {
            const Eigen::VectorXd xc = fr < vals[worst] ? along(-0.5) : along(0.5);
            const double fc = eval(xc);
            if (fc < std::min(fr, vals[worst])) {
                pts[worst] = xc;
                vals[worst] = fc;
            } else {
                for (std::size_t i = 0; i < pts.size(); ++i) {
                    if (i == best) continue;
                    pts[i] = outer.clamp(pts[best] + 0.5 * (pts[i] - pts[best]));
                    vals[i] = eval(pts[i]);
                }
            }
        }
    }
    const auto best = static_cast<std::size_t>(std::min_element(vals.begin(), vals.end()) - vals.begin());
    if (!std::isfinite(vals[best])) return false;
    phi = pts[best];
    f = vals[best];
    return done;
}

}  // namespace

FittedModel fit(const DoseResponseData& data, const FitConfig& config) {
    auto design = std::make_shared<const Design>(build_design(data, config));
    const Design& d = *design;
    ModelParams init = initial_params(d);

    OuterProblem outer(d, config, init.psi());
    Eigen::VectorXd phi = outer.clamp(init.phi());
    InnerResult inner;
    double f = outer.evaluate(phi, &inner);
    outer.set_warm(inner.psi);
    Eigen::VectorXd g = outer.gradient(phi);
    const Eigen::Index s = phi.size();
    Eigen::MatrixXd hinv = Eigen::MatrixXd::Identity(s, s);

    bool converged = false;
    double last_df = std::numeric_limits<double>::infinity();
    int it = 0;
    for (; it < config.max_outer_iter; ++it) {
        Eigen::VectorXd pg = outer.projected(phi, g);
        Eigen::VectorXd dir = -(hinv * pg);
        for (Eigen::Index i = 0; i < s; ++i) {
            if (pg[i] == 0.0 && g[i] != 0.0) dir[i] = 0.0;
        }
        if (pg.dot(dir) >= 0.0) {
            hinv.setIdentity();
            dir = -pg;
        }
        const double max_step = dir.cwiseAbs().maxCoeff();
        if (max_step > 5.0) dir *= 5.0 / max_step;

        bool accepted = false;
        Eigen::VectorXd phi_new;
        double f_new = f;
        InnerResult inner_new;
        const double slope = pg.dot(dir);
        for (double t = 1.0; t > 1e-10; t *= 0.5) {
            phi_new = outer.clamp(phi + t * dir);
            try {
                f_new = outer.evaluate(phi_new, &inner_new);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::InnerOptFailed) throw;
                continue;
            }
            if (f_new <= f + 1e-4 * t * slope) {
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            // No descent along the quasi-Newton direction: accept if stationary,
            // or if the previous step already moved the objective by less than
            // the value tolerance. The latter is a plateau (large lambda, f in
            // the penalty null space) where finite-difference gradients are
            // dominated by rounding.
            converged = pg.norm() <= 10.0 * config.outer_grad_tol || last_df <= config.outer_value_tol;
            if (!converged && !hinv.isIdentity()) {
                hinv.setIdentity();
                continue;
            }
            break;
        }
        outer.set_warm(inner_new.psi);
        const Eigen::VectorXd g_new = outer.gradient(phi_new);
        const Eigen::VectorXd step = phi_new - phi;
        const Eigen::VectorXd yv = g_new - g;
        const double sy = step.dot(yv);
        if (sy > 1e-12 * step.norm() * yv.norm()) {
            const double rho = 1.0 / sy;
            const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(s, s);
            hinv = (I - rho * step * yv.transpose()) * hinv * (I - rho * yv * step.transpose()) +
                   rho * step * step.transpose();
        }
        const double df = std::abs(f_new - f);
        last_df = df;
        phi = phi_new;
        f = f_new;
        g = g_new;
        inner = std::move(inner_new);
        if (df <= config.outer_value_tol && outer.projected(phi, g).norm() <= config.outer_grad_tol) {
            converged = true;
            ++it;
            break;
        }
    }
    if (!converged) {
        converged = nelder_mead(outer, phi, f, config.outer_value_tol, 20 * config.max_outer_iter);
        if (converged) f = outer.evaluate(phi, &inner);
    }
    if (!converged) {
        std::ostringstream msg;
        msg << "outer optimization did not converge after " << it << " iterations (projected gradient norm "
            << outer.projected(phi, g).norm() << ", phi = " << phi.transpose() << ")";
        throw Error(ErrorKind::FitFailed, msg.str());
    }

    FittedModel out;
    out.design = design;
    out.params = init;
    out.params.set_psi(inner.psi);
    out.params.set_phi(phi);
    out.beta_c = constrained_weights(out.params.beta, d.link);
    out.hessian = inner.hessian;
    out.chol = inner.chol;
    out.hessian_ridge_added = inner.ridge_added;
    out.sigma_hat = std::exp(-0.5 * phi[0]);
    out.log_laml = laml(inner, d);
    out.objective = -f;
    out.outer_iterations = it;
    out.inner_iterations = outer.inner_iterations();

    const int L = d.basis_count();
    out.exposure_center = d.exposure_basis_mean.dot(out.beta_c);
    out.covariate_centers.resize(d.m());
    double shift = out.exposure_center;
    for (int j = 0; j < d.m(); ++j) {
        out.covariate_centers[j] = d.covariate_basis_mean.col(j).dot(out.params.gamma.segment(static_cast<Eigen::Index>(j) * L, L));
        shift += out.covariate_centers[j];
    }
    out.alpha_centered = out.params.alpha + shift;
    return out;
}

double FittedModel::f_hat(double x) const { return de_boor(x, beta_c, design->exposure_knots) - exposure_center; }

double FittedModel::g_hat(int j, double z) const {
    if (j < 0 || j >= design->m()) throw Error(ErrorKind::InvalidArgument, "covariate index out of range");
    const int L = design->basis_count();
    const Eigen::VectorXd w = params.gamma.segment(static_cast<Eigen::Index>(j) * L, L);
    return de_boor(z, w, design->covariate_knots[static_cast<std::size_t>(j)]) - covariate_centers[j];
}

PosteriorDraws posterior_sample(const FittedModel& model, int draws, Rng& rng) {
    if (draws <= 0) throw Error(ErrorKind::InvalidArgument, "posterior_sample: draws must be positive");
    const Eigen::Index D = model.chol.rows();
    const int L = model.design->basis_count();
    std::normal_distribution<double> normal;
    Eigen::MatrixXd z(D, draws);
    for (Eigen::Index j = 0; j < draws; ++j) {
        for (Eigen::Index i = 0; i < D; ++i) z(i, j) = normal(rng);
    }
    PosteriorDraws out;
    out.psi = model.chol.transpose().triangularView<Eigen::Upper>().solve(z);
    out.psi.colwise() += model.params.psi();
    out.beta_c.resize(L, draws);
    for (Eigen::Index j = 0; j < draws; ++j) {
        out.beta_c.col(j) = constrained_weights(out.psi.col(j).segment(1, L), model.design->link);
    }
    return out;
}

}  // namespace semibmd
