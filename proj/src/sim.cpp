#include "semibmd/sim.hpp"

#include <bit>
#include <cmath>
#include <ostream>
#include <thread>

#include "semibmd/bmd.hpp"
#include "semibmd/bmdl.hpp"
#include "semibmd/errors.hpp"

namespace semibmd {

namespace {

std::uint32_t lo32(std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); }
std::uint32_t hi32(std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); }

double prop_se(double p, int r) { return r > 0 ? std::sqrt(p * (1.0 - p) / r) : 0.0; }

template <class T>
T required(const nlohmann::json& j, const char* key) {
    if (!j.contains(key)) throw Error(ErrorKind::ConfigError, std::string("missing field: ") + key);
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw Error(ErrorKind::ConfigError, std::string("invalid value for field: ") + key);
    }
}

template <class T>
T optional_field(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw Error(ErrorKind::ConfigError, std::string("invalid value for field: ") + key);
    }
}

}  // namespace

void SimConfig::validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorKind::ConfigError, msg); };
    if (n_grid.empty()) fail("n_grid must not be empty");
    if (s_grid.empty()) fail("s_grid must not be empty");
    if (sigma_grid.empty()) fail("sigma_grid must not be empty");
    for (int n : n_grid) {
        if (n < 1) fail("n_grid values must be positive");
    }
    for (double s : s_grid) {
        if (!(s > 0.0) || !std::isfinite(s)) fail("s_grid values must be positive");
    }
    for (double s : sigma_grid) {
        if (!(s > 0.0) || !std::isfinite(s)) fail("sigma_grid values must be positive");
    }
    if (replicates < 1) fail("replicates must be at least 1");
    if (boot_M < 40) fail("boot_M must be at least 40");
    if (basis_count < 4) fail("basis_count must be at least 4");
    if (threads < 1) fail("threads must be at least 1");
    try {
        BmdConfig{0.0, std::nullopt, p0, p_plus}.validate();
    } catch (const Error& e) {
        fail(e.what());
    }
}

DoseResponseData simulate_dataset(int n, double s, double sigma, Rng& rng) {
    if (n < 1 || !(s > 0.0) || !(sigma >= 0.0)) {
        throw Error(ErrorKind::InvalidArgument, "simulate_dataset: need n >= 1, s > 0, sigma >= 0");
    }
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal;
    DoseResponseData d;
    d.x.resize(n);
    d.y.resize(n);
    d.z.resize(n, 0);
    for (int i = 0; i < n; ++i) {
        d.x[i] = unif(rng);
        const double eps = normal(rng);
        d.y[i] = std::exp(-s * d.x[i]) + sigma * eps;
    }
    return d;
}

double true_bmd(double s, double sigma, double p0, double p_plus) {
    const double sc = sigma * c_const(p0, p_plus);
    if (!(sc < 1.0)) throw Error(ErrorKind::NoTrueBmd, "sigma * c >= 1: the true curve never drops far enough");
    return -std::log1p(-sc) / s;
}

Rng replicate_rng(std::uint64_t seed, int n, double s, double sigma, int r) {
    const auto sb = std::bit_cast<std::uint64_t>(s);
    const auto gb = std::bit_cast<std::uint64_t>(sigma);
    std::seed_seq seq{lo32(seed), hi32(seed), static_cast<std::uint32_t>(n), lo32(sb), hi32(sb),
                      lo32(gb),   hi32(gb),   static_cast<std::uint32_t>(r)};
    return Rng(seq);
}

ReplicateOutcome run_replicate(const SimConfig& cfg, int n, double s, double sigma, int r) {
    ReplicateOutcome out;
    out.xb_true = true_bmd(s, sigma, cfg.p0, cfg.p_plus);
    Rng rng = replicate_rng(cfg.seed, n, s, sigma, r);
    const DoseResponseData data = simulate_dataset(n, s, sigma, rng);
    const std::uint64_t bmdl_seed = rng();

    FitConfig fc;
    fc.basis_count = cfg.basis_count;
    fc.exposure_lower = 0.0;
    BmdConfig bc;
    bc.p0 = cfg.p0;
    bc.p_plus = cfg.p_plus;
    try {
        const FittedModel model = fit(data, fc);
        const BmdEstimate est = estimate_bmd(model, bc);
        BmdlOptions bo;
        bo.draws = cfg.boot_M;
        bo.seed = bmdl_seed;
        bo.threads = 1;
        const BmdlReport rep = compute_bmdls(model, est, bc, bo);
        out.converged = true;
        out.xb_hat = est.xb_hat;
        out.delta = rep.delta;
        out.delta_below_x0 = rep.delta_below_x0;
        out.pivot = rep.pivot;
        out.boot = rep.boot;
        out.time_delta = rep.time_delta;
        out.time_pivot = rep.time_pivot;
        out.time_boot = rep.time_boot;
        out.pivot_sign_changes = rep.pivot_sign_changes;
    } catch (const Error& e) {
        out.converged = false;
        out.failure = std::string(to_string(e.kind())) + ": " + e.what();
    }
    return out;
}

std::vector<ReplicateOutcome> run_cell(const SimConfig& cfg, int n, double s, double sigma) {
    std::vector<ReplicateOutcome> reps(static_cast<std::size_t>(cfg.replicates));
    const int threads = std::max(1, std::min(cfg.threads, cfg.replicates));
    if (threads == 1) {
        for (int r = 0; r < cfg.replicates; ++r) reps[r] = run_replicate(cfg, n, s, sigma, r);
        return reps;
    }
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            for (int r = t; r < cfg.replicates; r += threads) reps[r] = run_replicate(cfg, n, s, sigma, r);
        });
    }
    for (auto& th : pool) th.join();
    return reps;
}

bool lower_limit_covers(double bmdl, double truth) { return bmdl <= truth; }

SimResultRow summarize_cell(int n, double s, double sigma, const std::vector<ReplicateOutcome>& reps,
                            const CoverageRule& covers) {
    SimResultRow row;
    row.n = n;
    row.s = s;
    row.sigma = sigma;
    row.replicates = static_cast<int>(reps.size());

    double bias_sum = 0.0, bias_sq = 0.0;
    int cov_d = 0, cov_p = 0, cov_b = 0, below = 0;
    double ratio_p = 0.0, ratio_b = 0.0;
    for (const auto& r : reps) {
        if (!r.converged) continue;
        ++row.usable;
        const double b = r.xb_hat - r.xb_true;
        bias_sum += b;
        bias_sq += b * b;
        cov_d += covers(r.delta, r.xb_true) ? 1 : 0;
        cov_p += covers(r.pivot, r.xb_true) ? 1 : 0;
        cov_b += covers(r.boot, r.xb_true) ? 1 : 0;
        below += r.delta_below_x0 ? 1 : 0;
        if (r.time_delta > 0.0) {
            ratio_p += r.time_pivot / r.time_delta;
            ratio_b += r.time_boot / r.time_delta;
        }
    }
    const int u = row.usable;
    row.pct_nonconverged = row.replicates > 0 ? 1.0 - static_cast<double>(u) / row.replicates : 0.0;
    row.pct_nonconverged_se = prop_se(row.pct_nonconverged, row.replicates);
    if (u == 0) return row;

    row.ebias = bias_sum / u;
    if (u > 1) {
        const double var = std::max(0.0, (bias_sq - u * row.ebias * row.ebias) / (u - 1));
        row.ebias_se = std::sqrt(var / u);
    }
    row.ecp_delta = static_cast<double>(cov_d) / u;
    row.ecp_pivot = static_cast<double>(cov_p) / u;
    row.ecp_boot = static_cast<double>(cov_b) / u;
    row.pct_delta_below_x0 = static_cast<double>(below) / u;
    row.ecp_delta_se = prop_se(row.ecp_delta, u);
    row.ecp_pivot_se = prop_se(row.ecp_pivot, u);
    row.ecp_boot_se = prop_se(row.ecp_boot, u);
    row.pct_delta_below_x0_se = prop_se(row.pct_delta_below_x0, u);
    row.time_ratio_pivot = ratio_p / u;
    row.time_ratio_boot = ratio_b / u;
    return row;
}

std::vector<SimResultRow> run_study(const SimConfig& cfg) {
    cfg.validate();
    std::vector<SimResultRow> rows;
    for (int n : cfg.n_grid) {
        for (double s : cfg.s_grid) {
            for (double sigma : cfg.sigma_grid) {
                SimResultRow row;
                try {
                    row = summarize_cell(n, s, sigma, run_cell(cfg, n, s, sigma));
                } catch (const Error& e) {
                    if (e.kind() != ErrorKind::NoTrueBmd) throw;
                    // No finite truth: every replicate is non-convergent by definition.
                    row.n = n;
                    row.s = s;
                    row.sigma = sigma;
                    row.replicates = cfg.replicates;
                    row.pct_nonconverged = 1.0;
                }
                rows.push_back(row);
            }
        }
    }
    return rows;
}

SimConfig sim_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(ErrorKind::ConfigError, "config must be an object");
    SimConfig c;
    c.n_grid = required<std::vector<int>>(j, "n_grid");
    c.s_grid = required<std::vector<double>>(j, "s_grid");
    c.sigma_grid = required<std::vector<double>>(j, "sigma_grid");
    c.replicates = required<int>(j, "replicates");
    c.boot_M = required<int>(j, "boot_M");
    c.p0 = required<double>(j, "p0");
    c.p_plus = required<double>(j, "p_plus");
    c.seed = required<std::uint64_t>(j, "seed");
    c.basis_count = optional_field<int>(j, "basis_count", 20);
    c.threads = optional_field<int>(j, "threads", 1);
    c.validate();
    return c;
}

nlohmann::json to_json(const SimResultRow& r) {
    return nlohmann::json{{"n", r.n},
                          {"s", r.s},
                          {"sigma", r.sigma},
                          {"ebias", r.ebias},
                          {"ebias_se", r.ebias_se},
                          {"ecp_delta", r.ecp_delta},
                          {"ecp_delta_se", r.ecp_delta_se},
                          {"ecp_pivot", r.ecp_pivot},
                          {"ecp_pivot_se", r.ecp_pivot_se},
                          {"ecp_boot", r.ecp_boot},
                          {"ecp_boot_se", r.ecp_boot_se},
                          {"pct_nonconverged", r.pct_nonconverged},
                          {"pct_nonconverged_se", r.pct_nonconverged_se},
                          {"pct_delta_below_x0", r.pct_delta_below_x0},
                          {"pct_delta_below_x0_se", r.pct_delta_below_x0_se},
                          {"time_ratio_pivot", r.time_ratio_pivot},
                          {"time_ratio_boot", r.time_ratio_boot},
                          {"replicates", r.replicates},
                          {"usable", r.usable}};
}

nlohmann::json study_summary(const SimConfig& cfg, const std::vector<SimResultRow>& rows) {
    nlohmann::json j;
    j["config"] = {{"n_grid", cfg.n_grid},         {"s_grid", cfg.s_grid}, {"sigma_grid", cfg.sigma_grid},
                   {"replicates", cfg.replicates}, {"boot_M", cfg.boot_M}, {"p0", cfg.p0},
                   {"p_plus", cfg.p_plus},         {"seed", cfg.seed},     {"basis_count", cfg.basis_count}};
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) j["rows"].push_back(to_json(r));
    return j;
}

void write_table(std::ostream& os, const std::vector<SimResultRow>& rows) {
    static const char* header =
        "n,s,sigma,ebias,ebias_se,ecp_delta,ecp_delta_se,ecp_pivot,ecp_pivot_se,ecp_boot,ecp_boot_se,"
        "pct_nonconverged,pct_nonconverged_se,pct_delta_below_x0,pct_delta_below_x0_se,"
        "time_ratio_pivot,time_ratio_boot,replicates,usable";
    os << header << '\n';
    const auto old = os.precision(17);
    for (const auto& r : rows) {
        os << r.n << ',' << r.s << ',' << r.sigma << ',' << r.ebias << ',' << r.ebias_se << ',' << r.ecp_delta
           << ',' << r.ecp_delta_se << ',' << r.ecp_pivot << ',' << r.ecp_pivot_se << ',' << r.ecp_boot << ','
           << r.ecp_boot_se << ',' << r.pct_nonconverged << ',' << r.pct_nonconverged_se << ','
           << r.pct_delta_below_x0 << ',' << r.pct_delta_below_x0_se << ',' << r.time_ratio_pivot << ','
           << r.time_ratio_boot << ',' << r.replicates << ',' << r.usable << '\n';
    }
    os.precision(old);
}

}  // namespace semibmd
