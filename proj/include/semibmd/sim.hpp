#pragma once
// Coverage and timing study under f(x) = exp(-s x), x ~ Uniform(0, 1).

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "semibmd/model.hpp"

namespace semibmd {

struct SimConfig {
    std::vector<int> n_grid;
    std::vector<double> s_grid;
    std::vector<double> sigma_grid;
    int replicates = 1;
    int boot_M = 1000;
    double p0 = 0.025;
    double p_plus = 0.01;
    std::uint64_t seed = 0;
    int basis_count = 20;
    int threads = 1;

    void validate() const;  // throws ConfigError
};

struct SimResultRow {
    int n = 0;
    double s = 0.0;
    double sigma = 0.0;
    double ebias = 0.0;  // mean of x_b_hat - x_b over usable replicates
    double ebias_se = 0.0;
    double ecp_delta = 0.0;
    double ecp_delta_se = 0.0;
    double ecp_pivot = 0.0;
    double ecp_pivot_se = 0.0;
    double ecp_boot = 0.0;
    double ecp_boot_se = 0.0;
    double pct_nonconverged = 0.0;
    double pct_nonconverged_se = 0.0;
    double pct_delta_below_x0 = 0.0;
    double pct_delta_below_x0_se = 0.0;
    double time_ratio_pivot = 0.0;  // mean over usable replicates
    double time_ratio_boot = 0.0;
    int replicates = 0;
    int usable = 0;
};

// One replicate of the study. Non-usable replicates (fit failure or no BMD)
// carry converged = false and a reason.
struct ReplicateOutcome {
    bool converged = false;
    std::string failure;
    double xb_true = 0.0;
    double xb_hat = 0.0;
    double delta = 0.0;
    bool delta_below_x0 = false;
    double pivot = 0.0;
    double boot = 0.0;
    double time_delta = 0.0;
    double time_pivot = 0.0;
    double time_boot = 0.0;
    int pivot_sign_changes = -1;
};

DoseResponseData simulate_dataset(int n, double s, double sigma, Rng& rng);

// x_b = -log(1 - sigma c) / s; throws NoTrueBmd when sigma c >= 1.
double true_bmd(double s, double sigma, double p0, double p_plus);

// Generator for replicate r of cell (n, s, sigma); independent of cell order.
Rng replicate_rng(std::uint64_t seed, int n, double s, double sigma, int r);

ReplicateOutcome run_replicate(const SimConfig& cfg, int n, double s, double sigma, int r);
std::vector<ReplicateOutcome> run_cell(const SimConfig& cfg, int n, double s, double sigma);

// Coverage rule: returns true when the lower limit covers the truth.
using CoverageRule = std::function<bool(double bmdl, double truth)>;
bool lower_limit_covers(double bmdl, double truth);

SimResultRow summarize_cell(int n, double s, double sigma, const std::vector<ReplicateOutcome>& reps,
                            const CoverageRule& covers = lower_limit_covers);

std::vector<SimResultRow> run_study(const SimConfig& cfg);

SimConfig sim_config_from_json(const nlohmann::json& j);  // throws ConfigError naming the field
nlohmann::json to_json(const SimResultRow& row);
nlohmann::json study_summary(const SimConfig& cfg, const std::vector<SimResultRow>& rows);

// Header row plus one row per cell; columns are the SimResultRow fields.
void write_table(std::ostream& os, const std::vector<SimResultRow>& rows);

}  // namespace semibmd
