#pragma once
// Command-line pipeline: CSV in, report and plot-ready grids out.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "semibmd/bmd.hpp"
#include "semibmd/bmdl.hpp"
#include "semibmd/errors.hpp"
#include "semibmd/model.hpp"

namespace semibmd {

// Numeric columns of a delimited text file with a header row.
struct Table {
    std::vector<std::string> names;
    std::vector<std::vector<double>> columns;

    std::size_t rows() const { return columns.empty() ? 0 : columns.front().size(); }
    const std::vector<double>& column(const std::string& name) const;  // throws DataError
};

// Comma-separated, '.' decimal. Throws DataError on ragged rows or non-numeric cells.
Table read_table(std::istream& in);
Table read_table(const std::filesystem::path& path);

struct AnalysisRequest {
    std::filesystem::path data_path;
    std::string response_col = "y";
    std::string exposure_col = "x";
    std::vector<std::string> covariate_cols;
    bool log1p_exposure = false;
    double p0 = 0.025;
    double p_plus = 0.01;
    double x0 = 0.0;  // on the analysis scale (after any log1p)
    std::optional<double> xmax;
    int basis_count = 20;
    int boot_M = 1000;
    std::uint64_t seed = 0;
    double alpha_level = 0.95;
    std::filesystem::path output_dir = ".";
    int threads = 1;
    int curve_points = 200;
};

DoseResponseData load_data(const Table& table, const AnalysisRequest& req);

struct AnalysisResult {
    FittedModel model;
    BmdEstimate bmd;
    double existence_margin = 0.0;
    BmdlReport bmdl;
    std::vector<double> boot_samples;
    nlohmann::json report;   // deterministic given the request
    nlohmann::json timings;  // wall-clock seconds, kept apart from the report
};

// Fit, BMD, BMDLs and report; no files written.
AnalysisResult analyze(const DoseResponseData& data, const AnalysisRequest& req);

struct CurveBand {
    std::vector<double> x, fit, lower, upper;
};

// Centered f_hat on an even grid with pointwise 2.5% / 97.5% posterior bands.
CurveBand curve_band(const FittedModel& model, int points, int draws, std::uint64_t seed);

// Reads req.data_path and writes report.json, timings.json, curve.csv and
// bmd_samples.csv into req.output_dir.
AnalysisResult run_analysis(const AnalysisRequest& req);

// Reads a JSON study config and writes sim_table.csv and sim_summary.json.
void run_sim(const std::filesystem::path& config_path, const std::filesystem::path& output_dir);

// Write to a temporary sibling, then rename over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

// 0 success, 2 data or usage errors, 3 estimability errors, 4 internal failures.
int exit_code(ErrorKind kind);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace semibmd
