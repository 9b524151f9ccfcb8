#include "semibmd/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include <CLI11.hpp>

#include "semibmd/sim.hpp"

namespace semibmd {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\"");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\"");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.push_back(trim(std::string_view(line).substr(start, pos - start)));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

double parse_number(const std::string& cell, std::size_t row, const std::string& col) {
    double v = 0.0;
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (cell.empty() || ec != std::errc() || ptr != last) {
        throw Error(ErrorKind::DataError,
                    "non-numeric cell '" + cell + "' in column '" + col + "' at row " + std::to_string(row));
    }
    return v;
}

std::string format_double(double v) {
    // JSON number formatting gives the shortest round-trip representation.
    return nlohmann::json(v).dump();
}

}  // namespace

const std::vector<double>& Table::column(const std::string& name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw Error(ErrorKind::DataError, "missing column '" + name + "'");
    return columns[static_cast<std::size_t>(it - names.begin())];
}

Table read_table(std::istream& in) {
    Table t;
    std::string line;
    while (std::getline(in, line)) {
        if (!trim(line).empty()) break;
    }
    if (trim(line).empty()) throw Error(ErrorKind::DataError, "empty input: no header row");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    t.names = split(line);
    t.columns.resize(t.names.size());
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        const auto cells = split(line);
        if (cells.size() != t.names.size()) {
            throw Error(ErrorKind::DataError, "row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                                                  " cells, expected " + std::to_string(t.names.size()));
        }
        for (std::size_t c = 0; c < cells.size(); ++c) {
            t.columns[c].push_back(parse_number(cells[c], row, t.names[c]));
        }
    }
    return t;
}

Table read_table(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::DataError, "cannot open data file " + path.string());
    return read_table(in);
}

DoseResponseData load_data(const Table& table, const AnalysisRequest& req) {
    const auto& y = table.column(req.response_col);
    const auto& x = table.column(req.exposure_col);
    const auto n = static_cast<Eigen::Index>(table.rows());
    DoseResponseData d;
    d.y = Eigen::Map<const Eigen::VectorXd>(y.data(), n);
    d.x = Eigen::Map<const Eigen::VectorXd>(x.data(), n);
    if (req.log1p_exposure) {
        for (Eigen::Index i = 0; i < n; ++i) {
            if (!(d.x[i] > -1.0)) throw Error(ErrorKind::DataError, "log1p exposure needs values > -1");
            d.x[i] = std::log1p(d.x[i]);
        }
    }
    d.z.resize(n, static_cast<Eigen::Index>(req.covariate_cols.size()));
    for (std::size_t j = 0; j < req.covariate_cols.size(); ++j) {
        const auto& c = table.column(req.covariate_cols[j]);
        d.z.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXd>(c.data(), n);
    }
    d.validate();
    return d;
}

CurveBand curve_band(const FittedModel& model, int points, int draws, std::uint64_t seed) {
    if (points < 2) throw Error(ErrorKind::InvalidArgument, "curve grid needs at least 2 points");
    const KnotVector& kv = model.exposure_knots();
    Rng rng = stream_rng(seed, std::uint64_t{1} << 40);
    const PosteriorDraws post = posterior_sample(model, draws, rng);
    const Eigen::VectorXd& mean = model.design->exposure_basis_mean;
    const Eigen::RowVectorXd centers = mean.transpose() * post.beta_c;

    CurveBand band;
    std::vector<double> vals(static_cast<std::size_t>(draws));
    for (int i = 0; i < points; ++i) {
        const double x = i == points - 1 ? kv.upper() : kv.lower() + (kv.upper() - kv.lower()) * i / (points - 1.0);
        const Eigen::RowVectorXd curves = eval_basis(x, kv).transpose() * post.beta_c - centers;
        for (int j = 0; j < draws; ++j) vals[static_cast<std::size_t>(j)] = curves[j];
        band.x.push_back(x);
        band.fit.push_back(model.f_hat(x));
        band.lower.push_back(percentile(vals, 0.025));
        band.upper.push_back(percentile(vals, 0.975));
    }
    return band;
}

AnalysisResult analyze(const DoseResponseData& data, const AnalysisRequest& req) {
    BmdConfig bc;
    bc.x0 = req.x0;
    bc.xmax = req.xmax;
    bc.p0 = req.p0;
    bc.p_plus = req.p_plus;
    bc.validate();

    FitConfig fc;
    fc.basis_count = req.basis_count;
    const double xmin = data.x.size() > 0 ? data.x.minCoeff() : 0.0;
    if (req.x0 < xmin) fc.exposure_lower = req.x0;

    AnalysisResult res;
    res.model = fit(data, fc);
    res.existence_margin = existence_check(res.model, bc);
    res.bmd = estimate_bmd(res.model, bc);

    BmdlOptions bo;
    bo.draws = req.boot_M;
    bo.seed = req.seed;
    bo.threads = req.threads;
    bo.alpha_level = req.alpha_level;
    res.bmdl = compute_bmdls(res.model, res.bmd, bc, bo, &res.boot_samples);

    const DoseCurve curve = dose_curve(res.model);
    nlohmann::json r;
    r["bmd"] = res.bmd.xb_hat;
    r["bmdl_delta"] = res.bmdl.delta;
    r["bmdl_delta_below_x0"] = res.bmdl.delta_below_x0;
    r["bmdl_pivot"] = res.bmdl.pivot;
    r["bmdl_pivot_degenerate"] = res.bmdl.pivot_degenerate;
    r["bmdl_boot"] = res.bmdl.boot;
    r["sigma_hat"] = res.model.sigma_hat;
    const Eigen::VectorXd lambda = res.model.smoothing_parameters();
    r["smoothing_parameters"] = std::vector<double>(lambda.data(), lambda.data() + lambda.size());
    r["existence_margin"] = res.existence_margin;
    r["c"] = c_const(req.p0, req.p_plus);
    r["p0"] = req.p0;
    r["p_plus"] = req.p_plus;
    r["x0"] = req.x0;
    r["xmax"] = resolve_xmax(curve, bc);
    r["alpha_level"] = req.alpha_level;
    r["exposure_scale"] = req.log1p_exposure ? "log1p" : "identity";
    r["n"] = data.n();
    r["covariates"] = req.covariate_cols;
    r["basis_count"] = req.basis_count;
    r["boot_M"] = req.boot_M;
    r["seed"] = req.seed;
    r["boot_samples_used"] = res.bmdl.boot_samples_used;
    r["boot_failures"] = res.bmdl.boot_failures;
    r["pivot_sign_changes"] = res.bmdl.pivot_sign_changes;
    r["var_at_bmd"] = res.bmdl.var_at_xb;
    r["u_prime_at_bmd"] = res.bmdl.u_prime_at_xb;
    r["log_laml"] = res.model.log_laml;
    r["outer_iterations"] = res.model.outer_iterations;
    r["bmd_iterations"] = res.bmd.iterations;
    res.report = std::move(r);
    res.timings = {{"delta", res.bmdl.time_delta}, {"pivot", res.bmdl.time_pivot}, {"boot", res.bmdl.time_boot}};
    return res;
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::DataError, "cannot write " + tmp.string());
        out << contents;
        out.flush();
        if (!out) throw Error(ErrorKind::DataError, "write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw Error(ErrorKind::DataError, "cannot rename onto " + path.string() + ": " + ec.message());
    }
}

AnalysisResult run_analysis(const AnalysisRequest& req) {
    const DoseResponseData data = load_data(read_table(req.data_path), req);
    AnalysisResult res = analyze(data, req);

    std::error_code ec;
    fs::create_directories(req.output_dir, ec);
    if (ec) throw Error(ErrorKind::DataError, "cannot create output directory " + req.output_dir.string());

    write_file_atomic(req.output_dir / "report.json", res.report.dump(2) + "\n");
    write_file_atomic(req.output_dir / "timings.json", res.timings.dump(2) + "\n");

    const CurveBand band = curve_band(res.model, req.curve_points, req.boot_M, req.seed);
    std::string curve = "x,f_hat,lower,upper\n";
    for (std::size_t i = 0; i < band.x.size(); ++i) {
        curve += format_double(band.x[i]) + ',' + format_double(band.fit[i]) + ',' + format_double(band.lower[i]) +
                 ',' + format_double(band.upper[i]) + '\n';
    }
    write_file_atomic(req.output_dir / "curve.csv", curve);

    std::string samples = "bmd\n";
    for (double v : res.boot_samples) samples += format_double(v) + '\n';
    write_file_atomic(req.output_dir / "bmd_samples.csv", samples);
    return res;
}

void run_sim(const fs::path& config_path, const fs::path& output_dir) {
    std::ifstream in(config_path);
    if (!in) throw Error(ErrorKind::ConfigError, "cannot open config " + config_path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::ConfigError, std::string("config is not valid JSON: ") + e.what());
    }
    const SimConfig cfg = sim_config_from_json(j);
    const auto rows = run_study(cfg);

    std::error_code ec;
    fs::create_directories(output_dir, ec);
    if (ec) throw Error(ErrorKind::DataError, "cannot create output directory " + output_dir.string());
    std::ostringstream table;
    write_table(table, rows);
    write_file_atomic(output_dir / "sim_table.csv", table.str());
    write_file_atomic(output_dir / "sim_summary.json", study_summary(cfg, rows).dump(2) + "\n");
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::DataError:
        case ErrorKind::ConfigError:
        case ErrorKind::InvalidArgument:
        case ErrorKind::DegenerateKnots:
        case ErrorKind::OutOfSupport:
            return 2;
        case ErrorKind::BmdNotEstimable:
        case ErrorKind::BmdlNotEstimable:
        case ErrorKind::DegenerateSlope:
        case ErrorKind::NoTrueBmd:
            return 3;
        default:
            return 4;
    }
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Semiparametric benchmark dose analysis"};
    app.require_subcommand(1);

    AnalysisRequest req;
    std::string data_path, output_dir = ".";
    std::optional<int> threads;
    auto* analyze_cmd = app.add_subcommand("analyze", "Fit a monotone dose-response model and report BMD and BMDLs");
    analyze_cmd->add_option("--data", data_path, "CSV file with a header row")->required();
    analyze_cmd->add_option("--response", req.response_col, "Response column")->capture_default_str();
    analyze_cmd->add_option("--exposure", req.exposure_col, "Exposure column")->capture_default_str();
    analyze_cmd->add_option("--covariates", req.covariate_cols, "Covariate columns, smoothed additively")
        ->delimiter(',');
    analyze_cmd->add_flag("--log1p-exposure", req.log1p_exposure, "Analyze log(1 + exposure)");
    analyze_cmd->add_option("--p0", req.p0, "Baseline adverse-response probability")->capture_default_str();
    analyze_cmd->add_option("--p-plus", req.p_plus, "Benchmark response")->capture_default_str();
    analyze_cmd->add_option("--x0", req.x0, "Reference exposure")->capture_default_str();
    analyze_cmd->add_option("--xmax", req.xmax, "Upper end of the BMD search interval");
    analyze_cmd->add_option("--basis-count", req.basis_count, "B-spline basis size per smooth")
        ->capture_default_str();
    analyze_cmd->add_option("--boot-M", req.boot_M, "Posterior draws")->capture_default_str();
    analyze_cmd->add_option("--seed", req.seed, "Random seed")->required();
    analyze_cmd->add_option("--alpha-level", req.alpha_level, "Pivot chi-square level")->capture_default_str();
    analyze_cmd->add_option("--output-dir", output_dir, "Directory for outputs")->capture_default_str();
    analyze_cmd->add_option("--threads", threads, "Bootstrap threads (default: $SEMIBMD_THREADS or 1)");

    std::string config_path, sim_output = ".";
    auto* sim_cmd = app.add_subcommand("simulate", "Run the coverage and timing study");
    sim_cmd->add_option("--config", config_path, "JSON study config")->required();
    sim_cmd->add_option("--output-dir", sim_output, "Directory for outputs")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*analyze_cmd) {
            req.data_path = data_path;
            req.output_dir = output_dir;
            if (threads) {
                req.threads = *threads;
            } else if (const char* env = std::getenv("SEMIBMD_THREADS")) {
                req.threads = std::max(1, std::atoi(env));
            }
            const AnalysisResult res = run_analysis(req);
            out << "bmd " << format_double(res.bmd.xb_hat) << "\n"
                << "bmdl_delta " << format_double(res.bmdl.delta) << (res.bmdl.delta_below_x0 ? " (below x0)" : "")
                << "\n"
                << "bmdl_pivot " << format_double(res.bmdl.pivot) << "\n"
                << "bmdl_boot " << format_double(res.bmdl.boot) << "\n";
        } else if (*sim_cmd) {
            run_sim(config_path, sim_output);
            out << "wrote " << (fs::path(sim_output) / "sim_table.csv").string() << "\n";
        }
    } catch (const Error& e) {
        err << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}

}  // namespace semibmd
