#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "semibmd/bmd.hpp"
#include "semibmd/bmdl.hpp"
#include "semibmd/cli.hpp"
#include "semibmd/errors.hpp"
#include "semibmd/model.hpp"
#include "semibmd/sim.hpp"
#include "semibmd/splines.hpp"

namespace py = pybind11;
using namespace semibmd;

namespace {

DoseResponseData make_data(const Eigen::VectorXd& x, const Eigen::VectorXd& y, const std::optional<Eigen::MatrixXd>& z) {
    DoseResponseData d;
    d.x = x;
    d.y = y;
    d.z = z ? *z : Eigen::MatrixXd(x.size(), 0);
    d.validate();
    return d;
}

BmdConfig make_bmd_config(double x0, double p0, double p_plus, std::optional<double> xmax) {
    BmdConfig c;
    c.x0 = x0;
    c.p0 = p0;
    c.p_plus = p_plus;
    c.xmax = xmax;
    c.validate();
    return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Semiparametric benchmark dose analysis";

    PYBIND11_CONSTINIT static py::gil_safe_call_once_and_store<py::object> exc_storage;
    exc_storage.call_once_and_store_result([&]() { return py::exception<Error>(m, "SemibmdError"); });
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            const std::string msg = std::string(to_string(e.kind())) + ": " + e.what();
            py::set_error(exc_storage.get_stored(), msg.c_str());
        }
    });

    // splines
    py::class_<KnotVector>(m, "KnotVector")
        .def(py::init<std::vector<double>, int>(), py::arg("knots"), py::arg("order"))
        .def_property_readonly("order", &KnotVector::order)
        .def_property_readonly("basis_count", &KnotVector::basis_count)
        .def_property_readonly("lower", &KnotVector::lower)
        .def_property_readonly("upper", &KnotVector::upper)
        .def_property_readonly("knots",
                               [](const KnotVector& k) { return std::vector<double>(k.knots().begin(), k.knots().end()); })
        .def("greville", &KnotVector::greville);
    m.def("make_knots", [](std::vector<double> pts, int L, int order) { return make_knots(pts, L, order); },
          py::arg("points"), py::arg("basis_count"), py::arg("order") = 4);
    m.def("make_uniform_knots", &make_uniform_knots, py::arg("lower"), py::arg("upper"), py::arg("basis_count"),
          py::arg("order") = 4);
    m.def("eval_basis", &eval_basis, py::arg("x"), py::arg("knots"));
    m.def("basis_derivative", &basis_derivative, py::arg("x"), py::arg("knots"), py::arg("nderiv") = 1);
    m.def("de_boor", py::overload_cast<double, const Eigen::VectorXd&, const KnotVector&>(&de_boor), py::arg("x"),
          py::arg("coeffs"), py::arg("knots"));
    m.def("penalty_matrix", &penalty_matrix, py::arg("knots"));

    // model
    py::class_<FittedModel>(m, "FittedModel")
        .def_readonly("sigma_hat", &FittedModel::sigma_hat)
        .def_readonly("beta_c", &FittedModel::beta_c)
        .def_readonly("log_laml", &FittedModel::log_laml)
        .def_readonly("hessian", &FittedModel::hessian)
        .def_property_readonly("psi", [](const FittedModel& f) { return f.params.psi(); })
        .def_property_readonly("smoothing_parameters", &FittedModel::smoothing_parameters)
        .def_property_readonly("exposure_knots", &FittedModel::exposure_knots)
        .def(
            "f_hat",
            [](const FittedModel& f, py::array_t<double> x) {
                return py::vectorize([&f](double v) { return f.f_hat(v); })(std::move(x));
            },
            py::arg("x"));
    m.def(
        "fit",
        [](const Eigen::VectorXd& x, const Eigen::VectorXd& y, std::optional<Eigen::MatrixXd> z, int basis_count,
           std::optional<double> exposure_lower) {
            FitConfig c;
            c.basis_count = basis_count;
            c.exposure_lower = exposure_lower;
            return fit(make_data(x, y, z), c);
        },
        py::arg("x"), py::arg("y"), py::arg("z") = py::none(), py::arg("basis_count") = 20,
        py::arg("exposure_lower") = py::none(), py::call_guard<py::gil_scoped_release>());
    m.def(
        "posterior_sample",
        [](const FittedModel& f, int draws, std::uint64_t seed) {
            Rng rng(seed);
            const auto s = posterior_sample(f, draws, rng);
            return py::make_tuple(s.psi, s.beta_c);
        },
        py::arg("model"), py::arg("draws"), py::arg("seed"));

    // BMD and lower limits
    m.def("c_const", &c_const, py::arg("p0") = 0.025, py::arg("p_plus") = 0.01);
    m.def(
        "estimate_bmd",
        [](const FittedModel& f, double x0, double p0, double p_plus, std::optional<double> xmax) {
            const auto est = estimate_bmd(f, make_bmd_config(x0, p0, p_plus, xmax));
            py::dict d;
            d["bmd"] = est.xb_hat;
            d["iterations"] = est.iterations;
            d["existence_margin"] = est.existence_margin;
            d["u_prime"] = est.u_prime_at_root;
            return d;
        },
        py::arg("model"), py::arg("x0") = 0.0, py::arg("p0") = 0.025, py::arg("p_plus") = 0.01,
        py::arg("xmax") = py::none());
    m.def(
        "compute_bmdls",
        [](const FittedModel& f, double x0, double p0, double p_plus, std::optional<double> xmax, int draws,
           std::uint64_t seed, int threads) {
            BmdlReport r;
            {
                py::gil_scoped_release release;
                const BmdConfig cfg = make_bmd_config(x0, p0, p_plus, xmax);
                const auto est = estimate_bmd(f, cfg);
                BmdlOptions o;
                o.draws = draws;
                o.seed = seed;
                o.threads = threads;
                r = compute_bmdls(f, est, cfg, o);
            }
            py::dict d;
            d["delta"] = r.delta;
            d["delta_below_x0"] = r.delta_below_x0;
            d["pivot"] = r.pivot;
            d["boot"] = r.boot;
            d["boot_samples_used"] = r.boot_samples_used;
            d["pivot_sign_changes"] = r.pivot_sign_changes;
            return d;
        },
        py::arg("model"), py::arg("x0") = 0.0, py::arg("p0") = 0.025, py::arg("p_plus") = 0.01,
        py::arg("xmax") = py::none(), py::arg("draws") = 1000, py::arg("seed") = 0, py::arg("threads") = 1);

    // full pipeline, returns the report as JSON text
    m.def(
        "analyze_json",
        [](const Eigen::VectorXd& x, const Eigen::VectorXd& y, std::optional<Eigen::MatrixXd> z, double x0, double p0,
           double p_plus, int basis_count, int boot_m, std::uint64_t seed, int threads) {
            py::gil_scoped_release release;
            AnalysisRequest req;
            req.x0 = x0;
            req.p0 = p0;
            req.p_plus = p_plus;
            req.basis_count = basis_count;
            req.boot_M = boot_m;
            req.seed = seed;
            req.threads = threads;
            if (z) {
                for (Eigen::Index j = 0; j < z->cols(); ++j) req.covariate_cols.push_back("z" + std::to_string(j + 1));
            }
            return analyze(make_data(x, y, z), req).report.dump();
        },
        py::arg("x"), py::arg("y"), py::arg("z") = py::none(), py::arg("x0") = 0.0, py::arg("p0") = 0.025,
        py::arg("p_plus") = 0.01, py::arg("basis_count") = 20, py::arg("boot_M") = 1000, py::arg("seed") = 0,
        py::arg("threads") = 1);

    // simulation
    m.def(
        "simulate_dataset",
        [](int n, double s, double sigma, std::uint64_t seed) {
            Rng rng(seed);
            const auto d = simulate_dataset(n, s, sigma, rng);
            return py::make_tuple(d.x, d.y);
        },
        py::arg("n"), py::arg("s"), py::arg("sigma"), py::arg("seed"));
    m.def("true_bmd", &true_bmd, py::arg("s"), py::arg("sigma"), py::arg("p0") = 0.025, py::arg("p_plus") = 0.01);
    m.def(
        "run_study_json",
        [](const std::string& config) {
            const SimConfig cfg = sim_config_from_json(nlohmann::json::parse(config));
            std::vector<SimResultRow> rows;
            {
                py::gil_scoped_release release;
                rows = run_study(cfg);
            }
            return study_summary(cfg, rows).dump();
        },
        py::arg("config"));
}
