#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cli.hpp"
#include "offroad/optim.hpp"
#include "offroad/uncertainty.hpp"
#include "offroad/vehicle.hpp"
#include "offroad/worldsim.hpp"

namespace py = pybind11;
using namespace offroad;

namespace {

std::array<double, 6> to_array(const StateDerivative& d) { return {d[0], d[1], d[2], d[3], d[4], d[5]}; }

py::dict result_dict(const OptimResult& r) {
  py::dict d;
  d["best_x"] = r.best_x;
  d["best_f"] = r.best_f;
  d["evaluations"] = r.evaluations;
  d["iterations"] = r.iterations;
  d["trace"] = r.trace;
  return d;
}

BoxProblem make_problem(const std::function<double(const Eigen::VectorXd&)>& f,
                        const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                        std::uint64_t seed, long budget) {
  BoxProblem p;
  p.dim = static_cast<int>(lower.size());
  p.lower = lower;
  p.upper = upper;
  p.objective = f;
  p.seed = seed;
  p.budget = budget;
  return p;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Hybrid offroad planner core";

  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<IntegrationError>(m, "IntegrationError", PyExc_ArithmeticError);

  py::class_<VehicleState>(m, "VehicleState")
      .def(py::init([](double x, double y, double psi, double v, double phi, double sigma) {
             return VehicleState{x, y, psi, v, phi, sigma};
           }),
           py::arg("x") = 0.0, py::arg("y") = 0.0, py::arg("psi") = 0.0, py::arg("v") = 0.0,
           py::arg("phi") = 0.0, py::arg("sigma") = kSigmaMin)
      .def_readwrite("x", &VehicleState::x)
      .def_readwrite("y", &VehicleState::y)
      .def_readwrite("psi", &VehicleState::psi)
      .def_readwrite("v", &VehicleState::v)
      .def_readwrite("phi", &VehicleState::phi)
      .def_readwrite("sigma", &VehicleState::sigma)
      .def("as_tuple", &VehicleState::as_array)
      .def("__repr__", [](const VehicleState& s) {
        return "VehicleState(x=" + std::to_string(s.x) + ", y=" + std::to_string(s.y) +
               ", psi=" + std::to_string(s.psi) + ", v=" + std::to_string(s.v) + ")";
      });

  py::class_<ModelParams>(m, "ModelParams")
      .def(py::init<>())
      .def_readwrite("c1", &ModelParams::c1)
      .def_readwrite("c2", &ModelParams::c2)
      .def_readwrite("cm1", &ModelParams::cm1)
      .def_readwrite("cm2", &ModelParams::cm2)
      .def_readwrite("cr2", &ModelParams::cr2)
      .def_readwrite("cr0", &ModelParams::cr0)
      .def_readwrite("g", &ModelParams::g)
      .def_readwrite("mass_scale", &ModelParams::mass_scale);

  m.def(
      "derivative",
      [](const VehicleState& s, double delta, double throttle, const ModelParams& p) {
        return to_array(derivative(s, ControlInput(delta, throttle), p));
      },
      py::arg("state"), py::arg("delta"), py::arg("throttle"), py::arg("params") = ModelParams{});
  m.def(
      "step_rk4",
      [](const VehicleState& s, double delta, double throttle, const ModelParams& p, double dt) {
        return step_rk4(s, ControlInput(delta, throttle), p, dt);
      },
      py::arg("state"), py::arg("delta"), py::arg("throttle"), py::arg("params") = ModelParams{},
      py::arg("dt") = 0.2);
  m.def("throttle_to_dt", &throttle_to_dt, py::arg("throttle"));

  m.def(
      "categorical_mi",
      [](const std::vector<std::vector<double>>& probs) {
        return categorical_mi(std::span<const std::vector<double>>(probs));
      },
      py::arg("member_probs"));
  m.def(
      "gaussian_mi",
      [](const std::vector<double>& means, const std::vector<double>& vars, const std::string& distance) {
        if (means.size() != vars.size()) throw DomainError("means and vars differ in length");
        std::vector<Gaussian1d> g;
        for (std::size_t i = 0; i < means.size(); ++i) g.push_back({means[i], vars[i]});
        return gaussian_mi_paide(g, parse_distance(distance));
      },
      py::arg("means"), py::arg("vars"), py::arg("distance") = "kl");

  m.def(
      "cem_minimize",
      [](const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& lower,
         const Eigen::VectorXd& upper, int population, int iters, std::uint64_t seed) {
        CemConfig c;
        c.population = population;
        c.iters = iters;
        return result_dict(cem_minimize(make_problem(f, lower, upper, seed, 100000000), c));
      },
      py::arg("f"), py::arg("lower"), py::arg("upper"), py::arg("population") = 64,
      py::arg("iters") = 50, py::arg("seed") = 0);
  m.def(
      "cma_minimize",
      [](const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& lower,
         const Eigen::VectorXd& upper, double sigma, long budget, std::uint64_t seed) {
        CmaConfig c;
        c.init_sigma = sigma;
        c.iters = 1000000;
        return result_dict(cma_minimize(make_problem(f, lower, upper, seed, budget), c));
      },
      py::arg("f"), py::arg("lower"), py::arg("upper"), py::arg("sigma") = 0.3,
      py::arg("budget") = 5000, py::arg("seed") = 0);

  m.def(
      "generate_world",
      [](std::uint64_t seed, int size) {
        WorldGenConfig cfg;
        cfg.size = size;
        const TerrainWorld w = generate_world(seed, cfg);
        py::array_t<std::uint8_t> labels({w.size(), w.size()});
        std::copy(w.labels().begin(), w.labels().end(), labels.mutable_data());
        py::array_t<double> slopes({w.size(), w.size()});
        std::copy(w.slopes().begin(), w.slopes().end(), slopes.mutable_data());
        return py::make_tuple(labels, slopes);
      },
      py::arg("seed"), py::arg("size") = 128);

  m.def(
      "dispatch",
      [](const std::vector<std::string>& args) {
        py::gil_scoped_release release;
        return cli::dispatch(args);
      },
      py::arg("args"), "Run a CLI subcommand; returns the exit code.");
}
