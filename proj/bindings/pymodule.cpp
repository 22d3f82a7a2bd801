// Python bindings for the core pipeline: grids, coefficient fields, pulse
// sequences, forward solvers, measurements, reconstruction and inversion.

#include <pybind11/complex.h>
#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "bt/bloch.h"
#include "bt/core.h"
#include "bt/errors.h"
#include "bt/invert.h"
#include "bt/kspace.h"
#include "bt/measure.h"
#include "bt/recon.h"
#include "bt/seq.h"
#include "bt/spectral.h"
#include "bt/torrey.h"

namespace py = pybind11;
using namespace bt;

PYBIND11_MODULE(_core, mod) {
    mod.doc() = "rotating-frame Bloch/Bloch-Torrey solvers and inversion";
    mod.attr("__version__") = "0.1.0";
    mod.attr("GAMMA_PROTON") = consts::gamma_proton;

    py::register_exception<ConfigError>(mod, "ConfigError", PyExc_ValueError);
    py::register_exception<DomainError>(mod, "DomainError", PyExc_ValueError);
    py::register_exception<NumericsError>(mod, "NumericsError",
                                          PyExc_RuntimeError);

    py::class_<Grid>(mod, "Grid")
        .def(py::init([](int dim, std::array<int, 3> n, std::array<double, 3> L) {
                 return Grid::make(dim, n, L);
             }),
             py::arg("dim"), py::arg("n"), py::arg("L"))
        .def_readonly("dim", &Grid::dim)
        .def_property_readonly("n", [](const Grid& g) { return g.n; })
        .def_property_readonly("L", [](const Grid& g) { return g.L; })
        .def("size", &Grid::size)
        .def("cellvol", &Grid::cellvol)
        .def("coords", [](const Grid& g, int i) {
            Vec3 r = g.coords(i);
            return std::array<double, 3>{r[0], r[1], r[2]};
        });

    py::class_<CoeffFields>(mod, "CoeffFields")
        .def(py::init([](VecXd Meq, VecXd R1, VecXcd R2star) {
                 CoeffFields c;
                 c.Meq = std::move(Meq);
                 c.R1 = std::move(R1);
                 c.R2star = std::move(R2star);
                 return c;
             }),
             py::arg("Meq"), py::arg("R1"), py::arg("R2star"))
        .def_readwrite("Meq", &CoeffFields::Meq)
        .def_readwrite("R1", &CoeffFields::R1)
        .def_readwrite("R2star", &CoeffFields::R2star)
        .def("validate", [](const CoeffFields& c, const Grid& g) { c.validate(g); });

    py::class_<ModelParams>(mod, "ModelParams")
        .def(py::init<>())
        .def_readwrite("D0", &ModelParams::D0)
        .def_readwrite("v0", &ModelParams::v0)
        .def_readwrite("cplus0", &ModelParams::cplus0);

    py::class_<PiecewiseConstant>(mod, "PiecewiseConstant")
        .def_static("zero", &PiecewiseConstant::zero)
        .def_static("constant", &PiecewiseConstant::constant, py::arg("g"),
                    py::arg("t0"), py::arg("t1"))
        .def("value", &PiecewiseConstant::value)
        .def("integral", &PiecewiseConstant::integral);

    py::enum_<SeqKind>(mod, "SeqKind")
        .value("NINETY", SeqKind::Ninety)
        .value("ONE_EIGHTY_TAU_NINETY", SeqKind::OneEightyTauNinety);

    py::class_<PulseSequence>(mod, "PulseSequence")
        .def_readonly("kind", &PulseSequence::kind)
        .def_readonly("taup", &PulseSequence::taup)
        .def_readonly("tau", &PulseSequence::tau)
        .def_readonly("T", &PulseSequence::T)
        .def_readonly("readout_start", &PulseSequence::readout_start)
        .def("pulse_end", &PulseSequence::pulse_end)
        .def("t_offset", &PulseSequence::t_offset);

    mod.def("make_sequence", &make_sequence, py::arg("kind"), py::arg("cplus0"),
            py::arg("taup"), py::arg("tau"), py::arg("T"), py::arg("G"),
            py::arg("gamma") = consts::gamma_proton,
            py::arg("readout_start") = -1.0);

    mod.def("k_trajectory",
            [](const PiecewiseConstant& G, double gamma, std::vector<double> t) {
                return k_trajectory(G, gamma, t);
            },
            py::arg("G"), py::arg("gamma"), py::arg("times"));

    py::class_<MagState>(mod, "MagState")
        .def_readonly("t", &MagState::t)
        .def_readonly("Mperp", &MagState::Mperp)
        .def_readonly("Mminus", &MagState::Mminus)
        .def_readonly("mz", &MagState::mz);

    mod.def(
        "solve_bloch",
        [](const PulseSequence& seq, const CoeffFields& c, const VecXcd& cplus,
           const Grid& g, double gamma, std::vector<double> times) {
            return solve_bloch(seq, c, cplus, g, gamma, BlochOptions{}, times);
        },
        py::arg("seq"), py::arg("coeffs"), py::arg("cplus"), py::arg("grid"),
        py::arg("gamma"), py::arg("times"));

    mod.def("explicit_state", &explicit_state, py::arg("seq"), py::arg("coeffs"),
            py::arg("grid"), py::arg("gamma"), py::arg("t"));

    py::class_<CoilSet>(mod, "CoilSet")
        .def_static("constant", &CoilSet::constant, py::arg("grid"),
                    py::arg("c0"))
        .def_readwrite("c", &CoilSet::c)
        .def("ncoils", &CoilSet::ncoils);

    py::class_<Measurement>(mod, "Measurement")
        .def_readonly("times", &Measurement::times)
        .def_readonly("y", &Measurement::y)
        .def_readonly("taup", &Measurement::taup)
        .def_readonly("tau", &Measurement::tau);

    mod.def("observe",
            [](const std::vector<MagState>& traj, const CoilSet& coils,
               const Grid& g, std::vector<double> clock) {
                return observe(traj, coils, g, clock);
            },
            py::arg("traj"), py::arg("coils"), py::arg("grid"), py::arg("clock"));
    mod.def("demodulate", &demodulate, py::arg("m"), py::arg("R2ref"),
            py::arg("t_offset"), py::arg("sign") = +1);
    mod.def("add_noise", &add_noise, py::arg("m"), py::arg("sigma"),
            py::arg("seed"));

    mod.def("dft_grid", py::overload_cast<const VecXcd&, const Grid&>(&dft_grid),
            py::arg("x"), py::arg("grid"));
    mod.def("idft_grid", &idft_grid, py::arg("xhat"), py::arg("grid"));
    mod.def("q_symbol", &q_symbol, py::arg("xi"), py::arg("D0"), py::arg("v0"));

    py::class_<AnsatzSpace>(mod, "AnsatzSpace")
        .def("nmodes", &AnsatzSpace::nmodes)
        .def_readonly("sigma_min", &AnsatzSpace::sigma_min)
        .def_readonly("C_I", &AnsatzSpace::C_I)
        .def("synth", &AnsatzSpace::synth);
    mod.def("build_ansatz", &build_ansatz, py::arg("k_samples"), py::arg("grid"),
            py::arg("tol"));

    py::class_<InterpResult>(mod, "InterpResult")
        .def_readonly("x", &InterpResult::x)
        .def_readonly("coeffs", &InterpResult::coeffs)
        .def_readonly("residual", &InterpResult::residual)
        .def_readonly("rel_residual", &InterpResult::rel_residual)
        .def_readonly("sigma_min", &InterpResult::sigma_min);
    mod.def("interp_inverse", &interp_inverse, py::arg("y"), py::arg("k_samples"),
            py::arg("coils"), py::arg("X"));
    mod.def("recon_Meq", &recon_Meq, py::arg("y90"), py::arg("R2ref"),
            py::arg("X"), py::arg("coils"));

    py::class_<R1Result>(mod, "R1Result")
        .def_readonly("R1", &R1Result::R1)
        .def_readonly("masked", &R1Result::masked);
    mod.def("recon_R1_known_meq", &recon_R1_known_meq, py::arg("Phi_tau"),
            py::arg("Meq"), py::arg("tau"));
    mod.def("recon_R1_two_tau", &recon_R1_two_tau, py::arg("Phi1"),
            py::arg("Phi2"), py::arg("tau1"), py::arg("tau2"),
            py::arg("R1_max") = 50.0);
    mod.def("psi", &psi, py::arg("x"), py::arg("tau1"), py::arg("tau2"));
    mod.def("invert_psi", &invert_psi, py::arg("val"), py::arg("tau1"),
            py::arg("tau2"), py::arg("R1_max") = 50.0);

    py::class_<R2starResult>(mod, "R2starResult")
        .def_readonly("R2star", &R2starResult::R2star)
        .def_readonly("R2star0", &R2starResult::R2star0)
        .def_readonly("masked", &R2starResult::masked)
        .def_readonly("gn_history", &R2starResult::gn_history);
    mod.def("recon_R2star", &recon_R2star, py::arg("y90"), py::arg("Meq"),
            py::arg("G"), py::arg("X"), py::arg("coils"),
            py::arg("gamma") = consts::gamma_proton);

    py::enum_<Engine>(mod, "Engine")
        .value("BLOCH_EXACT", Engine::BlochExact)
        .value("BLOCH_NUMERIC", Engine::BlochNumeric)
        .value("TORREY_FD", Engine::TorreyFD)
        .value("KSPACE_CONST", Engine::KspaceConst)
        .value("EXPLICIT_FORM", Engine::ExplicitForm);

    py::class_<ForwardConfig>(mod, "ForwardConfig")
        .def(py::init([](Grid g, std::array<PulseSequence, 3> seqs, Engine eng,
                         CoilSet coils, std::vector<double> clock,
                         ModelParams m) {
                 ForwardConfig fc;
                 fc.grid = std::move(g);
                 fc.seqs = std::move(seqs);
                 fc.engine = eng;
                 fc.coils = std::move(coils);
                 fc.clock = std::move(clock);
                 fc.model = std::move(m);
                 return fc;
             }),
             py::arg("grid"), py::arg("seqs"), py::arg("engine"),
             py::arg("coils"), py::arg("clock"), py::arg("model"))
        .def_readwrite("engine", &ForwardConfig::engine)
        .def_readwrite("clock", &ForwardConfig::clock);

    py::class_<StackedSeries>(mod, "StackedSeries")
        .def_readonly("clock", &StackedSeries::clock)
        .def_property_readonly(
            "y", [](const StackedSeries& s) {
                return std::vector<Eigen::MatrixXcd>(s.y.begin(), s.y.end());
            })
        .def("norm", &StackedSeries::norm);

    mod.def("forward", &forward_F, py::arg("x"), py::arg("config"));
    mod.def("jacobian_apply", &jacobian_apply, py::arg("x_ref"), py::arg("dx"),
            py::arg("config"));

    py::enum_<NewtonVariant>(mod, "NewtonVariant")
        .value("FULL", NewtonVariant::Full)
        .value("FROZEN", NewtonVariant::Frozen);

    py::class_<NewtonIterate>(mod, "NewtonIterate")
        .def_readonly("n", &NewtonIterate::n)
        .def_readonly("residual", &NewtonIterate::residual)
        .def_readonly("error_to_truth", &NewtonIterate::error_to_truth)
        .def_readonly("step_norm", &NewtonIterate::step_norm);

    py::class_<NewtonResult>(mod, "NewtonResult")
        .def_readonly("x", &NewtonResult::x)
        .def_readonly("converged", &NewtonResult::converged)
        .def_readonly("history", &NewtonResult::history);

    mod.def(
        "newton_solve",
        [](const StackedSeries& ydata, const CoeffFields& x0,
           const ForwardConfig& cfg, NewtonVariant variant, double tol,
           int max_iter) {
            NewtonOptions opts;
            opts.tol = tol;
            opts.max_iter = max_iter;
            return newton_solve(ydata, x0, cfg, variant, opts);
        },
        py::arg("ydata"), py::arg("x0"), py::arg("config"),
        py::arg("variant") = NewtonVariant::Full, py::arg("tol") = 1e-10,
        py::arg("max_iter") = 20);

    py::class_<SpectralCertificate>(mod, "SpectralCertificate")
        .def_readonly("lambda_perp", &SpectralCertificate::lambda_perp)
        .def_readonly("lambda_z", &SpectralCertificate::lambda_z)
        .def_readonly("det_values", &SpectralCertificate::det_values)
        .def_readonly("sigma_min", &SpectralCertificate::sigma_min)
        .def_readonly("passed", &SpectralCertificate::pass);
    mod.def(
        "certify_uniqueness",
        [](const Grid& g, const CoeffFields& x_ref, const ModelParams& m,
           Vec3 G0, const AnsatzSpace& X, const CoilSet& coils, double tau1,
           double tau2, int count) {
            return certify_uniqueness(g, x_ref, m, G0, BoundarySpec{}, X, coils,
                                      tau1, tau2, count);
        },
        py::arg("grid"), py::arg("x_ref"), py::arg("model"), py::arg("G0"),
        py::arg("X"), py::arg("coils"), py::arg("tau1"), py::arg("tau2"),
        py::arg("count") = 10);
}
