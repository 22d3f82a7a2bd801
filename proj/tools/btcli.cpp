// Config-driven experiment runner: forward simulation, reconstruction,
// Newton inversion, spectral certification, and parameter sweeps, all from a
// JSON spec. Outputs are plain CSV/JSON and byte-identical for a fixed
// spec+seed.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bt/bloch.h"
#include "bt/core.h"
#include "bt/errors.h"
#include "bt/invert.h"
#include "bt/io.h"
#include "bt/kspace.h"
#include "bt/measure.h"
#include "bt/recon.h"
#include "bt/seq.h"
#include "bt/spectral.h"
#include "bt/torrey.h"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bt;

namespace {

// ---- config access with field-naming diagnostics ----

const json& jreq(const json& j, const std::string& key, const std::string& path) {
    if (!j.is_object() || !j.contains(key))
        throw ConfigError("missing field '" + (path.empty() ? key : path + "." + key) + "'");
    return j.at(key);
}

double jnum(const json& j, const std::string& key, const std::string& path) {
    const json& v = jreq(j, key, path);
    if (!v.is_number())
        throw ConfigError("field '" + path + "." + key + "' must be a number");
    return v.get<double>();
}

double jnum_or(const json& j, const std::string& key, double dflt) {
    return j.is_object() && j.contains(key) ? j.at(key).get<double>() : dflt;
}

int jint_or(const json& j, const std::string& key, int dflt) {
    return j.is_object() && j.contains(key) ? j.at(key).get<int>() : dflt;
}

std::string jstr_or(const json& j, const std::string& key, const std::string& dflt) {
    return j.is_object() && j.contains(key) ? j.at(key).get<std::string>() : dflt;
}

cd jcomplex(const json& v, const std::string& where) {
    if (v.is_number()) return cd(v.get<double>(), 0.0);
    if (v.is_array() && v.size() == 2)
        return cd(v[0].get<double>(), v[1].get<double>());
    throw ConfigError("field '" + where + "' must be a number or [re, im]");
}

Vec3 jvec3(const json& v, const std::string& where) {
    if (!v.is_array() || v.size() != 3)
        throw ConfigError("field '" + where + "' must be a 3-vector");
    return Vec3(v[0].get<double>(), v[1].get<double>(), v[2].get<double>());
}

// ---- scene construction ----

Grid parse_grid(const json& cfg) {
    const json& g = jreq(cfg, "grid", "");
    int dim = jint_or(g, "dim", 1);
    const json& n = jreq(g, "n", "grid");
    const json& L = jreq(g, "L", "grid");
    if (!n.is_array() || n.size() != 3 || !L.is_array() || L.size() != 3)
        throw ConfigError("fields 'grid.n' and 'grid.L' must be 3-vectors");
    return Grid::make(dim, {n[0].get<int>(), n[1].get<int>(), n[2].get<int>()},
                      {L[0].get<double>(), L[1].get<double>(), L[2].get<double>()});
}

// scalar profile along the first coordinate
VecXd parse_field(const json& f, const Grid& g, const std::string& path) {
    std::string kind = jstr_or(f, "kind", "constant");
    VecXd out(g.size());
    if (kind == "constant") {
        out.setConstant(jnum(f, "value", path));
    } else if (kind == "bumps") {
        double base = jnum(f, "base", path);
        const json& cs = jreq(f, "centers", path);
        const json& ws = jreq(f, "widths", path);
        const json& as = jreq(f, "amps", path);
        if (cs.size() != ws.size() || cs.size() != as.size())
            throw ConfigError("field '" + path + "': centers/widths/amps sizes differ");
        for (int i = 0; i < g.size(); ++i) {
            double x = g.coords(i)[0], v = base;
            for (std::size_t b = 0; b < cs.size(); ++b) {
                double u = (x - cs[b].get<double>()) / ws[b].get<double>();
                v += as[b].get<double>() * std::exp(-u * u);
            }
            out(i) = v;
        }
    } else if (kind == "cosine") {
        double base = jnum(f, "base", path);
        const json& as = jreq(f, "amps", path);
        for (int i = 0; i < g.size(); ++i) {
            double x = g.coords(i)[0], v = base;
            for (std::size_t m = 0; m < as.size(); ++m)
                v += as[m].get<double>() *
                     std::cos(2.0 * M_PI * (m + 1) * x / g.L[0]);
            out(i) = v;
        }
    } else if (kind == "values") {
        const json& vs = jreq(f, "values", path);
        if (static_cast<int>(vs.size()) != g.size())
            throw ConfigError("field '" + path + ".values' length must equal the grid size");
        for (int i = 0; i < g.size(); ++i) out(i) = vs[i].get<double>();
    } else {
        throw ConfigError("field '" + path + ".kind' unknown: " + kind);
    }
    return out;
}

CoeffFields parse_phantom(const json& cfg, const Grid& g) {
    const json& p = jreq(cfg, "phantom", "");
    CoeffFields c;
    c.Meq = parse_field(jreq(p, "Meq", "phantom"), g, "phantom.Meq");
    c.R1 = parse_field(jreq(p, "R1", "phantom"), g, "phantom.R1");
    const json& r2 = jreq(p, "R2star", "phantom");
    VecXd re = parse_field(jreq(r2, "re", "phantom.R2star"), g, "phantom.R2star.re");
    VecXd im = r2.contains("im")
                   ? parse_field(r2.at("im"), g, "phantom.R2star.im")
                   : VecXd::Zero(g.size());
    c.R2star.resize(g.size());
    for (int i = 0; i < g.size(); ++i) c.R2star(i) = cd(re(i), im(i));
    c.validate(g);
    return c;
}

ModelParams parse_model(const json& cfg, const Grid& g) {
    ModelParams m;
    if (!cfg.contains("model")) {
        m.validate(g);
        return m;
    }
    const json& mj = cfg.at("model");
    if (mj.contains("D0")) {
        const json& d = mj.at("D0");
        if (d.is_number()) {
            m.D0 = Mat3::Identity() * d.get<double>();
        } else if (d.is_array() && d.size() == 6) {
            m.D0 << d[0].get<double>(), d[3].get<double>(), d[4].get<double>(),
                d[3].get<double>(), d[1].get<double>(), d[5].get<double>(),
                d[4].get<double>(), d[5].get<double>(), d[2].get<double>();
        } else {
            throw ConfigError("field 'model.D0' must be a number or 6-vector");
        }
    }
    if (mj.contains("v0")) m.v0 = jvec3(mj.at("v0"), "model.v0");
    if (mj.contains("cplus0")) m.cplus0 = jcomplex(mj.at("cplus0"), "model.cplus0");
    m.validate(g);
    return m;
}

CoilSet parse_coils(const json& cfg, const Grid& g) {
    if (!cfg.contains("coils"))
        return CoilSet::constant(g, VecXcd::Ones(1));
    const json& cj = cfg.at("coils");
    std::string kind = jstr_or(cj, "kind", "constant");
    if (kind == "constant") {
        const json& vals = jreq(cj, "values", "coils");
        VecXcd c0(vals.size());
        for (std::size_t j = 0; j < vals.size(); ++j)
            c0(j) = jcomplex(vals[j], "coils.values");
        return CoilSet::constant(g, c0);
    }
    if (kind == "modulated") {
        int J = jint_or(cj, "ncoils", 2);
        double depth = jnum_or(cj, "depth", 0.3);
        CoilSet cs;
        cs.c.resize(g.size(), J);
        for (int j = 0; j < J; ++j)
            for (int i = 0; i < g.size(); ++i) {
                double x = g.coords(i)[0];
                cs.c(i, j) = cd(1.0 + depth * std::cos(2.0 * M_PI * x / g.L[0] +
                                                       2.0 * M_PI * j / J),
                                0.0);
            }
        cs.validate(g);
        return cs;
    }
    throw ConfigError("field 'coils.kind' unknown: " + kind);
}

struct SequenceSet {
    std::array<PulseSequence, 3> seqs;
    std::vector<double> clock;
    PiecewiseConstant G;
    double taup = 0.0, tau1 = 0.0, tau2 = 0.0;
};

SequenceSet build_sequences(const json& cfg, const ModelParams& m, double gamma) {
    const json& s = jreq(cfg, "sequence", "");
    SequenceSet out;
    out.taup = jnum(s, "taup", "sequence");
    out.tau1 = jnum(s, "tau1", "sequence");
    out.tau2 = jnum(s, "tau2", "sequence");
    double T = jnum(s, "T", "sequence");
    double rs = jnum(s, "readout_start", "sequence");
    Vec3 Gv = s.contains("G") && s.at("G").is_array()
                  ? jvec3(s.at("G"), "sequence.G")
                  : Vec3::Zero();
    int ns = jint_or(s, "n_samples", 512);
    if (ns < 2) throw ConfigError("field 'sequence.n_samples' must be >= 2");
    double t3 = out.tau2 + 2.0 * out.taup;
    if (rs < t3)
        throw ConfigError(
            "field 'sequence.readout_start' must be >= tau2 + 2*taup");
    if (m.cplus0.imag() != 0.0)
        throw ConfigError("field 'model.cplus0' must be real for sequence "
                          "construction");
    if (s.contains("G") && s.at("G").is_object()) {
        // bipolar lobe: -g for the first third of the readout, +g after, so
        // the k-space trajectory sweeps symmetrically through both signs
        const json& gj = s.at("G");
        if (jstr_or(gj, "kind", "") != "bipolar")
            throw ConfigError("field 'sequence.G.kind' unknown");
        Vec3 gv = jvec3(jreq(gj, "g", "sequence.G"), "sequence.G.g");
        double mid = rs + (T - rs) / 3.0;
        out.G.knots = {rs, mid, T};
        out.G.values = {-gv, gv};
    } else {
        out.G = Gv.norm() > 0.0 ? PiecewiseConstant::constant(Gv, rs, T)
                                : PiecewiseConstant::zero();
    }
    out.seqs[0] = make_sequence(SeqKind::Ninety, m.cplus0.real(), out.taup, 0.0,
                                T, out.G, gamma, rs);
    out.seqs[1] = make_sequence(SeqKind::OneEightyTauNinety, m.cplus0.real(),
                                out.taup, out.tau1, T, out.G, gamma, rs);
    out.seqs[2] = make_sequence(SeqKind::OneEightyTauNinety, m.cplus0.real(),
                                out.taup, out.tau2, T, out.G, gamma, rs);
    out.clock.resize(ns);
    for (int i = 0; i < ns; ++i)
        out.clock[i] = rs + (T - rs) * i / (ns - 1);
    return out;
}

ForwardConfig build_forward_config(const json& cfg, const Grid& g,
                                   const ModelParams& m, const CoilSet& coils,
                                   const SequenceSet& ss) {
    ForwardConfig fc;
    fc.grid = g;
    fc.seqs = ss.seqs;
    fc.engine = engine_from_name(jstr_or(cfg, "engine", "explicit-form"));
    fc.coils = coils;
    fc.clock = ss.clock;
    fc.model = m;
    fc.torrey_dt = jnum_or(cfg, "torrey_dt", 1e-3);
    return fc;
}

// ---- experiment executors ----

struct RunPaths {
    fs::path out;
    std::vector<std::string> written;

    void write(const std::string& name, const std::string& content) {
        write_text_file((out / name).string(), content);
        written.push_back(name);
    }
    void write(const std::string& name, const json& j) {
        write_json_file((out / name).string(), j);
        written.push_back(name);
    }
};

double rel_l2(const VecXd& a, const VecXd& b, const std::vector<int>& skip = {}) {
    double num = 0.0, den = 0.0;
    std::vector<bool> mask(a.size(), false);
    for (int i : skip) mask[i] = true;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (mask[i]) continue;
        num += (a(i) - b(i)) * (a(i) - b(i));
        den += b(i) * b(i);
    }
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

double rel_l2c(const VecXcd& a, const VecXcd& b, const std::vector<int>& skip = {}) {
    double num = 0.0, den = 0.0;
    std::vector<bool> mask(a.size(), false);
    for (int i : skip) mask[i] = true;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (mask[i]) continue;
        num += std::norm(a(i) - b(i));
        den += std::norm(b(i));
    }
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

Measurement to_measurement(const Eigen::MatrixXcd& y, const SequenceSet& ss,
                           int s, double sigma, std::uint64_t seed) {
    Measurement m;
    m.times = ss.clock;
    m.y = y;
    m.seq_kind = s == 0 ? "ninety" : "inversion-recovery";
    m.taup = ss.taup;
    m.tau = s == 0 ? 0.0 : (s == 1 ? ss.tau1 : ss.tau2);
    if (sigma > 0.0) return add_noise(m, sigma, seed + s);
    return m;
}

void do_forward(const json& cfg, std::uint64_t seed, RunPaths& rp) {
    Grid g = parse_grid(cfg);
    CoeffFields x = parse_phantom(cfg, g);
    ModelParams m = parse_model(cfg, g);
    CoilSet coils = parse_coils(cfg, g);
    SequenceSet ss = build_sequences(cfg, m, consts::gamma_proton);
    ForwardConfig fc = build_forward_config(cfg, g, m, coils, ss);
    double sigma = cfg.contains("noise") ? jnum_or(cfg.at("noise"), "sigma", 0.0) : 0.0;

    StackedSeries F = forward_F(x, fc);
    const char* names[3] = {"measurement_I", "measurement_II", "measurement_III"};
    for (int s = 0; s < 3; ++s) {
        Measurement meas = to_measurement(F.y[s], ss, s, sigma, seed);
        rp.write(std::string(names[s]) + ".csv", measurement_csv(meas));
        rp.write(std::string(names[s]) + ".json", measurement_sidecar(meas));
    }
}

void do_recon(const json& cfg, std::uint64_t seed, RunPaths& rp) {
    Grid g = parse_grid(cfg);
    CoeffFields truth = parse_phantom(cfg, g);
    ModelParams m = parse_model(cfg, g);
    CoilSet coils = parse_coils(cfg, g);
    SequenceSet ss = build_sequences(cfg, m, consts::gamma_proton);
    ForwardConfig fc = build_forward_config(cfg, g, m, coils, ss);
    const json& rj = cfg.contains("recon") ? cfg.at("recon") : json::object();
    double sigma = cfg.contains("noise") ? jnum_or(cfg.at("noise"), "sigma", 0.0) : 0.0;

    StackedSeries F = forward_F(truth, fc);
    Measurement mI = to_measurement(F.y[0], ss, 0, sigma, seed);
    Measurement mII = to_measurement(F.y[1], ss, 1, sigma, seed);
    Measurement mIII = to_measurement(F.y[2], ss, 2, sigma, seed);

    cd R2ref = rj.contains("R2ref") ? jcomplex(rj.at("R2ref"), "recon.R2ref")
                                    : truth.R2star.mean();
    std::vector<Vec3> ks = k_trajectory(ss.G, consts::gamma_proton, ss.clock);
    double tol = jnum_or(rj, "ansatz_tol", 0.5 / g.L[0]);
    AnsatzSpace X = build_ansatz(ks, g, tol);

    InterpResult meq = recon_Meq(mI, R2ref, X, coils);
    auto phi_field = [&](const Measurement& mm) {
        Eigen::MatrixXcd yh = demodulate(mm, R2ref, mm.tau + 2.0 * mm.taup, +1);
        return interp_inverse(yh, ks, coils, X);
    };
    InterpResult phi1f = phi_field(mII);
    InterpResult phi2f = phi_field(mIII);

    std::string r1_mode = jstr_or(rj, "r1_mode", "known-meq");
    R1Result r1 = r1_mode == "two-tau"
                      ? recon_R1_two_tau(phi1f.x, phi2f.x, ss.tau1, ss.tau2)
                      : recon_R1_known_meq(phi1f.x, meq.x, ss.tau1);
    R2starResult r2 = recon_R2star(mI, meq.x, ss.G, X, coils);

    rp.write("recon_meq.csv", field_csv(g, meq.x));
    rp.write("recon_r1.csv", field_csv(g, r1.R1));
    rp.write("recon_r2star.csv", field_csv(g, r2.R2star));

    std::vector<int> skip2 = r2.masked;
    json rep{{"C_I", X.C_I},
             {"ansatz_modes", X.nmodes()},
             {"residuals",
              {{"meq", meq.residual},
               {"phi_tau1", phi1f.residual},
               {"phi_tau2", phi2f.residual},
               {"r2star_interp", r2.interp_residual}}},
             {"gn_iterations", r2.gn_history.size()},
             {"r2star0", {r2.R2star0.real(), r2.R2star0.imag()}},
             {"masked", {{"r1", r1.masked.size()}, {"r2star", r2.masked.size()}}},
             {"errors",
              {{"meq", rel_l2(meq.x.real(), truth.Meq)},
               {"r1", rel_l2(r1.R1, truth.R1, r1.masked)},
               {"r2star", rel_l2c(r2.R2star, truth.R2star, skip2)}}}};
    rp.write("recon_report.json", rep);
}

CoeffFields perturbed_start(const CoeffFields& truth, const Grid& g, double p) {
    CoeffFields x0 = truth;
    for (int i = 0; i < g.size(); ++i) {
        double ph = 2.0 * M_PI * g.coords(i)[0] / g.L[0];
        x0.Meq(i) *= 1.0 + p * std::cos(ph);
        x0.R1(i) *= 1.0 + p * std::cos(ph + 1.0);
        x0.R2star(i) *= 1.0 + p * std::cos(ph + 2.0);
    }
    return x0;
}

json do_newton(const json& cfg, std::uint64_t seed, RunPaths* rp) {
    Grid g = parse_grid(cfg);
    CoeffFields truth = parse_phantom(cfg, g);
    ModelParams m = parse_model(cfg, g);
    CoilSet coils = parse_coils(cfg, g);
    SequenceSet ss = build_sequences(cfg, m, consts::gamma_proton);
    ForwardConfig fc = build_forward_config(cfg, g, m, coils, ss);
    const json& nj = cfg.contains("newton") ? cfg.at("newton") : json::object();
    double sigma = cfg.contains("noise") ? jnum_or(cfg.at("noise"), "sigma", 0.0) : 0.0;

    StackedSeries ydata = forward_F(truth, fc);
    if (sigma > 0.0) {
        for (int s = 0; s < 3; ++s) {
            Measurement mm = to_measurement(ydata.y[s], ss, s, sigma, seed);
            ydata.y[s] = mm.y;
        }
    }

    CoeffFields x0 = perturbed_start(truth, g, jnum_or(nj, "x0_rel_perturb", 0.1));
    NewtonOptions opts;
    opts.tol = jnum_or(nj, "tol", 1e-10);
    opts.max_iter = jint_or(nj, "max_iter", 20);
    opts.truth = &truth;
    NewtonVariant variant = jstr_or(nj, "variant", "full") == "frozen"
                                ? NewtonVariant::Frozen
                                : NewtonVariant::Full;
    NewtonResult res = newton_solve(ydata, x0, fc, variant, opts);

    std::vector<double> errs;
    for (const auto& h : res.history)
        if (h.error_to_truth >= 0.0) errs.push_back(h.error_to_truth);
    double order = 0.0;
    bool have_order = false;
    try {
        order = fit_order(errs);
        have_order = true;
    } catch (const NumericsError&) {
    }

    json rep{{"converged", res.converged},
             {"iterations", res.history.empty() ? 0 : res.history.back().n},
             {"final_residual",
              res.history.empty() ? -1.0 : res.history.back().residual},
             {"final_error", errs.empty() ? -1.0 : errs.back()},
             {"fitted_order", have_order ? json(order) : json()}};
    if (rp) {
        rp->write("newton_history.csv", newton_csv(res.history));
        rp->write("newton_meq.csv", field_csv(g, res.x.Meq));
        rp->write("newton_r1.csv", field_csv(g, res.x.R1));
        rp->write("newton_r2star.csv", field_csv(g, res.x.R2star));
        rp->write("newton_report.json", rep);
    }
    return rep;
}

void do_spectral(const json& cfg, RunPaths& rp) {
    Grid g = parse_grid(cfg);
    CoeffFields cref = parse_phantom(cfg, g);
    ModelParams m = parse_model(cfg, g);
    CoilSet coils = parse_coils(cfg, g);
    const json& sj = cfg.contains("spectral") ? cfg.at("spectral") : json::object();
    double tau1 = jnum_or(sj, "tau1", 0.3);
    double tau2 = jnum_or(sj, "tau2", 0.7);
    int count = jint_or(sj, "count", 10);
    int nmodes = jint_or(sj, "nmodes", 3);
    Vec3 G0 = sj.contains("G0") ? jvec3(sj.at("G0"), "spectral.G0") : Vec3::Zero();

    std::vector<Vec3> ks;
    for (int mm = 0; mm < nmodes; ++mm)
        ks.push_back(Vec3(mm / g.L[0], 0.0, 0.0));
    AnsatzSpace X = build_ansatz(ks, g, 1e-9 + 0.0 * g.L[0]);

    SpectralCertificate cert = certify_uniqueness(
        g, cref, m, G0, BoundarySpec{}, X, coils, tau1, tau2, count);
    rp.write("certificate.json", certificate_json(cert));
}

// ---- sweep metrics ----

json cfg_with_param(const json& cfg, const std::string& param, double value) {
    json c = cfg;
    if (param == "taup")
        c["sequence"]["taup"] = value;
    else if (param == "dt")
        c["torrey_dt"] = value;
    else if (param == "sigma")
        c["noise"]["sigma"] = value;
    else if (param == "n") {
        int n = static_cast<int>(std::lround(value));
        c["grid"]["n"][0] = n;
    } else
        throw ConfigError("sweep parameter '" + param +
                          "' not sweepable (taup, dt, sigma, n)");
    return c;
}

double sweep_metric(const json& cfg, const std::string& param,
                    std::uint64_t seed) {
    Grid g = parse_grid(cfg);
    CoeffFields x = parse_phantom(cfg, g);
    ModelParams m = parse_model(cfg, g);
    SequenceSet ss = build_sequences(cfg, m, consts::gamma_proton);

    if (param == "taup") {
        // state-level gap between the piecewise-exact solution and the
        // thin-pulse closed form, sup over the readout and the grid
        VecXcd cp = m.cplus.size() ? m.cplus
                                   : VecXcd::Constant(g.size(), m.cplus0);
        double gap = 0.0, scale = 0.0;
        for (int s = 0; s < 3; ++s) {
            auto traj = solve_bloch(ss.seqs[s], x, cp, g, consts::gamma_proton,
                                    BlochOptions{}, ss.clock);
            for (std::size_t i = 0; i < ss.clock.size(); ++i) {
                VecXcd ex = explicit_state(ss.seqs[s], x, g,
                                           consts::gamma_proton, ss.clock[i]);
                gap = std::max(gap, (traj[i].Mperp - ex).cwiseAbs().maxCoeff());
                scale = std::max(scale, ex.cwiseAbs().maxCoeff());
            }
        }
        return scale > 0.0 ? gap / scale : gap;
    }
    if (param == "dt") {
        double dt = jnum_or(cfg, "torrey_dt", 1e-3);
        auto R = solve_bt(ss.seqs[0], x, m, BoundarySpec{}, TorreySource{}, g,
                          consts::gamma_proton, dt, ss.seqs[0].T);
        VecXd res = energy_residual(R, g, x, m, BoundarySpec{});
        return res.maxCoeff();
    }
    if (param == "sigma") {
        json rep = do_newton(cfg, seed, nullptr);
        return rep.at("final_error").get<double>();
    }
    if (param == "n") {
        // constant-coefficient cross-solver gap at the final time
        ConstCoeffs cc = const_coeffs_from(x, m, g);
        auto R = solve_bt(ss.seqs[0], x, m, BoundarySpec{}, TorreySource{}, g,
                          consts::gamma_proton, jnum_or(cfg, "torrey_dt", 1e-3),
                          ss.seqs[0].T);
        VecXcd meq_hat = dft_grid(x.Meq, g);
        std::vector<double> tf{ss.seqs[0].T};
        auto ks = solve_kspace(ss.seqs[0], cc, meq_hat, g, consts::gamma_proton, tf);
        VecXcd t_hat = dft_grid(R.states.back().Mperp, g);
        return (t_hat - ks.back().Mphat).norm() / ks.back().Mphat.norm();
    }
    throw ConfigError("sweep parameter '" + param + "' has no metric");
}

void do_sweep(const json& cfg, const std::string& param,
              const std::vector<double>& values, std::uint64_t seed,
              int threads, RunPaths& rp) {
    if (values.empty()) throw ConfigError("sweep: no values given");
    cfg_with_param(cfg, param, values.front()); // surface bad names before the pool
    std::vector<double> metrics(values.size(), 0.0);
    std::vector<std::string> errors(values.size());

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= values.size()) return;
            try {
                json c = cfg_with_param(cfg, param, values[i]);
                metrics[i] = sweep_metric(c, param, seed);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    int nw = std::max(1, std::min<int>(threads, static_cast<int>(values.size())));
    std::vector<std::thread> pool;
    for (int w = 0; w < nw; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    for (std::size_t i = 0; i < values.size(); ++i)
        if (!errors[i].empty())
            throw NumericsError("sweep value " + format_double(values[i]) +
                                ": " + errors[i]);

    std::ostringstream os;
    os << "value,metric\n";
    for (std::size_t i = 0; i < values.size(); ++i)
        os << format_double(values[i]) << "," << format_double(metrics[i]) << "\n";
    rp.write("sweep.csv", os.str());

    json rep{{"param", param}, {"values", values}, {"metrics", metrics}};
    if (values.size() >= 2) {
        bool pos = true;
        for (std::size_t i = 0; i < values.size(); ++i)
            pos = pos && values[i] > 0.0 && metrics[i] > 0.0;
        if (pos) {
            double xm = 0.0, ym = 0.0;
            std::vector<double> lx(values.size()), ly(values.size());
            for (std::size_t i = 0; i < values.size(); ++i) {
                lx[i] = std::log(values[i]);
                ly[i] = std::log(metrics[i]);
                xm += lx[i];
                ym += ly[i];
            }
            xm /= values.size();
            ym /= values.size();
            double num = 0.0, den = 0.0;
            for (std::size_t i = 0; i < values.size(); ++i) {
                num += (lx[i] - xm) * (ly[i] - ym);
                den += (lx[i] - xm) * (lx[i] - xm);
            }
            rep["slope"] = num / den;
        } else {
            rep["slope"] = json();
        }
    } else {
        rep["slope"] = json();
    }
    rp.write("sweep_report.json", rep);
}

// ---- driver ----

int run_experiment(json cfg, const std::string& out_flag,
                   std::int64_t seed_flag, int threads,
                   const std::string& sweep_param,
                   const std::vector<double>& sweep_values) {
    std::string kind = jstr_or(cfg, "kind", "");
    if (kind.empty()) throw ConfigError("missing field 'kind'");

    std::uint64_t seed = seed_flag >= 0
                             ? static_cast<std::uint64_t>(seed_flag)
                             : static_cast<std::uint64_t>(jint_or(cfg, "seed", 0));

    RunPaths rp;
    rp.out = out_flag.empty() ? fs::path(jstr_or(cfg, "out", "out")) : fs::path(out_flag);
    fs::create_directories(rp.out);

    std::string param = sweep_param;
    std::vector<double> values = sweep_values;
    if (kind == "sweep" && param.empty() && cfg.contains("sweep")) {
        param = jstr_or(cfg.at("sweep"), "param", "");
        if (cfg.at("sweep").contains("values"))
            for (const auto& v : cfg.at("sweep").at("values"))
                values.push_back(v.get<double>());
    }

    if (kind == "forward")
        do_forward(cfg, seed, rp);
    else if (kind == "recon")
        do_recon(cfg, seed, rp);
    else if (kind == "newton")
        do_newton(cfg, seed, &rp);
    else if (kind == "spectral")
        do_spectral(cfg, rp);
    else if (kind == "sweep") {
        if (param.empty())
            throw ConfigError("sweep needs --param or a 'sweep.param' field");
        do_sweep(cfg, param, values, seed, threads, rp);
    } else
        throw ConfigError("field 'kind' unknown: " + kind);

    std::string canon = cfg.dump() + "|seed=" + std::to_string(seed) +
                        "|param=" + param;
    for (double v : values) canon += "," + format_double(v);
    std::sort(rp.written.begin(), rp.written.end());
    json manifest{{"config_hash", hash_hex(canon)},
                  {"seed", seed},
                  {"kind", kind},
                  {"versions",
                   {{"btcli", "0.1.0"},
                    {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                  std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                  std::to_string(EIGEN_MINOR_VERSION)},
                    {"compiler", __VERSION__}}},
                  {"outputs", rp.written}};
    write_json_file((rp.out / "manifest.json").string(), manifest);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bloch/Bloch-Torrey simulation, reconstruction and inversion"};
    app.require_subcommand(1);

    std::string spec_path, out_dir, sweep_param, values_csv;
    std::int64_t seed = -1;
    int threads = 1;

    CLI::App* run = app.add_subcommand("run", "execute an experiment spec");
    run->add_option("spec", spec_path, "spec JSON path")->required();
    run->add_option("--out", out_dir, "output directory (overrides spec)");
    run->add_option("--seed", seed, "seed (overrides spec)");
    run->add_option("--threads", threads, "worker threads");

    CLI::App* sweep = app.add_subcommand("sweep", "run a parameter sweep");
    sweep->add_option("spec", spec_path, "spec JSON path")->required();
    sweep->add_option("--param", sweep_param, "parameter to sweep");
    sweep->add_option("--values", values_csv, "comma-separated values");
    sweep->add_option("--out", out_dir, "output directory (overrides spec)");
    sweep->add_option("--seed", seed, "seed (overrides spec)");
    sweep->add_option("--threads", threads, "worker threads");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    std::vector<double> values;
    try {
        if (!values_csv.empty()) {
            std::istringstream is(values_csv);
            std::string tok;
            while (std::getline(is, tok, ',')) values.push_back(std::stod(tok));
        }
    } catch (const std::exception&) {
        std::cerr << "config error: --values must be comma-separated numbers\n";
        return 2;
    }

    try {
        json cfg = read_json_file(spec_path);
        if (app.got_subcommand("sweep")) {
            cfg["kind"] = "sweep";
            return run_experiment(std::move(cfg), out_dir, seed, threads,
                                  sweep_param, values);
        }
        return run_experiment(std::move(cfg), out_dir, seed, threads, "", {});
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
