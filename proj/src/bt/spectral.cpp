#include "bt/spectral.h"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "bt/errors.h"
#include "bt/kspace.h"

namespace bt {

GeneratorPair assemble_generators(const Grid& g, const CoeffFields& cref,
                                  const ModelParams& m, const Vec3& G0,
                                  const BoundarySpec& bc, double gamma) {
    cref.validate(g);
    m.validate(g);
    bc.validate();
    const int n = g.size();

    TorreyOperators ops = assemble_operators(g, cref, m, bc);
    Eigen::MatrixXd Kz = Eigen::MatrixXd(ops.K_z);
    Eigen::MatrixXd Kp = Eigen::MatrixXd(ops.K_perp);

    GeneratorPair out;
    out.bc = bc;
    out.Az = Kz;
    out.Az.diagonal() += cref.R1;

    VecXd re2 = cref.R2star.real();
    VecXd w(n);
    for (int i = 0; i < n; ++i)
        w(i) = cref.R2star(i).imag() + gamma * G0.dot(g.coords(i));

    out.Aperp = Eigen::MatrixXd::Zero(2 * n, 2 * n);
    out.Aperp.topLeftCorner(n, n) = Kp;
    out.Aperp.topLeftCorner(n, n).diagonal() += re2;
    out.Aperp.bottomRightCorner(n, n) = out.Aperp.topLeftCorner(n, n);
    out.Aperp.topRightCorner(n, n).diagonal() = -w;
    out.Aperp.bottomLeftCorner(n, n).diagonal() = w;

    out.Lperp = Kp.cast<cd>();
    for (int i = 0; i < n; ++i)
        out.Lperp(i, i) += cd(cref.R2star(i).real(), w(i));
    return out;
}

EigenSystem eigen_projectors(const Eigen::MatrixXcd& A, int count) {
    const int n = static_cast<int>(A.rows());
    if (A.cols() != n) throw ConfigError("eigen_projectors: square matrix required");
    if (count < 1 || count > n)
        throw ConfigError("eigen_projectors: count out of range");

    Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(A, true);
    if (es.info() != Eigen::Success)
        throw NumericsError("eigen_projectors: eigen decomposition failed");
    VecXcd vals = es.eigenvalues();
    Eigen::MatrixXcd V = es.eigenvectors();

    // left eigenvectors as rows of V^{-1}; blow-up there signals a defective
    // (non-diagonalizable) eigenvalue
    Eigen::PartialPivLU<Eigen::MatrixXcd> lu(V);
    Eigen::MatrixXcd W = lu.solve(Eigen::MatrixXcd::Identity(n, n));

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        double ra = std::abs(vals(a).real()), rb = std::abs(vals(b).real());
        if (ra != rb) return ra < rb;
        return vals(a).imag() < vals(b).imag();
    });

    const double scale = vals.cwiseAbs().maxCoeff();
    const double cluster_tol = 1e-8 * std::max(scale, 1.0);

    EigenSystem out;
    std::vector<cd> cvals;
    int i = 0;
    while (i < n && static_cast<int>(cvals.size()) < count) {
        int jend = i + 1;
        while (jend < n &&
               std::abs(vals(order[jend]) - vals(order[i])) <= cluster_tol)
            ++jend;
        Eigen::MatrixXcd P = Eigen::MatrixXcd::Zero(n, n);
        cd mean(0.0, 0.0);
        for (int k = i; k < jend; ++k) {
            int idx = order[k];
            double sep = V.col(idx).norm() * W.row(idx).norm();
            if (sep > 1e8) {
                std::ostringstream os;
                os << "eigen_projectors: defective eigenvalue near "
                   << vals(idx).real() << "+" << vals(idx).imag()
                   << "i (cluster " << cvals.size() << ")";
                throw NumericsError(os.str());
            }
            P += V.col(idx) * W.row(idx);
            mean += vals(idx);
        }
        mean /= static_cast<double>(jend - i);
        out.P.push_back(P);
        out.multiplicity.push_back(jend - i);
        cvals.push_back(mean);
        i = jend;
    }
    out.values = Eigen::Map<VecXcd>(cvals.data(), cvals.size());
    return out;
}

ABCoeffs coeffs_AB(double lambda_z, double tauJ, double R10, double mu_barJ,
                   const std::function<double(double)>& mz_ref) {
    if (lambda_z == 0.0) throw DomainError("coeffs_AB: lambda = 0");
    if (!(lambda_z > 0.0)) throw DomainError("coeffs_AB: lambda must be positive");
    if (!(tauJ >= 0.0)) throw ConfigError("coeffs_AB: negative tau");
    ABCoeffs out;
    double e = std::exp(-lambda_z * tauJ);
    out.A = e - (R10 / lambda_z) * (1.0 - e) + mu_barJ;
    // Gauss-Legendre in u = tau - s on a dyadic mesh refined toward u = 0:
    // stiff modes concentrate the kernel exp(-lambda u) in a layer of width
    // 1/lambda that uniform panels would step right over
    static std::vector<double> nodes, weights;
    if (nodes.empty()) gauss_legendre(16, nodes, weights);
    int levels = 3;
    if (lambda_z * tauJ > 1.0)
        levels = std::max(3, static_cast<int>(std::ceil(
                                 std::log2(lambda_z * tauJ))) + 2);
    std::vector<double> edges{0.0};
    for (int k = levels - 1; k >= 0; --k)
        edges.push_back(tauJ * std::ldexp(1.0, -k));
    double B = 0.0;
    for (std::size_t p = 0; p + 1 < edges.size(); ++p) {
        double hm = 0.5 * (edges[p + 1] - edges[p]);
        double cm = 0.5 * (edges[p + 1] + edges[p]);
        for (std::size_t q = 0; q < nodes.size(); ++q) {
            double u = cm + hm * nodes[q];
            B += hm * weights[q] * mz_ref(tauJ - u) * std::exp(-lambda_z * u);
        }
    }
    out.B = B;
    return out;
}

ABCoeffs coeffs_AB_exp(double lambda_z, double tauJ, double R10, double mu_barJ,
                       double R1tilde0) {
    if (lambda_z == 0.0) throw DomainError("coeffs_AB: lambda = 0");
    if (!(lambda_z > 0.0)) throw DomainError("coeffs_AB: lambda must be positive");
    ABCoeffs out;
    double e = std::exp(-lambda_z * tauJ);
    out.A = e - (R10 / lambda_z) * (1.0 - e) + mu_barJ;
    // B = -2 (exp(-R~ tau) - exp(-lambda tau)) / (lambda - R~), written with
    // phi1 so the removable singularity at lambda = R~ evaluates cleanly
    cd ph = phi1(cd((lambda_z - R1tilde0) * tauJ, 0.0));
    out.B = -2.0 * e * tauJ * ph.real();
    return out;
}

DetReport det_condition(const std::vector<double>& lambda_z, double tau1,
                        double tau2, double R10, double R1tilde0) {
    if (!(tau1 > 0.0 && tau1 < tau2))
        throw ConfigError("det_condition: requires 0 < tau1 < tau2");
    DetReport rep;
    for (double lam : lambda_z) {
        double mu1 = 1.0 - 2.0 * std::exp(-R1tilde0 * tau1);
        double mu2 = 1.0 - 2.0 * std::exp(-R1tilde0 * tau2);
        ABCoeffs c1 = coeffs_AB_exp(lam, tau1, R10, mu1, R1tilde0);
        ABCoeffs c2 = coeffs_AB_exp(lam, tau2, R10, mu2, R1tilde0);
        double det = c1.A * c2.B - c2.A * c1.B;

        // factored form: 2 (lambda - R10)/lambda *
        //   [tau1 e^{-lam tau1} phi1((lam-R~)tau1) (1 - e^{-R~ tau2})
        //    - tau2 e^{-lam tau2} phi1((lam-R~)tau2) (1 - e^{-R~ tau1})]
        double p1 = phi1(cd((lam - R1tilde0) * tau1, 0.0)).real();
        double p2 = phi1(cd((lam - R1tilde0) * tau2, 0.0)).real();
        double closed =
            2.0 * (lam - R10) / lam *
            (tau1 * std::exp(-lam * tau1) * p1 *
                 (1.0 - std::exp(-R1tilde0 * tau2)) -
             tau2 * std::exp(-lam * tau2) * p2 *
                 (1.0 - std::exp(-R1tilde0 * tau1)));

        double scale = std::hypot(c1.A, c1.B) * std::hypot(c2.A, c2.B);
        rep.det_direct.push_back(det);
        rep.det_closed.push_back(closed);
        rep.scale.push_back(scale);
        if (std::abs(det) < 1e-12 * scale) rep.all_nonzero = false;
    }
    return rep;
}

namespace {

struct SymEig {
    Eigen::MatrixXd V;
    VecXd lam;
};

SymEig sym_eig(const Eigen::MatrixXd& Az) {
    double asym = (Az - Az.transpose()).norm();
    if (asym > 1e-10 * std::max(1.0, Az.norm()))
        throw NumericsError(
            "semigroup: longitudinal generator is not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Az);
    if (es.info() != Eigen::Success)
        throw NumericsError("semigroup: eigen decomposition failed");
    return {es.eigenvectors(), es.eigenvalues()};
}

} // namespace

Eigen::MatrixXd semigroup_E(const Eigen::MatrixXd& Az, const VecXd& R1field,
                            double tau) {
    SymEig se = sym_eig(Az);
    VecXd em = (-se.lam.array() * tau).exp();
    Eigen::MatrixXd Em = se.V * em.asDiagonal() * se.V.transpose();
    Eigen::MatrixXd I = Eigen::MatrixXd::Identity(Az.rows(), Az.cols());
    Eigen::MatrixXd AinvR =
        Az.partialPivLu().solve(Eigen::MatrixXd(R1field.asDiagonal()));
    return -Em + (I - Em) * AinvR;
}

Eigen::MatrixXd semigroup_Etilde(const Eigen::MatrixXd& Az, double R1tilde0,
                                 double tau) {
    SymEig se = sym_eig(Az);
    VecXd mult(se.lam.size());
    for (Eigen::Index i = 0; i < se.lam.size(); ++i) {
        double e = std::exp(-se.lam(i) * tau);
        cd ph = phi1(cd((se.lam(i) - R1tilde0) * tau, 0.0));
        mult(i) = -2.0 * e * tau * ph.real();
    }
    return se.V * mult.asDiagonal() * se.V.transpose();
}

VecXcd mu_I_profile(const Grid& g, const VecXd& Meq_ref, cd R2tilde0,
                    const Vec3& G0, cd lambda_perp, double gamma) {
    VecXcd mu(g.size());
    for (int i = 0; i < g.size(); ++i) {
        cd den = R2tilde0 + cd(0.0, gamma * G0.dot(g.coords(i))) + lambda_perp;
        if (std::abs(den) == 0.0)
            throw DomainError("mu_I_profile: vanishing decay denominator");
        mu(i) = cd(0.0, -1.0) * Meq_ref(i) / den;
    }
    return mu;
}

namespace {

// plain (bilinear) pairing of the conjugate coil with a field
cd pair_with_coil(const VecXcd& cbar_j, const VecXcd& f, double vol) {
    return cbar_j.cwiseProduct(f).sum() * vol;
}

} // namespace

RankTestResult uniqueness_rank_test(const Grid& g, const CoeffFields& x_ref,
                                    const ModelParams& m, const Vec3& G0,
                                    const BoundarySpec& bc,
                                    const AnsatzSpace& X, const CoilSet& coils,
                                    double tau1, double tau2, int count,
                                    double gamma) {
    if (!(tau1 > 0.0 && tau1 < tau2))
        throw ConfigError("uniqueness_rank_test: requires 0 < tau1 < tau2");
    coils.validate(g);
    if (!(X.grid == g))
        throw ConfigError("uniqueness_rank_test: ansatz grid mismatch");

    const int n = g.size();
    const int M = X.nmodes();
    const int J = coils.ncoils();
    const double vol = g.cellvol();

    // reference rates must be spatially constant for the mode expansion
    const double R1t = x_ref.R1(0);
    const cd R2t = x_ref.R2star(0);
    for (int i = 0; i < n; ++i)
        if (x_ref.R1(i) != R1t || x_ref.R2star(i) != R2t)
            throw ConfigError(
                "uniqueness_rank_test: reference rates must be constant");

    GeneratorPair gen = assemble_generators(g, x_ref, m, G0, bc, gamma);
    EigenSystem perp = eigen_projectors(gen.Lperp, count);
    const int L = static_cast<int>(perp.P.size());

    // mu-condition: the transverse reference decay must not vanish anywhere
    std::vector<VecXcd> muI(L);
    for (int l = 0; l < L; ++l) {
        muI[l] = mu_I_profile(g, x_ref.Meq, R2t, G0, perp.values(l), gamma);
        double mx = muI[l].cwiseAbs().maxCoeff();
        double mn = muI[l].cwiseAbs().minCoeff();
        if (!(mn > 1e-12 * std::max(mx, 1e-300))) {
            std::ostringstream os;
            os << "uniqueness_rank_test: mu_I vanishes for mode " << l;
            throw DomainError(os.str());
        }
    }

    const double mu1 = 1.0 - 2.0 * std::exp(-R1t * tau1);
    const double mu2 = 1.0 - 2.0 * std::exp(-R1t * tau2);
    Eigen::MatrixXd E1 = semigroup_E(gen.Az, x_ref.R1, tau1);
    Eigen::MatrixXd E2 = semigroup_E(gen.Az, x_ref.R1, tau2);
    Eigen::MatrixXd Et1 = semigroup_Etilde(gen.Az, R1t, tau1);
    Eigen::MatrixXd Et2 = semigroup_Etilde(gen.Az, R1t, tau2);

    std::vector<VecXcd> cbar(J);
    for (int j = 0; j < J; ++j) cbar[j] = coils.c.col(j).conjugate();

    Eigen::MatrixXcd rows(3 * L * J, 3 * M);
    int r = 0;
    for (int l = 0; l < L; ++l) {
        for (int s = 0; s < 3; ++s) {
            double tauJ = s == 1 ? tau1 : tau2;
            double muJ = s == 1 ? mu1 : mu2;
            const Eigen::MatrixXd& Es = s == 1 ? E1 : E2;
            const Eigen::MatrixXd& Ets = s == 1 ? Et1 : Et2;
            cd eL = std::exp(perp.values(l) * tauJ);
            for (int j = 0; j < J; ++j, ++r) {
                for (int mm = 0; mm < M; ++mm) {
                    VecXcd phi = X.basis_field(mm);
                    cd cMeq, cR1, cR2;
                    if (s == 0) {
                        cMeq = cd(0.0, -1.0) *
                               pair_with_coil(cbar[j], perp.P[l] * phi, vol);
                        cR1 = cd(0.0, 0.0);
                        cR2 = -pair_with_coil(
                            cbar[j], perp.P[l] * phi.cwiseProduct(muI[l]), vol);
                    } else {
                        VecXcd Ephi = (Es * phi.real()).cast<cd>() +
                                      cd(0.0, 1.0) * (Es * phi.imag()).cast<cd>();
                        VecXcd src = phi.cwiseProduct(x_ref.Meq.cast<cd>());
                        VecXcd Etphi =
                            (Ets * src.real()).cast<cd>() +
                            cd(0.0, 1.0) * (Ets * src.imag()).cast<cd>();
                        cMeq = cd(0.0, -1.0) *
                               pair_with_coil(cbar[j], perp.P[l] * Ephi, vol);
                        cR1 = cd(0.0, 1.0) *
                              pair_with_coil(cbar[j], perp.P[l] * Etphi, vol);
                        cR2 = -eL * muJ *
                              pair_with_coil(
                                  cbar[j], perp.P[l] * phi.cwiseProduct(muI[l]),
                                  vol);
                    }
                    rows(r, mm) = cMeq;
                    rows(r, M + mm) = cR1;
                    rows(r, 2 * M + mm) = cR2;
                }
            }
        }
    }

    Eigen::BDCSVD<Eigen::MatrixXcd> svd(rows);
    RankTestResult out;
    out.rows = static_cast<int>(rows.rows());
    out.cols = static_cast<int>(rows.cols());
    out.sigma_min = svd.singularValues()(svd.singularValues().size() - 1);
    return out;
}

SpectralCertificate certify_uniqueness(const Grid& g, const CoeffFields& x_ref,
                                       const ModelParams& m, const Vec3& G0,
                                       const BoundarySpec& bc,
                                       const AnsatzSpace& X,
                                       const CoilSet& coils, double tau1,
                                       double tau2, int count, double gamma) {
    SpectralCertificate cert;
    GeneratorPair gen = assemble_generators(g, x_ref, m, G0, bc, gamma);

    // spatial separation of the constant-gradient phase ramp
    {
        std::vector<double> ph(g.size());
        for (int i = 0; i < g.size(); ++i) ph[i] = gamma * G0.dot(g.coords(i));
        std::sort(ph.begin(), ph.end());
        double mingap = std::numeric_limits<double>::infinity();
        for (std::size_t i = 1; i < ph.size(); ++i)
            mingap = std::min(mingap, ph[i] - ph[i - 1]);
        double scale = std::max(std::abs(ph.front()), std::abs(ph.back()));
        cert.spacetime_sep =
            g.size() == 1 || mingap > 1e-12 * std::max(scale, 1.0);
    }

    // symmetric part of the transverse generator positive definite
    {
        Eigen::MatrixXd S = 0.5 * (gen.Aperp + gen.Aperp.transpose());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
        cert.assmperp = es.eigenvalues()(0) > 0.0;
    }

    EigenSystem perp = eigen_projectors(gen.Lperp, count);
    for (Eigen::Index i = 0; i < perp.values.size(); ++i)
        cert.lambda_perp.push_back(perp.values(i));

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ez(gen.Az);
    int nz = std::min<int>(count, static_cast<int>(ez.eigenvalues().size()));
    for (int i = 0; i < nz; ++i) cert.lambda_z.push_back(ez.eigenvalues()(i));

    DetReport det =
        det_condition(cert.lambda_z, tau1, tau2, x_ref.R1(0), x_ref.R1(0));
    cert.det_values = det.det_direct;
    cert.det_ell = det.all_nonzero;

    cert.muIell = true;
    try {
        RankTestResult rt = uniqueness_rank_test(g, x_ref, m, G0, bc, X, coils,
                                                 tau1, tau2, count, gamma);
        cert.sigma_min = rt.sigma_min;
    } catch (const DomainError&) {
        cert.muIell = false;
    }

    cert.pass = cert.spacetime_sep && cert.assmperp && cert.det_ell &&
                cert.muIell && cert.sigma_min > 1e-8;
    return cert;
}

} // namespace bt
