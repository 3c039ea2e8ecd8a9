#include "mtopt/gradient.hpp"

namespace mtopt {

namespace {

// Engineering coefficients (e11, e22, 2*e12) of the strain at a macro
// quadrature point: with these, the raw corrector-pair matrices contract
// against strain pairs without further shear factors.
inline Vec3 engineering(const Vec3& mandel) {
    return Vec3(mandel[0], mandel[1], std::sqrt(2.0) * mandel[2]);
}

VecX riesz(const SpMat& mass, const VecX& r, const SolveOptions& opts) {
    SolveOptions o = opts;
    o.tol_rel = std::min(opts.tol_rel, 1e-12);
    return solve_spd(mass, r, Constraint::None, 1, o);
}

} // namespace

GradientPair assemble_gradient(const MacroMesh& mesh, const ScalarField& phi,
                               const PeriodicScalarField& m, const StateSolution& state,
                               const CStarTable& table, const LoadCase& loads,
                               const RegWeights& w, const SolveOptions& opts) {
    if (m.nc != table.cell_resolution())
        throw ContractViolation("assemble_gradient: table built for a different cell mesh");
    const QuadKernel K(mesh.hx(), mesh.hy());
    const int L = table.num_levels();

    GradientPair out;
    out.r_phi = VecX::Zero(mesh.num_nodes());
    out.r_m = VecX::Zero(m.values.size());

    // Per-level macro moments: A_k = sum w * phi_q * c c^T over points binned
    // to level k, with c the engineering strain coefficients of e(u).
    std::vector<Mat3> moments(L, Mat3::Zero());

    for (int ej = 0; ej < mesh.ny; ++ej)
        for (int ei = 0; ei < mesh.nx; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            const Vec2 x0 = mesh.elem_origin(ei, ej);
            Eigen::Matrix<double, 8, 1> ue;
            for (int a = 0; a < 4; ++a) {
                ue[2 * a + 0] = state.u.values[2 * nodes[a] + 0];
                ue[2 * a + 1] = state.u.values[2 * nodes[a] + 1];
            }
            for (int q = 0; q < 4; ++q) {
                const Vec2 xq = x0 + K.qp_offset[q];
                double phi_q = 0.0;
                Vec2 uq(0, 0);
                for (int a = 0; a < 4; ++a) {
                    phi_q += K.N[q][a] * phi.values[nodes[a]];
                    uq += K.N[q][a] * Vec2(ue[2 * a], ue[2 * a + 1]);
                }
                const double s = clamp01(phi_q);
                const Vec3 strain = K.B[q] * ue;
                const Vec2 fq = loads.f.eval(xq);

                const double density =
                    2.0 * fq.dot(uq) - strain.dot(table.slope(s) * strain);
                for (int a = 0; a < 4; ++a)
                    out.r_phi[nodes[a]] += K.w * K.N[q][a] * density;

                const Vec3 c = engineering(strain);
                moments[table.nearest_level(s)] += (K.w * phi_q) * (c * c.transpose());
            }
        }

    // Microstructure part, accumulated level by level on the cell mesh.
    const CellMesh cmesh(m.nc);
    const QuadKernel Kc(cmesh.h(), cmesh.h());
    const Mat3& M1 = table.material().C1.mandel();
    for (int k = 0; k < L; ++k) {
        if (moments[k].isZero(0.0)) continue;
        const auto& strains = table.level(k).strains;
        for (int ej = 0; ej < m.nc; ++ej)
            for (int ei = 0; ei < m.nc; ++ei) {
                const auto nodes = cmesh.elem_nodes(ei, ej);
                for (int q = 0; q < 4; ++q) {
                    const Mat3& G = strains[4 * (ej * m.nc + ei) + q];
                    const Mat3 R = G.transpose() * (M1 * G);
                    const double val = (R.array() * moments[k].array()).sum();
                    for (int a = 0; a < 4; ++a)
                        out.r_m[nodes[a]] -= Kc.w * Kc.N[q][a] * val;
                }
            }
    }

    out.reg_phi = 2.0 * w.phi * (scalar_stiffness(mesh) * phi.values);
    out.reg_m = 2.0 * w.m * (scalar_stiffness(cmesh) * m.values);

    const SpMat Mmac = scalar_mass(mesh);
    const SpMat Mcell = scalar_mass(cmesh);
    out.g_phi = ScalarField(mesh);
    out.g_phi.values = riesz(Mmac, out.r_phi, opts);
    out.g_m = PeriodicScalarField(cmesh);
    out.g_m.values = riesz(Mcell, out.r_m, opts);
    out.total_phi = ScalarField(mesh);
    out.total_phi.values = riesz(Mmac, out.r_phi + out.reg_phi, opts);
    out.total_m = PeriodicScalarField(cmesh);
    out.total_m.values = riesz(Mcell, out.r_m + out.reg_m, opts);
    return out;
}

DisplacementField solve_sensitivity(const MacroMesh& mesh, const ScalarField& phi,
                                    const ScalarField& psi, const PeriodicScalarField* mu,
                                    const StateSolution& state, const CStarTable& table,
                                    const LoadCase& loads, const SolveOptions& opts) {
    const QuadKernel K(mesh.hx(), mesh.hy());
    const int L = table.num_levels();

    // mu-weighted corrector-pair integrals per level, reused across points.
    std::vector<Mat3> mu_pairs(L, Mat3::Zero());
    if (mu) {
        const Vec3& f = mandel_scaling();
        for (int k = 0; k < L; ++k)
            mu_pairs[k] = f.asDiagonal() * table.mu_pair(k, *mu) * f.asDiagonal();
    }

    MacroSystem sys = assemble_elasticity(mesh, [&](int ei, int ej, int q, const Vec2&) {
        const auto nodes = mesh.elem_nodes(ei, ej);
        double phi_q = 0.0;
        for (int a = 0; a < 4; ++a) phi_q += K.N[q][a] * phi.values[nodes[a]];
        return table.value(clamp01(phi_q));
    });

    VecX rhs = VecX::Zero(2 * mesh.num_nodes());
    for (int ej = 0; ej < mesh.ny; ++ej)
        for (int ei = 0; ei < mesh.nx; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            const Vec2 x0 = mesh.elem_origin(ei, ej);
            Eigen::Matrix<double, 8, 1> ue;
            for (int a = 0; a < 4; ++a) {
                ue[2 * a + 0] = state.u.values[2 * nodes[a] + 0];
                ue[2 * a + 1] = state.u.values[2 * nodes[a] + 1];
            }
            for (int q = 0; q < 4; ++q) {
                const Vec2 xq = x0 + K.qp_offset[q];
                double phi_q = 0.0, psi_q = 0.0;
                for (int a = 0; a < 4; ++a) {
                    phi_q += K.N[q][a] * phi.values[nodes[a]];
                    psi_q += K.N[q][a] * psi.values[nodes[a]];
                }
                const double s = clamp01(phi_q);
                Mat3 cbar = psi_q * table.slope(s);
                if (mu) cbar += phi_q * mu_pairs[table.nearest_level(s)];
                const Vec3 strain = K.B[q] * ue;
                const Eigen::Matrix<double, 8, 1> fe =
                    -K.w * K.B[q].transpose() * (cbar * strain);
                for (int a = 0; a < 4; ++a) {
                    rhs[2 * nodes[a] + 0] += fe[2 * a + 0];
                    rhs[2 * nodes[a] + 1] += fe[2 * a + 1];
                }
                const Vec2 fq = loads.f.eval(xq);
                if (!fq.isZero())
                    for (int a = 0; a < 4; ++a) {
                        rhs[2 * nodes[a] + 0] += K.w * psi_q * K.N[q][a] * fq[0];
                        rhs[2 * nodes[a] + 1] += K.w * psi_q * K.N[q][a] * fq[1];
                    }
            }
        }

    DisplacementField v(mesh);
    v.values = sys.expand(solve_spd(sys.A, sys.reduce(rhs), Constraint::None, 2, opts));
    return v;
}

VecX project_tangent_cone(const VecX& dir, const VecX& v, double lo, double hi, double cap,
                          const VecX& weights, double domain_measure) {
    const double act_tol = 1e-10;
    const int n = int(v.size());
    auto clamp_dir = [&](double lambda, VecX& z) {
        for (int i = 0; i < n; ++i) {
            double d = dir[i] - lambda;
            if (v[i] <= lo + act_tol) d = std::max(0.0, d);
            if (v[i] >= hi - act_tol) d = std::min(0.0, d);
            z[i] = d;
        }
    };
    VecX z(n);
    clamp_dir(0.0, z);
    const bool cap_active = weights.dot(v) >= cap - act_tol * domain_measure;
    if (!cap_active || weights.dot(z) <= 0.0) return z;

    // Single multiplier for the active volume cap; the weighted integral of
    // the projected direction is monotone in lambda.
    double a = 0.0, b = dir.cwiseAbs().maxCoeff() + 1.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (a + b);
        clamp_dir(mid, z);
        if (weights.dot(z) > 0.0)
            a = mid;
        else
            b = mid;
    }
    clamp_dir(b, z);
    return z;
}

double stationarity_measure(const MacroMesh& mesh, const ScalarField& phi,
                            const PeriodicScalarField& m, const GradientPair& grad,
                            const VolumeCaps& caps) {
    const VecX wm_phi = nodal_weights(mesh);
    const VecX wm_m = nodal_weights(CellMesh(m.nc));
    const VecX z_phi = project_tangent_cone(-grad.total_phi.values, phi.values, 0.0, 1.0, caps.V,
                                            wm_phi, mesh.area());
    const VecX z_m =
        project_tangent_cone(-grad.total_m.values, m.values, 1.0, 2.0, caps.W, wm_m, 1.0);
    const double s2 = z_phi.cwiseProduct(z_phi).dot(wm_phi) + z_m.cwiseProduct(z_m).dot(wm_m);
    return std::sqrt(s2);
}

} // namespace mtopt
