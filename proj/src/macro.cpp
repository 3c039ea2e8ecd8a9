#include "mtopt/macro.hpp"

namespace mtopt {

VecX assemble_load_vector(const MacroMesh& mesh, const ScalarField& phi, const LoadCase& loads) {
    VecX F = VecX::Zero(2 * mesh.num_nodes());
    const QuadKernel K(mesh.hx(), mesh.hy());
    for (int ej = 0; ej < mesh.ny; ++ej)
        for (int ei = 0; ei < mesh.nx; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            const Vec2 x0 = mesh.elem_origin(ei, ej);
            for (int q = 0; q < 4; ++q) {
                const Vec2 xq = x0 + K.qp_offset[q];
                double phi_q = 0.0;
                for (int a = 0; a < 4; ++a) phi_q += K.N[q][a] * phi.values[nodes[a]];
                const Vec2 fq = loads.f.eval(xq);
                if (fq.isZero()) continue;
                for (int a = 0; a < 4; ++a) {
                    F[2 * nodes[a] + 0] += K.w * phi_q * K.N[q][a] * fq[0];
                    F[2 * nodes[a] + 1] += K.w * phi_q * K.N[q][a] * fq[1];
                }
            }
        }
    // Tractions with 2-point Gauss on each Neumann edge.
    for (const auto& e : mesh.boundary_edges()) {
        if (e.tag != EdgeTag::Neumann) continue;
        const Vec2 p0 = mesh.node_coord(e.n0), p1 = mesh.node_coord(e.n1);
        for (double xi : gauss2()) {
            const double N0 = 0.5 * (1 - xi), N1 = 0.5 * (1 + xi);
            const Vec2 x = N0 * p0 + N1 * p1;
            const Vec2 gq = loads.g.eval(x);
            const double w = 0.5 * e.len;
            F[2 * e.n0 + 0] += w * N0 * gq[0];
            F[2 * e.n0 + 1] += w * N0 * gq[1];
            F[2 * e.n1 + 0] += w * N1 * gq[0];
            F[2 * e.n1 + 1] += w * N1 * gq[1];
        }
    }
    return F;
}

StateSolution solve_state(const MacroMesh& mesh, const ScalarField& phi, const CStarTable& table,
                          const LoadCase& loads, const SolveOptions& opts, const VecX* warm_start) {
    if (phi.nx != mesh.nx || phi.ny != mesh.ny)
        throw ContractViolation("solve_state: phi resolution does not match the mesh");
    if (!mesh.has_dirichlet())
        throw ConfigError("solve_state: empty Dirichlet boundary, problem is ill-posed");

    const QuadKernel K(mesh.hx(), mesh.hy());
    MacroSystem sys = assemble_elasticity(mesh, [&](int ei, int ej, int q, const Vec2&) {
        const auto nodes = mesh.elem_nodes(ei, ej);
        double phi_q = 0.0;
        for (int a = 0; a < 4; ++a) phi_q += K.N[q][a] * phi.values[nodes[a]];
        return table.value(clamp01(phi_q));
    });

    const VecX F = assemble_load_vector(mesh, phi, loads);
    const VecX b = sys.reduce(F);
    VecX warm_reduced;
    const VecX* x0 = nullptr;
    if (warm_start && warm_start->size() == F.size()) {
        warm_reduced = sys.reduce(*warm_start);
        x0 = &warm_reduced;
    }

    StateSolution out;
    const VecX x = solve_spd(sys.A, b, Constraint::None, 2, opts, &out.stats, x0);
    out.u = DisplacementField(mesh);
    out.u.values = sys.expand(x);
    out.compliance = F.dot(out.u.values);
    out.energy = 0.5 * x.dot(sys.A * x) - b.dot(x);
    return out;
}

double compliance_value(const MacroMesh& mesh, const ScalarField& phi,
                        const DisplacementField& u, const LoadCase& loads) {
    return assemble_load_vector(mesh, phi, loads).dot(u.values);
}

bool is_admissible(const MacroMesh& mesh, const ScalarField& phi, const PeriodicScalarField& m,
                   const VolumeCaps& caps) {
    const double box_tol = 1e-10;
    if (phi.values.minCoeff() < -box_tol || phi.values.maxCoeff() > 1.0 + box_tol) return false;
    if (m.values.minCoeff() < 1.0 - box_tol || m.values.maxCoeff() > 2.0 + box_tol) return false;
    if (integrate(phi) > caps.V + 1e-10 * mesh.area()) return false;
    if (integrate(m) > caps.W + 1e-10) return false;
    return true;
}

double eval_J(const MacroMesh& mesh, const ScalarField& phi, const PeriodicScalarField& m,
              const DisplacementField& u, const LoadCase& loads, const VolumeCaps& caps,
              const RegWeights& w) {
    if (!is_admissible(mesh, phi, m, caps)) return std::numeric_limits<double>::infinity();
    return compliance_value(mesh, phi, u, loads) + w.m * integrate_h1_seminorm(m) +
           w.phi * integrate_h1_seminorm(phi);
}

} // namespace mtopt
