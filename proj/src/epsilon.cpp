#include "mtopt/epsilon.hpp"

namespace mtopt {

void EpsConfig::validate(const MacroMesh& domain) const {
    if (!(eps > 0.0)) throw ConfigError("eps: scale must be positive");
    const double cx = domain.lx / eps, cy = domain.ly / eps;
    if (std::abs(cx - std::round(cx)) > 1e-9 || std::abs(cy - std::round(cy)) > 1e-9)
        throw ConfigError("eps: the domain must be an exact union of eps-cells");
    if (elems_per_cell < 8)
        throw ConfigError("eps: need at least 8 elements per eps-cell to resolve the oscillation");
}

int EpsConfig::refined_nx(const MacroMesh& domain) const {
    return int(std::round(domain.lx / eps)) * elems_per_cell;
}
int EpsConfig::refined_ny(const MacroMesh& domain) const {
    return int(std::round(domain.ly / eps)) * elems_per_cell;
}

double DoubleWell::c_H() const {
    // Composite 4-point Gauss-Legendre on 256 panels of [0,1].
    static const double gp[2] = {0.33998104358485626480, 0.86113631159405257522};
    static const double gw[2] = {0.65214515486254614263, 0.34785484513745385737};
    const int panels = 256;
    const double h = 1.0 / panels;
    double total = 0.0;
    for (int p = 0; p < panels; ++p) {
        const double mid = (p + 0.5) * h;
        for (int k = 0; k < 2; ++k)
            for (double sgn : {-1.0, 1.0}) {
                const double t = mid + sgn * 0.5 * h * gp[k];
                total += 0.5 * h * gw[k] * std::sqrt(2.0 * H(t));
            }
    }
    return total;
}

void transfer_boundary_tags(const MacroMesh& src, MacroMesh& dst) {
    if (std::abs(src.lx - dst.lx) > 1e-12 || std::abs(src.ly - dst.ly) > 1e-12)
        throw ContractViolation("transfer_boundary_tags: domain boxes differ");
    for (auto& e : dst.boundary_edges()) {
        const Vec2 mid = 0.5 * (dst.node_coord(e.n0) + dst.node_coord(e.n1));
        for (const auto& se : src.boundary_edges()) {
            if ((se.normal - e.normal).norm() > 1e-12) continue;
            const Vec2 a = src.node_coord(se.n0), b = src.node_coord(se.n1);
            const Vec2 t = (b - a).normalized();
            const double along = (mid - a).dot(t);
            const double off = std::abs((mid - a).dot(Vec2(-t[1], t[0])));
            if (off < 1e-12 && along >= -1e-12 && along <= (b - a).norm() + 1e-12) {
                e.tag = se.tag;
                break;
            }
        }
    }
}

MacroMesh refine_mesh(const MacroMesh& src, int factor) {
    if (factor < 1) throw ConfigError("refine_mesh: factor must be >= 1");
    MacroMesh out(src.nx * factor, src.ny * factor, src.lx, src.ly);
    transfer_boundary_tags(src, out);
    return out;
}

EpsState solve_eps_state(const MacroMesh& domain, const ScalarField& phi,
                         const PeriodicScalarField& m, const Material& mat, const EpsConfig& cfg,
                         const LoadCase& loads, const SolveOptions& opts) {
    cfg.validate(domain);
    EpsState out{MacroMesh(cfg.refined_nx(domain), cfg.refined_ny(domain), domain.lx, domain.ly),
                 {}};
    transfer_boundary_tags(domain, out.mesh);
    if (!out.mesh.has_dirichlet())
        throw ConfigError("solve_eps_state: empty Dirichlet boundary, problem is ill-posed");

    const MacroMesh& mesh = out.mesh;
    MacroSystem sys = assemble_elasticity(mesh, [&](int, int, int, const Vec2& x) {
        const double phi_q = clamp01(phi.interp(x));
        const double m_q = m.interp(x / cfg.eps);
        return mat.mix(phi_q, m_q);
    });

    // phi interpolated from its own (coarser) mesh when building the load.
    ScalarField phi_fine(mesh);
    for (int n = 0; n < mesh.num_nodes(); ++n)
        phi_fine.values[n] = clamp01(phi.interp(mesh.node_coord(n)));
    const VecX F = assemble_load_vector(mesh, phi_fine, loads);
    const VecX b = sys.reduce(F);

    const VecX x = solve_spd(sys.A, b, Constraint::None, 2, opts, &out.state.stats);
    out.state.u = DisplacementField(mesh);
    out.state.u.values = sys.expand(x);
    out.state.compliance = F.dot(out.state.u.values);
    out.state.energy = 0.5 * x.dot(sys.A * x) - b.dot(x);
    return out;
}

namespace {

// Quadrature of a pointwise function of (x, m(x/eps), grad_y m(x/eps)).
template <class F>
double oscillation_quadrature(const MacroMesh& mesh, const PeriodicScalarField& m, double eps,
                              F&& fn) {
    const QuadKernel K(mesh.hx(), mesh.hy());
    double total = 0.0;
    for (int ej = 0; ej < mesh.ny; ++ej)
        for (int ei = 0; ei < mesh.nx; ++ei) {
            const Vec2 x0 = mesh.elem_origin(ei, ej);
            for (int q = 0; q < 4; ++q) {
                const Vec2 y = (x0 + K.qp_offset[q]) / eps;
                total += K.w * fn(m.interp(y), m.interp_grad(y));
            }
        }
    return total;
}

} // namespace

double oscillation_seminorm(const MacroMesh& mesh, const PeriodicScalarField& m, double eps) {
    return oscillation_quadrature(mesh, m, eps,
                                  [](double, const Vec2& g) { return g.squaredNorm(); });
}

double oscillation_well(const MacroMesh& mesh, const PeriodicScalarField& m, double eps,
                        const DoubleWell& dw) {
    return oscillation_quadrature(mesh, m, eps,
                                  [&](double mv, const Vec2&) { return dw.H(mv - 1.0); }) /
           mesh.area();
}

double eval_J_eps(const MacroMesh& domain, const ScalarField& phi, const PeriodicScalarField& m,
                  const EpsConfig& cfg, const EpsState& st, const VolumeCaps& caps,
                  const RegWeights& w) {
    // Admissibility: on exact tilings the oscillation average of m equals its
    // cell integral, so the eps-set coincides with the homogenized one.
    if (!is_admissible(domain, phi, m, caps)) return std::numeric_limits<double>::infinity();
    return st.state.compliance +
           w.m * oscillation_seminorm(st.mesh, m, cfg.eps) / st.mesh.area() +
           w.phi * integrate_h1_seminorm(phi);
}

double well_integral(const ScalarField& phi, const DoubleWell& dw) {
    MacroMesh mesh(phi.nx, phi.ny, phi.lx, phi.ly);
    const QuadKernel K(mesh.hx(), mesh.hy());
    double total = 0.0;
    for (int ej = 0; ej < mesh.ny; ++ej)
        for (int ei = 0; ei < mesh.nx; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            for (int q = 0; q < 4; ++q) {
                double v = 0.0;
                for (int a = 0; a < 4; ++a) v += K.N[q][a] * phi.values[nodes[a]];
                total += K.w * dw.H(v);
            }
        }
    return total;
}

JsTerms eval_Js_eps(const MacroMesh& domain, const ScalarField& phi, const PeriodicScalarField& m,
                    const EpsConfig& cfg, const EpsState& st, const VolumeCaps& caps,
                    const DoubleWell& dw) {
    JsTerms t;
    if (!is_admissible(domain, phi, m, caps)) {
        t.compliance = std::numeric_limits<double>::infinity();
        return t;
    }
    const double eps = cfg.eps;
    t.compliance = st.state.compliance;
    t.phi_grad = 0.5 * eps * integrate_h1_seminorm(phi);
    t.phi_well = well_integral(phi, dw) / eps;
    t.m_grad = 0.5 * eps * oscillation_seminorm(st.mesh, m, eps) / st.mesh.area();
    t.m_well = oscillation_well(st.mesh, m, eps, dw) / eps;
    return t;
}

double mm_energy(const ScalarField& phi, double eps, const DoubleWell& dw) {
    return 0.5 * eps * integrate_h1_seminorm(phi) + well_integral(phi, dw) / eps;
}

double mm_profile(double s) { return 1.0 / (1.0 + std::exp(-std::sqrt(2.0) * s)); }

std::vector<SweepRow> gamma_sweep(SweepKind kind, const GammaInstance& inst,
                                  const std::vector<double>& eps_list, const SolveOptions& opts) {
    std::vector<SweepRow> rows;
    for (size_t i = 0; i + 1 < eps_list.size(); ++i)
        if (!(eps_list[i] > eps_list[i + 1]))
            throw ConfigError("gamma_sweep: eps list must be strictly decreasing");

    if (kind == SweepKind::MM) {
        // Disk indicator smoothed with the optimal profile at width eps; the
        // measured interface energy approaches c_H * circumference.
        const double reference = inst.dw.c_H() * 2.0 * M_PI * inst.disk_radius;
        for (double eps : eps_list) {
            MacroMesh mesh(inst.mm_mesh, inst.mm_mesh, 1.0, 1.0);
            ScalarField phi(mesh);
            const Vec2 c(0.5, 0.5);
            for (int n = 0; n < mesh.num_nodes(); ++n) {
                const double d = (mesh.node_coord(n) - c).norm() - inst.disk_radius;
                phi.values[n] = mm_profile(-d / eps); // 1 inside, 0 outside
            }
            SweepRow r;
            r.eps = eps;
            r.value = mm_energy(phi, eps, inst.dw);
            r.reference = reference;
            r.gap = std::abs(r.value - r.reference);
            rows.push_back(r);
        }
        return rows;
    }

    const CellMesh cmesh(inst.m.nc);
    CStarTable table = CStarTable::build(inst.m, cmesh, inst.mat, inst.n_levels, opts);
    for (double eps : eps_list) {
        EpsConfig cfg{eps, inst.elems_per_cell};
        const EpsState es = solve_eps_state(inst.domain, inst.phi, inst.m, inst.mat, cfg,
                                            inst.loads, opts);
        // Homogenized reference on the same refined mesh, so both sides carry
        // comparable discretization bias and the gap isolates the scale effect.
        ScalarField phi_fine(es.mesh);
        for (int n = 0; n < es.mesh.num_nodes(); ++n)
            phi_fine.values[n] = clamp01(inst.phi.interp(es.mesh.node_coord(n)));
        const StateSolution hom = solve_state(es.mesh, phi_fine, table, inst.loads, opts);

        SweepRow r;
        r.eps = eps;
        if (kind == SweepKind::Energy) {
            r.value = es.state.energy;
            r.reference = hom.energy;
        } else {
            r.value = eval_J_eps(inst.domain, inst.phi, inst.m, cfg, es, inst.caps);
            r.reference = hom.compliance + 0.5 * integrate_h1_seminorm(inst.m) +
                          0.5 * integrate_h1_seminorm(inst.phi);
        }
        r.gap = std::abs(r.value - r.reference);
        rows.push_back(r);
    }
    return rows;
}

} // namespace mtopt
