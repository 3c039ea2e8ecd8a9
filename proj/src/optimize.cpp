#include "mtopt/optimize.hpp"

namespace mtopt {

void OptimConfig::validate(const MacroMesh& mesh) const {
    // A frozen phase field may legitimately fill the whole domain.
    const double vmax = freeze_phi ? mesh.area() * (1.0 + 1e-12) : mesh.area();
    if (!(caps.V > 0.0) || (!freeze_phi && !(caps.V < vmax)) || caps.V > vmax)
        throw ConfigError("optimize: volume cap V must lie in (0, |Omega|)");
    if (!(caps.W > 1.0 && caps.W < 2.0))
        throw ConfigError("optimize: microstructure cap W must lie in (1, 2)");
    if (!(step0 > 0.0)) throw ConfigError("optimize: step0 must be positive");
    if (!(armijo_c > 0.0 && armijo_c < 1.0))
        throw ConfigError("optimize: armijo constant must lie in (0,1)");
    if (!(shrink > 0.0 && shrink < 1.0))
        throw ConfigError("optimize: shrink factor must lie in (0,1)");
    if (n_levels < 2) throw ConfigError("optimize: need at least 2 table levels");
}

VecX project_admissible(const VecX& field, double lo, double hi, double cap, const VecX& weights,
                        double domain_measure) {
    const double total_weight = weights.sum();
    if (cap < lo * total_weight - 1e-12 * domain_measure)
        throw ConfigError("project_admissible: cap is infeasible for the given box");

    auto clamped = [&](double c, VecX& v) {
        for (int i = 0; i < field.size(); ++i)
            v[i] = std::min(std::max(field[i] - c, lo), hi);
    };
    VecX v(field.size());
    clamped(0.0, v);
    const double tol = 1e-12 * domain_measure;
    if (weights.dot(v) <= cap + tol) return v;

    double a = 0.0, b = field.maxCoeff() - lo; // integral at b is lo*total <= cap
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (a + b);
        clamped(mid, v);
        if (weights.dot(v) > cap)
            a = mid;
        else
            b = mid;
    }
    clamped(b, v); // rightmost end: feasible side of the cap
    return v;
}

ScalarField project_admissible(const ScalarField& phi, const VolumeCaps& caps) {
    MacroMesh mesh(phi.nx, phi.ny, phi.lx, phi.ly);
    ScalarField out = phi;
    out.values = project_admissible(phi.values, 0.0, 1.0, caps.V, nodal_weights(mesh), mesh.area());
    return out;
}

PeriodicScalarField project_admissible(const PeriodicScalarField& m, const VolumeCaps& caps) {
    CellMesh mesh(m.nc);
    PeriodicScalarField out = m;
    out.values = project_admissible(m.values, 1.0, 2.0, caps.W, nodal_weights(mesh), 1.0);
    return out;
}

std::pair<ScalarField, PeriodicScalarField> step(const ScalarField& phi,
                                                 const PeriodicScalarField& m,
                                                 const VecX& dir_phi, const VecX& dir_m,
                                                 double step_size, const VolumeCaps& caps) {
    ScalarField phi2 = phi;
    phi2.values = phi.values - step_size * dir_phi;
    PeriodicScalarField m2 = m;
    m2.values = m.values - step_size * dir_m;
    return {project_admissible(phi2, caps), project_admissible(m2, caps)};
}

namespace {

double field_l2_distance(const VecX& a, const VecX& b, const VecX& weights) {
    const VecX d = a - b;
    return std::sqrt(d.cwiseProduct(d).dot(weights));
}

} // namespace

OptimResult optimize(const MacroMesh& mesh, const ScalarField& phi0,
                     const PeriodicScalarField& m0, const LoadCase& loads, const Material& mat,
                     const OptimConfig& cfg) {
    cfg.validate(mesh);
    const CellMesh cmesh(m0.nc);
    const VecX w_phi = nodal_weights(mesh);
    const VecX w_m = nodal_weights(cmesh);

    OptimResult res;
    res.phi = project_admissible(phi0, cfg.caps);
    res.m = project_admissible(m0, cfg.caps);

    CStarTable table =
        CStarTable::build(res.m, cmesh, mat, cfg.n_levels, cfg.solver, cfg.threads);
    VecX m_table = res.m.values;

    res.state = solve_state(mesh, res.phi, table, loads, cfg.solver);
    double objective = eval_J(mesh, res.phi, res.m, res.state.u, loads, cfg.caps, cfg.weights);

    // H1 preconditioner factors (mass + tau * stiffness), reused every step.
    SpMat P_phi, P_m;
    if (cfg.h1_precondition) {
        P_phi = scalar_mass(mesh) + SpMat(cfg.h1_tau * scalar_stiffness(mesh));
        P_m = scalar_mass(cmesh) + SpMat(cfg.h1_tau * scalar_stiffness(cmesh));
    }

    // Frozen fields do not enter the stationarity measure.
    auto measure = [&](const GradientPair& g) {
        GradientPair masked = g;
        if (cfg.freeze_phi) masked.total_phi.values.setZero();
        if (cfg.freeze_m) masked.total_m.values.setZero();
        return stationarity_measure(mesh, res.phi, res.m, masked, cfg.caps);
    };

    double last_step = 0.0;
    for (int iter = 1; iter <= cfg.max_iters; ++iter) {
        const GradientPair grad =
            assemble_gradient(mesh, res.phi, res.m, res.state, table, loads, cfg.weights,
                              cfg.solver);
        const double stat = measure(grad);

        HistoryRow row;
        row.iter = iter;
        row.objective = objective;
        row.compliance = res.state.compliance;
        row.reg_phi = cfg.weights.phi * integrate_h1_seminorm(res.phi);
        row.reg_m = cfg.weights.m * integrate_h1_seminorm(res.m);
        row.step = last_step;
        row.stationarity = stat;
        row.vol_phi = integrate(res.phi);
        row.vol_m = integrate(res.m);
        res.history.push_back(row);

        if (cfg.tol_stationarity > 0.0 && stat <= cfg.tol_stationarity) {
            res.converged = true;
            return res;
        }

        VecX dir_phi, dir_m;
        if (cfg.h1_precondition) {
            SolveOptions po = cfg.solver;
            po.tol_rel = std::min(po.tol_rel, 1e-12);
            dir_phi = solve_spd(P_phi, grad.r_phi + grad.reg_phi, Constraint::None, 1, po);
            dir_m = solve_spd(P_m, grad.r_m + grad.reg_m, Constraint::None, 1, po);
        } else {
            dir_phi = grad.total_phi.values;
            dir_m = grad.total_m.values;
        }
        if (cfg.freeze_phi) dir_phi.setZero();
        if (cfg.freeze_m) dir_m.setZero();

        bool accepted = false;
        double t = cfg.step0;
        for (int shrinks = 0; shrinks <= cfg.max_shrinks; ++shrinks, t *= cfg.shrink) {
            auto [phi_trial, m_trial] = step(res.phi, res.m, dir_phi, dir_m, t, cfg.caps);
            const double predicted = (grad.r_phi + grad.reg_phi).dot(phi_trial.values -
                                                                     res.phi.values) +
                                     (grad.r_m + grad.reg_m).dot(m_trial.values - res.m.values);
            if (predicted >= 0.0) continue; // no first-order descent along this arc

            const bool rebuild =
                field_l2_distance(m_trial.values, m_table, w_m) > cfg.retab_threshold;
            CStarTable trial_table =
                rebuild ? CStarTable::build(m_trial, cmesh, mat, cfg.n_levels, cfg.solver,
                                            cfg.threads)
                        : table;
            const StateSolution trial_state =
                solve_state(mesh, phi_trial, trial_table, loads, cfg.solver, &res.state.u.values);
            const double trial_obj =
                eval_J(mesh, phi_trial, m_trial, trial_state.u, loads, cfg.caps, cfg.weights);

            if (trial_obj <= objective + cfg.armijo_c * predicted) {
                res.phi = phi_trial;
                res.m = m_trial;
                res.state = trial_state;
                objective = trial_obj;
                if (rebuild) {
                    table = std::move(trial_table);
                    m_table = res.m.values;
                }
                last_step = t;
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            res.line_search_failed = true;
            HistoryRow fail = res.history.back();
            fail.iter = iter + 1;
            fail.step = 0.0;
            fail.accepted = false;
            res.history.push_back(fail);
            return res;
        }
    }

    // Row for the final iterate reached by the last accepted step.
    {
        const GradientPair grad =
            assemble_gradient(mesh, res.phi, res.m, res.state, table, loads, cfg.weights,
                              cfg.solver);
        const double stat = measure(grad);
        HistoryRow row;
        row.iter = cfg.max_iters + 1;
        row.objective = objective;
        row.compliance = res.state.compliance;
        row.reg_phi = cfg.weights.phi * integrate_h1_seminorm(res.phi);
        row.reg_m = cfg.weights.m * integrate_h1_seminorm(res.m);
        row.step = last_step;
        row.stationarity = stat;
        row.vol_phi = integrate(res.phi);
        row.vol_m = integrate(res.m);
        res.history.push_back(row);
        if (cfg.tol_stationarity > 0.0 && stat <= cfg.tol_stationarity) res.converged = true;
    }
    return res;
}

} // namespace mtopt
