#pragma once

#include "mtopt/macro.hpp"

namespace mtopt {

// Oscillation scale configuration.  The domain must be tiled by whole
// eps-cells and the refined mesh must resolve the oscillation.
struct EpsConfig {
    double eps = 0.25;
    int elems_per_cell = 8; // refined macro elements per eps-cell and side

    void validate(const MacroMesh& domain) const;
    int refined_nx(const MacroMesh& domain) const;
    int refined_ny(const MacroMesh& domain) const;
};

// Quartic-type double well H with H >= 0 and zeros exactly at {0,1}; c_H is
// the interface energy constant obtained by quadrature of sqrt(2 H).
struct DoubleWell {
    std::function<double(double)> H = [](double t) {
        const double u = t * (1.0 - t);
        return u * u;
    };
    double c_H() const;

    static DoubleWell quartic() { return {}; }
    static DoubleWell scaled(double factor) {
        DoubleWell d;
        d.H = [factor](double t) {
            const double u = t * (1.0 - t);
            return factor * u * u;
        };
        return d;
    }
};

// Copies boundary tags from src onto dst geometrically (same domain box).
void transfer_boundary_tags(const MacroMesh& src, MacroMesh& dst);

// Uniformly refined copy of a mesh, tags included.
MacroMesh refine_mesh(const MacroMesh& src, int factor);

struct EpsState {
    MacroMesh mesh; // refined mesh used for the oscillatory solve
    StateSolution state;
};

// Equilibrium with the oscillatory coefficient C(phi(x), m(x/eps)).
EpsState solve_eps_state(const MacroMesh& domain, const ScalarField& phi,
                         const PeriodicScalarField& m, const Material& mat, const EpsConfig& cfg,
                         const LoadCase& loads, const SolveOptions& opts = {});

// int_Omega |grad_y m(x/eps)|^2 dx by quadrature on the given mesh.
double oscillation_seminorm(const MacroMesh& mesh, const PeriodicScalarField& m, double eps);

// mean_Omega H(m(x/eps) - 1) dx.
double oscillation_well(const MacroMesh& mesh, const PeriodicScalarField& m, double eps,
                        const DoubleWell& dw);

// Oscillatory cost: compliance + mean of the m-oscillation seminorm + the phi
// penalty; +infinity outside the eps-admissible set.
double eval_J_eps(const MacroMesh& domain, const ScalarField& phi, const PeriodicScalarField& m,
                  const EpsConfig& cfg, const EpsState& st, const VolumeCaps& caps,
                  const RegWeights& w = {});

struct JsTerms {
    double compliance = 0, phi_grad = 0, phi_well = 0, m_grad = 0, m_well = 0;
    double total() const { return compliance + phi_grad + phi_well + m_grad + m_well; }
};

// Sharp-interface approximation cost: compliance plus Modica-Mortola terms
// (eps/2)|grad|^2 + (1/eps) H for both fields, the m terms averaged over the
// oscillation; +infinity outside the admissible set (total = inf).
JsTerms eval_Js_eps(const MacroMesh& domain, const ScalarField& phi, const PeriodicScalarField& m,
                    const EpsConfig& cfg, const EpsState& st, const VolumeCaps& caps,
                    const DoubleWell& dw);

// int_Omega H(phi) by 2x2 Gauss quadrature of the composed Q1 interpolant.
double well_integral(const ScalarField& phi, const DoubleWell& dw);

// Modica-Mortola energy of a macro field alone: (eps/2)*seminorm + (1/eps)*well.
double mm_energy(const ScalarField& phi, double eps, const DoubleWell& dw);

// Optimal transition profile value for the quartic well at scaled coordinate
// s (distance / eps); solves p' = sqrt(2 H(p)).
double mm_profile(double s);

enum class SweepKind { Energy, Cost, MM };

struct SweepRow {
    double eps = 0;
    double value = 0;     // E_eps(min), J_eps, or measured interface energy
    double reference = 0; // homogenized/sharp limit value
    double gap = 0;       // |value - reference|
};

struct GammaInstance {
    MacroMesh domain;
    ScalarField phi;
    PeriodicScalarField m;
    LoadCase loads;
    Material mat;
    VolumeCaps caps;
    int n_levels = 9;
    int elems_per_cell = 8;
    // MM kind only:
    double disk_radius = 0.3;
    int mm_mesh = 128;
    DoubleWell dw = DoubleWell::quartic();
};

std::vector<SweepRow> gamma_sweep(SweepKind kind, const GammaInstance& instance,
                                  const std::vector<double>& eps_list,
                                  const SolveOptions& opts = {});

} // namespace mtopt
