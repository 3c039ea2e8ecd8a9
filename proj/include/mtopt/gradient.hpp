#pragma once

#include "mtopt/macro.hpp"

namespace mtopt {

// First-order variation of the reduced objective G(phi, m) = J(phi, m, S(phi, m)).
//
// The compliance part is carried as weak-form load vectors r_phi, r_m (tested
// against nodal hat functions); the H1 penalty terms stay in weak form
// (reg_* = scaled stiffness products).  The L2 Riesz fields g_* solve the
// consistent-mass systems M g = r, so <g, psi>_{L2} reproduces r.psi exactly
// for nodal directions.
struct GradientPair {
    VecX r_phi, r_m;     // compliance-part weak vectors
    VecX reg_phi, reg_m; // H1-penalty weak vectors (2*weight * K * field)
    ScalarField g_phi;   // M^{-1} r_phi
    PeriodicScalarField g_m;
    ScalarField total_phi; // M^{-1}(r_phi + reg_phi): full descent field
    PeriodicScalarField total_m;

    double directional(const VecX& psi, const VecX& mu) const {
        return r_phi.dot(psi) + reg_phi.dot(psi) + r_m.dot(mu) + reg_m.dot(mu);
    }
};

GradientPair assemble_gradient(const MacroMesh& mesh, const ScalarField& phi,
                               const PeriodicScalarField& m, const StateSolution& state,
                               const CStarTable& table, const LoadCase& loads,
                               const RegWeights& w = {}, const SolveOptions& opts = {});

// State sensitivity along the direction (psi, mu): the derivative of the
// equilibrium displacement, for cross-validation of the gradient.
DisplacementField solve_sensitivity(const MacroMesh& mesh, const ScalarField& phi,
                                    const ScalarField& psi, const PeriodicScalarField* mu,
                                    const StateSolution& state, const CStarTable& table,
                                    const LoadCase& loads, const SolveOptions& opts = {});

// Norm of the projection of the negative total gradient onto the tangent cone
// of the admissible set at (phi, m): zero iff the discrete first-order
// conditions hold including box and volume-cap activity.
double stationarity_measure(const MacroMesh& mesh, const ScalarField& phi,
                            const PeriodicScalarField& m, const GradientPair& grad,
                            const VolumeCaps& caps);

// Shared helper: projection of a direction onto the tangent cone of
// {lo <= v <= hi, weights.dot(v) <= cap} at v, returning the projected field.
VecX project_tangent_cone(const VecX& dir, const VecX& v, double lo, double hi, double cap,
                          const VecX& weights, double domain_measure);

} // namespace mtopt
