#pragma once

#include "mtopt/gradient.hpp"

namespace mtopt {

struct OptimConfig {
    VolumeCaps caps{};
    RegWeights weights{};
    double step0 = 1.0;
    double armijo_c = 1e-4;
    double shrink = 0.5;
    int max_shrinks = 40;
    int max_iters = 200;
    double tol_stationarity = 0.0; // 0 disables the stationarity stop
    bool h1_precondition = false;
    double h1_tau = 1e-2;          // screening length^2 of the preconditioner
    double retab_threshold = 1e-3; // L2 drift of m triggering a table rebuild
    int n_levels = 17;
    SolveOptions solver{};
    int threads = 1;
    bool freeze_phi = false; // microstructure-only runs keep phi fixed
    bool freeze_m = false;

    void validate(const MacroMesh& mesh) const;
};

struct HistoryRow {
    int iter = 0;
    double objective = 0, compliance = 0, reg_phi = 0, reg_m = 0;
    double step = 0, stationarity = 0, vol_phi = 0, vol_m = 0;
    bool accepted = true;
};

struct OptimResult {
    ScalarField phi;
    PeriodicScalarField m;
    StateSolution state;
    std::vector<HistoryRow> history;
    bool converged = false;
    bool line_search_failed = false;
};

// Euclidean projection onto {lo <= v <= hi, weights.dot(v) <= cap}: clamp, and
// if the cap is violated shift by the unique nonnegative multiplier found by
// bisection (rightmost value meeting the cap within 1e-12*measure).
VecX project_admissible(const VecX& field, double lo, double hi, double cap, const VecX& weights,
                        double domain_measure);

ScalarField project_admissible(const ScalarField& phi, const VolumeCaps& caps);
PeriodicScalarField project_admissible(const PeriodicScalarField& m, const VolumeCaps& caps);

// One explicit step: fields moved along the given descent directions and
// projected back onto the admissible set.
std::pair<ScalarField, PeriodicScalarField> step(const ScalarField& phi,
                                                 const PeriodicScalarField& m,
                                                 const VecX& dir_phi, const VecX& dir_m,
                                                 double step_size, const VolumeCaps& caps);

// Projected-gradient descent with Armijo backtracking on the reduced
// objective; deterministic given identical inputs.
OptimResult optimize(const MacroMesh& mesh, const ScalarField& phi0,
                     const PeriodicScalarField& m0, const LoadCase& loads, const Material& mat,
                     const OptimConfig& cfg);

} // namespace mtopt
