#pragma once

#include "mtopt/cell.hpp"

namespace mtopt {

// Vector-valued data field with an analytic spatial gradient; gradients are
// needed by the sharp-interface shape derivative.  Piecewise-constant loads
// get the default zero gradient.
struct VectorField2 {
    std::function<Vec2(const Vec2&)> eval = [](const Vec2&) { return Vec2::Zero(); };
    std::function<Mat2(const Vec2&)> grad = [](const Vec2&) { return Mat2::Zero(); };

    static VectorField2 zero() { return {}; }
    static VectorField2 constant(const Vec2& v) {
        VectorField2 f;
        f.eval = [v](const Vec2&) { return v; };
        return f;
    }
    // Constant traction restricted to a coordinate band along the edge
    // direction: value where axis-coordinate lies in [lo, hi], zero outside.
    static VectorField2 band(const Vec2& v, int axis, double lo, double hi) {
        VectorField2 f;
        f.eval = [=](const Vec2& x) { return (x[axis] >= lo && x[axis] <= hi) ? v : Vec2(0, 0); };
        return f;
    }
};

struct LoadCase {
    VectorField2 f; // body force density, applied as phi*f
    VectorField2 g; // traction on Neumann-tagged edges
};

struct StateSolution {
    DisplacementField u;
    double compliance = 0.0;
    double energy = 0.0;
    SolveStats stats;
};

// Load vector of the weak form: F_a = int phi f . N_a + int_GammaN g . N_a.
VecX assemble_load_vector(const MacroMesh& mesh, const ScalarField& phi, const LoadCase& loads);

// Homogenized equilibrium: coefficient C*(phi(x)) queried from the table at
// the Q1-interpolated phi value of each quadrature point.
StateSolution solve_state(const MacroMesh& mesh, const ScalarField& phi, const CStarTable& table,
                          const LoadCase& loads, const SolveOptions& opts = {},
                          const VecX* warm_start = nullptr);

// Work of the external loads against u (same quadrature as the load vector).
double compliance_value(const MacroMesh& mesh, const ScalarField& phi,
                        const DisplacementField& u, const LoadCase& loads);

struct RegWeights {
    double phi = 0.5, m = 0.5; // coefficients of int |grad phi|^2 and int |grad m|^2
};

struct VolumeCaps {
    double V; // cap on int_Omega phi
    double W; // cap on int_Y m
};

bool is_admissible(const MacroMesh& mesh, const ScalarField& phi, const PeriodicScalarField& m,
                   const VolumeCaps& caps);

// Full cost: compliance + gradient penalties, +infinity outside the
// admissible set.
double eval_J(const MacroMesh& mesh, const ScalarField& phi, const PeriodicScalarField& m,
              const DisplacementField& u, const LoadCase& loads, const VolumeCaps& caps,
              const RegWeights& w = {});

} // namespace mtopt
