#pragma once

#include "mtopt/grid.hpp"
#include "mtopt/tensor.hpp"

namespace mtopt {

// Per-element quadrature data for a hx x hy bilinear quad: strain-displacement
// matrices in Mandel form, shape values, physical shape gradients.
struct QuadKernel {
    QuadKernel(double hx, double hy);

    std::array<Eigen::Matrix<double, 3, 8>, 4> B; // mandel(strain) = B * u_elem
    std::array<std::array<double, 4>, 4> N;       // N[q][a]
    std::array<std::array<Vec2, 4>, 4> dN;        // physical gradient of N_a at q
    std::array<Vec2, 4> qp_offset;                // gauss point position within element
    double w;                                     // physical weight hx*hy/4
};

// Coefficient tensor (Mandel 3x3) at quadrature point q of element (ei,ej).
using CoeffFn = std::function<Mat3(int ei, int ej, int q, const Vec2& x)>;

// Elasticity operator on the macro mesh with Dirichlet DOFs eliminated.
struct MacroSystem {
    SpMat A;                  // reduced SPD operator
    std::vector<int> dof_map; // full dof -> reduced index, -1 if eliminated
    int n_full = 0, n_reduced = 0;

    VecX reduce(const VecX& full) const;
    VecX expand(const VecX& reduced) const; // zeros at eliminated DOFs
};

MacroSystem assemble_elasticity(const MacroMesh& mesh, const CoeffFn& coeff);

// Elasticity operator on the periodic cell (kernel = rigid translations).
SpMat assemble_elasticity_cell(const CellMesh& mesh, const CoeffFn& coeff);

enum class Constraint { None, PeriodicMeanZero };

struct SolveOptions {
    double tol_rel = 1e-10;
    int max_iters = 200000;
};
struct SolveStats {
    int iterations = 0;
    double rel_residual = 0.0;
};

// Jacobi-preconditioned conjugate gradients.  For PeriodicMeanZero the
// constant mode of each of the ncomp interleaved components is projected out
// of the right-hand side and of every iterate, which keeps the operator SPD
// on the reduced space and pins the zero-mean representative.
VecX solve_spd(const SpMat& A, const VecX& b, Constraint constraint, int ncomp,
               const SolveOptions& opts = {}, SolveStats* stats = nullptr,
               const VecX* x0 = nullptr);

// Scalar integrals by 2x2 Gauss quadrature of the Q1 interpolant.
double integrate(const ScalarField& f);                 // integral over Omega
double integrate(const PeriodicScalarField& f);         // integral over Y
double integrate_h1_seminorm(const ScalarField& f);     // int |grad f|^2
double integrate_h1_seminorm(const PeriodicScalarField& f);

// Quadrature-exact nodal weights: integral of a Q1 field equals weights.dot(values).
VecX nodal_weights(const MacroMesh& mesh);
VecX nodal_weights(const CellMesh& mesh);

// Consistent mass and stiffness matrices for scalar nodal fields.
SpMat scalar_mass(const MacroMesh& mesh);
SpMat scalar_mass(const CellMesh& mesh);
SpMat scalar_stiffness(const MacroMesh& mesh);
SpMat scalar_stiffness(const CellMesh& mesh);

} // namespace mtopt
