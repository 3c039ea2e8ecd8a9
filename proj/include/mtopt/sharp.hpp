#pragma once

#include "mtopt/epsilon.hpp"
#include "mtopt/macro.hpp"

namespace mtopt {

// Oriented interface segments extracted from a level set by marching squares.
// Normals are unit and point into the enclosed region (negative level-set
// side, i.e. toward {phi=1} / {m=2}).
struct InterfacePolyline {
    struct Segment {
        Vec2 a, b;
        Vec2 normal;
        int chain = -1;
    };
    enum class Domain { Macro, Cell };

    Domain domain = Domain::Macro;
    std::vector<Segment> segments;

    double perimeter() const {
        double p = 0.0;
        for (const auto& s : segments) p += (s.b - s.a).norm();
        return p;
    }
    bool empty() const { return segments.empty(); }
};

// Level-set convention: negative inside.  Indicator fields ({0,1} nodal) are
// converted internally via 0.5 - value.  Only interface strictly inside the
// domain is produced; the domain boundary itself never contributes.
InterfacePolyline extract_interface(const ScalarField& field, bool indicator = false);
// Periodic version: contours crossing the seam are picked up by the wrapped
// cells; their pieces carry coordinates in [0,1].
InterfacePolyline extract_interface(const PeriodicScalarField& field, bool indicator = false);

// Nodal {0,1} indicator rebuilt from segments by nearest-segment normal side.
VecX rasterize_indicator(const InterfacePolyline& poly, const MacroMesh& mesh);
VecX rasterize_indicator(const InterfacePolyline& poly, const CellMesh& mesh);

// Closed-form velocity field with analytic gradient; autonomous in t.
struct VariationField {
    std::function<Vec2(const Vec2&)> eval = [](const Vec2&) { return Vec2::Zero(); };
    std::function<Mat2(const Vec2&)> grad = [](const Vec2&) { return Mat2::Zero(); };
    bool periodic = false;
    std::string name = "zero";

    double divergence(const Vec2& x) const { return grad(x).trace(); }

    static VariationField zero() { return {}; }
    static VariationField translation(const Vec2& c);
    static VariationField linear(const Mat2& A, const Vec2& x0);
    // Tangent to the box [0,lx]x[0,ly]: components vanish on their normal faces.
    static VariationField box_tangent_sine(const Vec2& amp, double lx, double ly);
    // Compactly supported radial push q(r^2)(x-c) with q = amp*(1-r^2/R^2)^3.
    static VariationField radial_bump(const Vec2& center, double radius, double amp);
    // Divergence-free swirl q(r^2) * rot90(x-c).
    static VariationField swirl(const Vec2& center, double radius, double amp);
    // Y-periodic field tangent to the cell faces.
    static VariationField periodic_sine(double ax, double ay);
};

// Sampled admissibility checks for variation fields.
struct AdmissibilityReport {
    double boundary_flux = 0;   // max |field . normal| on the outer boundary
    double dirichlet_support = 0; // max |field| on Dirichlet edges
    double neumann_corner = 0;  // max |field| at Neumann arc endpoints
    double periodic_mismatch = 0;
    bool passed(double tol = 1e-10) const {
        return boundary_flux <= tol && dirichlet_support <= tol && neumann_corner <= tol &&
               periodic_mismatch <= tol;
    }
};
AdmissibilityReport check_admissible(const VariationField& f, const MacroMesh& mesh,
                                     int samples_per_edge = 4);
AdmissibilityReport check_admissible_cell(const VariationField& f, int samples = 64);

// Flow map of the autonomous velocity field, integrated with RK4 using
// max(8, ceil(64 |t|)) substeps.  The inverse map is the flow at -t.
struct FlowMap {
    VariationField field;
    Vec2 advance(const Vec2& x, double t) const;
};
std::vector<Vec2> flow(const std::vector<Vec2>& pts, const FlowMap& map, double t);

// First variation of the length of the polyline under the velocity field:
// int (div F - n . grad F n) over the segments (2-point Gauss per segment).
double perimeter_first_variation(const InterfacePolyline& poly, const VariationField& f);

// Sharp two-field configuration carried as level sets (negative inside).
struct SharpConfig {
    ScalarField phi_ls;          // {phi = 1} region on Omega
    PeriodicScalarField m_ls;    // {m = 2} region on Y

    // Nodal indicator-type fields; band > 0 blends the jump linearly over
    // +-band in level-set value (used to keep re-solves smooth under
    // transport; band = 0 gives the pure 0/1 rasterization).
    ScalarField phi_field(double band = 0.0) const;
    PeriodicScalarField m_field(double band = 0.0) const;

    InterfacePolyline phi_interface() const { return extract_interface(phi_ls); }
    InterfacePolyline m_interface() const { return extract_interface(m_ls); }

    // Level sets composed with the inverse flows (nodal sampling).
    SharpConfig transported(const VariationField& Phi, const VariationField& Psi, double t) const;
};

// Sharp cost: compliance + c_H * (perimeter of {phi=1} in Omega + perimeter
// of {m=2} in Y); +infinity if the volume caps fail.
double eval_Js(const MacroMesh& mesh, const SharpConfig& cfg, const DisplacementField& u,
               const LoadCase& loads, const VolumeCaps& caps, const DoubleWell& dw,
               double band = 0.0);

// Cell response to transporting the microstructure: the corrector derivative
// z solves the variational problem driven by grad Psi(0) and div Psi(0).
CorrectorSet solve_z(const CellSystem& sys, const CorrectorSet& corr, const VariationField& Psi,
                     const SolveOptions& opts = {});

// Derivative of the homogenized tensor under transport of m by Psi.
Tensor4 c_tilde(const CellSystem& sys, const CorrectorSet& corr, const VariationField& Psi,
                const CorrectorSet& z);

// Convenience: correctors + z + c_tilde at phi-level 1 for the given m.
Tensor4 sharp_cell_derivative(const PeriodicScalarField& m, const Material& mat,
                              const VariationField& Psi, const SolveOptions& opts = {});

struct ShapeDerivTerms {
    double cell_tensor = 0;   // -int Ct e(u):e(u)
    double convection = 0;    // +2 int C* e(u):(grad u grad Phi)
    double volume_div = 0;    // -int C* e(u):e(u) div Phi
    double body_force = 0;    // +2 int phi ((grad f Phi).u + f.u div Phi)
    double traction = 0;      // Neumann terms with the tangential correction
    double perimeter_phi = 0; // c_H * first variation of P({phi=1}; Omega)
    double perimeter_m = 0;   // c_H * first variation of P({m=2}; Y)
    double total() const {
        return cell_tensor + convection + volume_div + body_force + traction + perimeter_phi +
               perimeter_m;
    }
};

// Derivative of the sharp cost along the transported configuration
// (phi o T_t^-1, m o S_t^-1) at t = 0.
ShapeDerivTerms shape_derivative(const MacroMesh& mesh, const SharpConfig& cfg,
                                 const StateSolution& state, const CStarTable& table,
                                 const Tensor4& ctilde_level1, const VariationField& Phi,
                                 const VariationField& Psi, const LoadCase& loads,
                                 const DoubleWell& dw, double band = 0.0);

// Stationarity residual with volume-cap multipliers:
// shape derivative + lambda int phi div Phi + mu int_Y m div Psi.
double smto_residual(const MacroMesh& mesh, const SharpConfig& cfg, const StateSolution& state,
                     const CStarTable& table, const Tensor4& ctilde_level1,
                     const VariationField& Phi, const VariationField& Psi, const LoadCase& loads,
                     const DoubleWell& dw, double lambda, double mu, double band = 0.0);

// Least-squares multipliers over a basis of variation pairs, normalising the
// cap activity the way the volume-flux fields do.
struct MultiplierFit {
    double lambda = 0, mu = 0;
    std::vector<double> residual_before, residual_after;
    double norm_before = 0, norm_after = 0;
};
MultiplierFit fit_multipliers(const MacroMesh& mesh, const SharpConfig& cfg,
                              const StateSolution& state, const CStarTable& table,
                              const std::vector<std::pair<VariationField, VariationField>>& basis,
                              const LoadCase& loads, const DoubleWell& dw,
                              const SolveOptions& opts = {}, double band = 0.0);

// Transported-state sensitivity: the derivative of u(t) o T_t at t = 0,
// solved from its variational characterization (validation-scale).
DisplacementField solve_transported_sensitivity(const MacroMesh& mesh, const SharpConfig& cfg,
                                                const StateSolution& state,
                                                const CStarTable& table,
                                                const Tensor4& ctilde_level1,
                                                const VariationField& Phi, const LoadCase& loads,
                                                const SolveOptions& opts = {}, double band = 0.0);

} // namespace mtopt
