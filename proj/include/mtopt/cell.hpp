#pragma once

#include "mtopt/assembly.hpp"

namespace mtopt {

// The three cell correctors at a fixed phi level s: zero-mean periodic
// displacement fields responding to the unit macroscopic strains
// e11, e22 and e12 = (e1 (x) e2 + e2 (x) e1)/2.
struct CorrectorSet {
    double s = 0.0;
    std::array<VecX, 3> w; // w[0]=w11, w[1]=w22, w[2]=w12, each of size 2*nc^2
};

// Mandel coordinates of the unit strains, and the scaling diag(1,1,sqrt(2))
// that turns the raw corrector-pair matrix A_IJ into the Mandel matrix of the
// corresponding fourth-order tensor.
inline const std::array<Vec3, 3>& unit_strain_mandel() {
    static const std::array<Vec3, 3> e = {Vec3(1, 0, 0), Vec3(0, 1, 0),
                                          Vec3(0, 0, 1.0 / std::sqrt(2.0))};
    return e;
}
inline const Vec3& mandel_scaling() {
    static const Vec3 f(1.0, 1.0, std::sqrt(2.0));
    return f;
}

// Assembled periodic elasticity operator for coefficient C(s,m)(y), together
// with the quadrature caches reused by every cell-level computation.
struct CellSystem {
    CellSystem(double s, const PeriodicScalarField& m, const CellMesh& mesh, const Material& mat);

    double s;
    int nc;
    Material mat;
    QuadKernel quad;
    SpMat K;
    std::vector<double> m_q; // m at each gauss point, num_elems*4
    std::vector<Mat3> M_q;   // coefficient tensor at each gauss point

    int qindex(int ei, int ej, int q) const { return 4 * (ej * nc + ei) + q; }
};

CorrectorSet solve_correctors(double s, const PeriodicScalarField& m, const CellMesh& mesh,
                              const Material& mat, const SolveOptions& opts = {});
CorrectorSet solve_correctors(const CellSystem& sys, const SolveOptions& opts = {});

// Corrector-adjusted strains at every quadrature point: column I of the 3x3
// entry is mandel(e_y(w_I) + E_I).
std::vector<Mat3> corrector_strains(const CellSystem& sys, const CorrectorSet& corr);

struct HomogenizedResult {
    Mat3 raw_energy; // A_IJ = int C (e(w_I)+E_I) : (e(w_J)+E_J), all 9 entries
    Mat3 raw_flux;   // A_IJ = int C (e(w_I)+E_I) : E_J
    Tensor4 tensor;  // symmetrized Mandel form of raw_energy
};

HomogenizedResult homogenized_tensor_full(const CellSystem& sys, const CorrectorSet& corr);
Tensor4 homogenized_tensor(double s, const PeriodicScalarField& m, const CellMesh& mesh,
                           const Material& mat, const CorrectorSet& corr);

// Derivative of the homogenized tensor along the variation (psi, mu); psi
// enters through its local value at the macro point, mu as a field on Y.
// Pass mu = nullptr for the pure phi derivative.
Tensor4 d_cstar(const CellSystem& sys, const CorrectorSet& corr, double psi_val,
                const PeriodicScalarField* mu);

// Linearized correctors: derivative of the corrector fields along (psi, mu).
CorrectorSet solve_linearized_corrector(const CellSystem& sys, const CorrectorSet& corr,
                                        double psi_val, const PeriodicScalarField* mu,
                                        const SolveOptions& opts = {});

// Tabulation of s -> (C*(s), dC*/ds) over [0,1], with cubic Hermite
// interpolation that reproduces both samples and slopes at the level points.
// Correctors depend on the macro position only through s = phi(x), so
// n_levels cell solves replace one solve per macro quadrature point.
class CStarTable {
  public:
    struct Level {
        double s;
        Tensor4 cstar, cstar_slope;
        CorrectorSet correctors;
        std::vector<Mat3> strains; // corrector-adjusted strain columns per gauss point
    };

    static CStarTable build(const PeriodicScalarField& m, const CellMesh& mesh,
                            const Material& mat, int n_levels, const SolveOptions& opts = {},
                            int threads = 1);

    Mat3 value(double s) const; // Mandel matrix of C*(s)
    Mat3 slope(double s) const; // derivative of the interpolant at s

    int num_levels() const { return int(levels_.size()); }
    const Level& level(int k) const { return levels_[k]; }
    int nearest_level(double s) const;

    const PeriodicScalarField& microstructure() const { return m_; }
    const Material& material() const { return mat_; }
    int cell_resolution() const { return nc_; }
    int safeguard_clamps() const { return clamps_; }

    // int_Y mu(y) * (G' M1 G) dy at a level; the mu-weighted corrector-pair
    // integral entering the microstructure derivative.
    Mat3 mu_pair(int k, const PeriodicScalarField& mu) const;

    // Cross-validation mode: queries solve the cell problem at the exact
    // level instead of interpolating (memoized; slow, test use only).
    bool exact_mode = false;

  private:
    std::vector<Level> levels_;
    PeriodicScalarField m_;
    Material mat_;
    int nc_ = 0;
    int clamps_ = 0;
    // Hermite data per unique entry of the symmetric 3x3 Mandel matrix.
    std::array<VecX, 6> vals_, slopes_;
    SolveOptions opts_;
    mutable std::vector<std::pair<double, Mat3>> exact_cache_;

    Mat3 exact_value(double s) const;
};

} // namespace mtopt
