#pragma once

#include "mtopt/common.hpp"

namespace mtopt {

// Symmetric 2x2 matrix (strain or stress), stored by its three components.
// e12 is the actual tensor component, not the engineering (doubled) shear.
struct SymMat2 {
    double e11 = 0.0, e22 = 0.0, e12 = 0.0;

    // Orthonormal (Mandel) coordinates: (e11, e22, sqrt(2)*e12).  The map is an
    // isometry, so A:B equals the dot product of the coordinate vectors.
    Vec3 mandel() const { return Vec3(e11, e22, std::sqrt(2.0) * e12); }
    static SymMat2 from_mandel(const Vec3& v) { return {v[0], v[1], v[2] / std::sqrt(2.0)}; }

    double dot(const SymMat2& o) const { return e11 * o.e11 + e22 * o.e22 + 2.0 * e12 * o.e12; }
    double norm() const { return std::sqrt(dot(*this)); }
    double trace() const { return e11 + e22; }

    Mat2 matrix() const {
        Mat2 m;
        m << e11, e12, e12, e22;
        return m;
    }
    static SymMat2 sym(const Mat2& a) { return {a(0, 0), a(1, 1), 0.5 * (a(0, 1) + a(1, 0))}; }
};

inline SymMat2 operator+(const SymMat2& a, const SymMat2& b) {
    return {a.e11 + b.e11, a.e22 + b.e22, a.e12 + b.e12};
}
inline SymMat2 operator-(const SymMat2& a, const SymMat2& b) {
    return {a.e11 - b.e11, a.e22 - b.e22, a.e12 - b.e12};
}
inline SymMat2 operator*(double s, const SymMat2& a) { return {s * a.e11, s * a.e22, s * a.e12}; }

// Fourth-order tensor with minor and major symmetries, plane strain (n = 2).
//
// Storage is the 3x3 matrix of the tensor viewed as a linear operator on
// symmetric 2x2 matrices in the orthonormal basis
//     b1 = e1(x)e1,  b2 = e2(x)e2,  b3 = (e1(x)e2 + e2(x)e1)/sqrt(2),
// i.e. mandel(C E) = M * mandel(E).  Consequences used throughout:
//   * C E : F == mandel(E)' * M * mandel(F) exactly (no shear factor bugs),
//   * the eigenvalues of M are the eigenvalues of C on symmetric matrices,
//   * component C_ijkl = M(I,J) / (f_I f_J) with f = (1, 1, sqrt(2)).
class Tensor4 {
  public:
    Tensor4() : m_(Mat3::Zero()) {}

    // Accepts a symmetric matrix; asymmetry beyond roundoff is a caller bug.
    explicit Tensor4(const Mat3& m) {
        const double asym = (m - m.transpose()).norm();
        if (asym > 1e-12 * (1.0 + m.norm()))
            throw ContractViolation("Tensor4: matrix is not major-symmetric");
        m_ = 0.5 * (m + m.transpose());
    }

    static Tensor4 identity() { return Tensor4(Mat3::Identity()); }

    const Mat3& mandel() const { return m_; }

    double component(int i, int j, int k, int l) const;

    SymMat2 apply(const SymMat2& e) const { return SymMat2::from_mandel(m_ * e.mandel()); }

    // Full contraction C E : F.
    double contract(const SymMat2& e, const SymMat2& f) const {
        return e.mandel().dot(m_ * f.mandel());
    }

    Tensor4& operator+=(const Tensor4& o) {
        m_ += o.m_;
        return *this;
    }
    friend Tensor4 operator+(Tensor4 a, const Tensor4& b) { return a += b; }
    friend Tensor4 operator-(const Tensor4& a, const Tensor4& b) { return Tensor4(a.m_ - b.m_); }
    friend Tensor4 operator*(double s, const Tensor4& a) { return Tensor4(s * a.m_); }

    double norm() const { return m_.norm(); }

  private:
    Mat3 m_;
};

// Plane-strain isotropic tensor from Young's modulus and Poisson ratio.
Tensor4 make_isotropic(double young, double poisson);

// Smallest/largest eigenvalue of the tensor acting on symmetric matrices.
std::pair<double, double> spectral_bounds(const Tensor4& c);

// The two constituent tensors.  C2 is the soft Ersatz filler, C2 = delta*C1.
struct Material {
    Tensor4 C1, C2;

    static Material isotropic(double young, double poisson, double delta) {
        if (!(delta > 0.0)) throw ConfigError("material: contrast delta must be positive");
        Material m;
        m.C1 = make_isotropic(young, poisson);
        m.C2 = delta * m.C1;
        return m;
    }

    // Local tensor phi*m*C1 + (1-phi)*C2 in Mandel form; hot path, no checks.
    Mat3 mix(double phi, double m) const { return phi * m * C1.mandel() + (1.0 - phi) * C2.mandel(); }
};

} // namespace mtopt
