#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtopt {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

// Invalid user input (parameters, config files, mesh tags).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Iterative solver did not reach the requested tolerance.
struct SolverError : std::runtime_error {
    SolverError(const std::string& msg, double residual)
        : std::runtime_error(msg + " (relative residual " + std::to_string(residual) + ")"),
          rel_residual(residual) {}
    double rel_residual;
};

// An internal pre/post condition was violated by the caller.
struct ContractViolation : std::logic_error {
    explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

// 2x2 Gauss-Legendre rule on [-1,1]^2; weights are all 1.
inline constexpr double kGaussPt = 0.57735026918962576451; // 1/sqrt(3)

struct QuadPoint {
    double xi, eta;
};

inline const std::array<QuadPoint, 4>& gauss2x2() {
    static const std::array<QuadPoint, 4> pts = {{{-kGaussPt, -kGaussPt},
                                                  {+kGaussPt, -kGaussPt},
                                                  {+kGaussPt, +kGaussPt},
                                                  {-kGaussPt, +kGaussPt}}};
    return pts;
}

// 2-point Gauss rule on [-1,1] for boundary edges.
inline const std::array<double, 2>& gauss2() {
    static const std::array<double, 2> pts = {-kGaussPt, +kGaussPt};
    return pts;
}

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

} // namespace mtopt
