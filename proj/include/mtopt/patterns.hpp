#pragma once

#include "mtopt/grid.hpp"

namespace mtopt {

inline ScalarField constant_phi(const MacroMesh& mesh, double v) { return ScalarField(mesh, v); }

// Smooth in-box pattern for phi, values mid +- amp.
inline ScalarField sine_phi(const MacroMesh& mesh, double mid, double amp) {
    ScalarField f(mesh);
    for (int n = 0; n < mesh.num_nodes(); ++n) {
        const Vec2 x = mesh.node_coord(n);
        f.values[n] =
            mid + amp * std::sin(2.0 * M_PI * x[0] / mesh.lx) * std::sin(2.0 * M_PI * x[1] / mesh.ly);
    }
    return f;
}

inline PeriodicScalarField constant_m(const CellMesh& mesh, double v) {
    return PeriodicScalarField(mesh, v);
}

// blocks x blocks checkerboard with values {lo, hi}.
inline PeriodicScalarField checkerboard_m(const CellMesh& mesh, int blocks = 2, double lo = 1.0,
                                          double hi = 2.0) {
    PeriodicScalarField f(mesh);
    for (int n = 0; n < mesh.num_nodes(); ++n) {
        const Vec2 y = mesh.node_coord(n);
        const int bi = std::min(int(y[0] * blocks), blocks - 1);
        const int bj = std::min(int(y[1] * blocks), blocks - 1);
        f.values[n] = ((bi + bj) % 2 == 0) ? hi : lo;
    }
    return f;
}

// m = lo for y1 < split, hi otherwise.
inline PeriodicScalarField laminate_m(const CellMesh& mesh, double lo = 1.0, double hi = 2.0,
                                      double split = 0.5) {
    PeriodicScalarField f(mesh);
    for (int n = 0; n < mesh.num_nodes(); ++n)
        f.values[n] = mesh.node_coord(n)[0] < split ? lo : hi;
    return f;
}

inline PeriodicScalarField sine_m(const CellMesh& mesh, double mid = 1.5, double amp = 0.4) {
    PeriodicScalarField f(mesh);
    for (int n = 0; n < mesh.num_nodes(); ++n) {
        const Vec2 y = mesh.node_coord(n);
        f.values[n] = mid + amp * std::sin(2.0 * M_PI * y[0]) * std::sin(2.0 * M_PI * y[1]);
    }
    return f;
}

// Cantilever setup: clamped left edge, traction band on the right edge.
inline MacroMesh cantilever_mesh(int nx, int ny, double lx, double ly, double band_lo = 0.4,
                                 double band_hi = 0.6) {
    MacroMesh mesh(nx, ny, lx, ly);
    mesh.tag_side(Side::Left, EdgeTag::Dirichlet);
    mesh.tag_side(Side::Right, EdgeTag::Neumann, band_lo, band_hi);
    return mesh;
}

} // namespace mtopt
