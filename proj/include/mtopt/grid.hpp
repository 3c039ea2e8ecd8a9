#pragma once

#include "mtopt/common.hpp"

namespace mtopt {

enum class EdgeTag { Free, Dirichlet, Neumann };
enum class Side { Left, Right, Bottom, Top };

// Rectangular design domain [0,lx] x [0,ly], nx x ny bilinear quad elements.
// Boundary edges carry traction/clamp tags; a Dirichlet node set is derived
// from the tagged edges.  Node (i,j) has index j*(nx+1)+i.
class MacroMesh {
  public:
    MacroMesh(int nx, int ny, double lx, double ly);

    int nx, ny;
    double lx, ly;
    double hx() const { return lx / nx; }
    double hy() const { return ly / ny; }
    double area() const { return lx * ly; }

    int num_nodes() const { return (nx + 1) * (ny + 1); }
    int num_elems() const { return nx * ny; }
    int node(int i, int j) const { return j * (nx + 1) + i; }
    Vec2 node_coord(int n) const {
        return Vec2((n % (nx + 1)) * hx(), (n / (nx + 1)) * hy());
    }
    // Corner nodes of element (ei,ej), counterclockwise from bottom-left.
    std::array<int, 4> elem_nodes(int ei, int ej) const {
        return {node(ei, ej), node(ei + 1, ej), node(ei + 1, ej + 1), node(ei, ej + 1)};
    }
    Vec2 elem_origin(int ei, int ej) const { return Vec2(ei * hx(), ej * hy()); }

    // Tag a span of a boundary side, with t0,t1 arc fractions in [0,1].
    // Edges whose midpoint falls in the span get the tag.
    void tag_side(Side s, EdgeTag tag, double t0 = 0.0, double t1 = 1.0);

    // Checks H^1(Gamma_D) > 0 and that no edge carries both tags; a node shared
    // by a Dirichlet and a Neumann edge is kept Dirichlet (and reported).
    void validate_boundary() const;

    struct BoundaryEdge {
        int n0, n1;   // endpoint node ids
        Vec2 normal;  // outer unit normal
        double len;
        EdgeTag tag = EdgeTag::Free;
    };
    const std::vector<BoundaryEdge>& boundary_edges() const { return edges_; }
    std::vector<BoundaryEdge>& boundary_edges() { return edges_; }

    // Nodes belonging to at least one Dirichlet edge.
    std::vector<int> dirichlet_nodes() const;
    bool has_dirichlet() const;

  private:
    std::vector<BoundaryEdge> edges_;
};

// Periodic unit cell Y = [0,1)^2 with nc x nc elements.  Opposite faces are
// identified, so there are exactly nc^2 independent nodes.
class CellMesh {
  public:
    explicit CellMesh(int nc_) : nc(nc_) {
        if (nc < 2) throw ConfigError("CellMesh: need at least 2 elements per side");
    }

    int nc;
    double h() const { return 1.0 / nc; }
    int num_nodes() const { return nc * nc; }
    int num_elems() const { return nc * nc; }
    int node(int i, int j) const { return ((j % nc + nc) % nc) * nc + ((i % nc + nc) % nc); }
    Vec2 node_coord(int n) const { return Vec2((n % nc) * h(), (n / nc) * h()); }
    std::array<int, 4> elem_nodes(int ei, int ej) const {
        return {node(ei, ej), node(ei + 1, ej), node(ei + 1, ej + 1), node(ei, ej + 1)};
    }
    Vec2 elem_origin(int ei, int ej) const { return Vec2(ei * h(), ej * h()); }
};

// Nodal fields.  Values are plain vectors; the mesh shape rides along so the
// field can be interpolated and integrated without extra bookkeeping.

struct ScalarField {
    ScalarField() = default;
    ScalarField(const MacroMesh& m, double value = 0.0)
        : nx(m.nx), ny(m.ny), lx(m.lx), ly(m.ly), values(VecX::Constant(m.num_nodes(), value)) {}

    int nx = 0, ny = 0;
    double lx = 0, ly = 0;
    VecX values;

    double interp(const Vec2& x) const;       // Q1 interpolation, clamped to the box
    Vec2 interp_grad(const Vec2& x) const;
};

struct PeriodicScalarField {
    PeriodicScalarField() = default;
    PeriodicScalarField(const CellMesh& m, double value = 0.0)
        : nc(m.nc), values(VecX::Constant(m.num_nodes(), value)) {}

    int nc = 0;
    VecX values;

    double interp(const Vec2& y) const;       // periodic wrap
    Vec2 interp_grad(const Vec2& y) const;
};

// Two interleaved components per node: (ux_0, uy_0, ux_1, uy_1, ...).
struct DisplacementField {
    DisplacementField() = default;
    DisplacementField(const MacroMesh& m) : nx(m.nx), ny(m.ny), lx(m.lx), ly(m.ly) {
        values = VecX::Zero(2 * m.num_nodes());
    }

    int nx = 0, ny = 0;
    double lx = 0, ly = 0;
    VecX values;

    Vec2 at(int node) const { return Vec2(values[2 * node], values[2 * node + 1]); }
    Vec2 interp(const Vec2& x) const;
};

// Q1 shape functions on the reference square [-1,1]^2 (corner order matches
// elem_nodes) and their derivatives.
inline std::array<double, 4> shape_values(double xi, double eta) {
    return {0.25 * (1 - xi) * (1 - eta), 0.25 * (1 + xi) * (1 - eta),
            0.25 * (1 + xi) * (1 + eta), 0.25 * (1 - xi) * (1 + eta)};
}
// d/dxi and d/deta rows.
inline std::array<std::array<double, 4>, 2> shape_grads(double xi, double eta) {
    return {{{-0.25 * (1 - eta), 0.25 * (1 - eta), 0.25 * (1 + eta), -0.25 * (1 + eta)},
             {-0.25 * (1 - xi), -0.25 * (1 + xi), 0.25 * (1 + xi), 0.25 * (1 - xi)}}};
}

} // namespace mtopt
