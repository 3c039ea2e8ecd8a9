#include <doctest.h>

#include "mtopt/grid.hpp"

using namespace mtopt;

TEST_CASE("macro mesh node numbering and coordinates") {
    MacroMesh mesh(4, 2, 2.0, 1.0);
    CHECK(mesh.num_nodes() == 15);
    CHECK(mesh.num_elems() == 8);
    CHECK(mesh.node(4, 2) == 14);
    CHECK(mesh.node_coord(mesh.node(2, 1))[0] == doctest::Approx(1.0));
    CHECK(mesh.node_coord(mesh.node(2, 1))[1] == doctest::Approx(0.5));
}

TEST_CASE("boundary tagging and Dirichlet nodes") {
    MacroMesh mesh(4, 4, 1.0, 1.0);
    mesh.tag_side(Side::Left, EdgeTag::Dirichlet);
    mesh.tag_side(Side::Right, EdgeTag::Neumann, 0.25, 0.75);
    mesh.validate_boundary();
    CHECK(mesh.has_dirichlet());
    CHECK(mesh.dirichlet_nodes().size() == 5);
    int neumann = 0;
    for (const auto& e : mesh.boundary_edges())
        if (e.tag == EdgeTag::Neumann) ++neumann;
    CHECK(neumann == 2); // edges with midpoints 0.375, 0.625
    CHECK_THROWS_AS(mesh.tag_side(Side::Left, EdgeTag::Neumann), ConfigError);
}

TEST_CASE("missing Dirichlet boundary is rejected") {
    MacroMesh mesh(2, 2, 1.0, 1.0);
    CHECK_THROWS_AS(mesh.validate_boundary(), ConfigError);
}

TEST_CASE("periodic cell mesh wraps") {
    CellMesh cell(8);
    CHECK(cell.num_nodes() == 64);
    CHECK(cell.node(8, 3) == cell.node(0, 3));
    CHECK(cell.node(-1, 0) == cell.node(7, 0));
    const auto nodes = cell.elem_nodes(7, 7);
    CHECK(nodes[2] == cell.node(0, 0));
}

TEST_CASE("Q1 interpolation reproduces bilinear data") {
    MacroMesh mesh(5, 3, 1.0, 1.0);
    ScalarField f(mesh);
    for (int n = 0; n < mesh.num_nodes(); ++n) {
        const Vec2 x = mesh.node_coord(n);
        f.values[n] = 2.0 + 3.0 * x[0] - x[1] + 0.5 * x[0] * x[1];
    }
    const Vec2 p(0.37, 0.81);
    CHECK(f.interp(p) == doctest::Approx(2.0 + 3.0 * p[0] - p[1] + 0.5 * p[0] * p[1]).epsilon(1e-13));
    const Vec2 g = f.interp_grad(p);
    CHECK(g[0] == doctest::Approx(3.0 + 0.5 * p[1]).epsilon(1e-12));
    CHECK(g[1] == doctest::Approx(-1.0 + 0.5 * p[0]).epsilon(1e-12));
}

TEST_CASE("periodic interpolation wraps coordinates") {
    CellMesh cell(16);
    PeriodicScalarField f(cell);
    for (int n = 0; n < cell.num_nodes(); ++n)
        f.values[n] = std::sin(2 * M_PI * cell.node_coord(n)[0]);
    const double v0 = f.interp(Vec2(0.3, 0.5));
    CHECK(f.interp(Vec2(1.3, 0.5)) == doctest::Approx(v0).epsilon(1e-13));
    CHECK(f.interp(Vec2(-0.7, 2.5)) == doctest::Approx(v0).epsilon(1e-13));
}
