#include "mtopt/grid.hpp"

#include <iostream>

namespace mtopt {

MacroMesh::MacroMesh(int nx_, int ny_, double lx_, double ly_)
    : nx(nx_), ny(ny_), lx(lx_), ly(ly_) {
    if (nx < 1 || ny < 1) throw ConfigError("MacroMesh: element counts must be positive");
    if (!(lx > 0.0 && ly > 0.0)) throw ConfigError("MacroMesh: domain lengths must be positive");
    // Boundary edges in order: bottom, right, top, left.
    edges_.reserve(2 * (nx + ny));
    for (int i = 0; i < nx; ++i)
        edges_.push_back({node(i, 0), node(i + 1, 0), Vec2(0, -1), hx(), EdgeTag::Free});
    for (int j = 0; j < ny; ++j)
        edges_.push_back({node(nx, j), node(nx, j + 1), Vec2(1, 0), hy(), EdgeTag::Free});
    for (int i = 0; i < nx; ++i)
        edges_.push_back({node(i, ny), node(i + 1, ny), Vec2(0, 1), hx(), EdgeTag::Free});
    for (int j = 0; j < ny; ++j)
        edges_.push_back({node(0, j), node(0, j + 1), Vec2(-1, 0), ly / ny, EdgeTag::Free});
}

void MacroMesh::tag_side(Side s, EdgeTag tag, double t0, double t1) {
    if (!(t0 <= t1)) throw ConfigError("tag_side: need t0 <= t1");
    int begin = 0, count = 0;
    double span = 0.0;
    switch (s) {
        case Side::Bottom: begin = 0; count = nx; span = lx; break;
        case Side::Right: begin = nx; count = ny; span = ly; break;
        case Side::Top: begin = nx + ny; count = nx; span = lx; break;
        case Side::Left: begin = 2 * nx + ny; count = ny; span = ly; break;
    }
    const double h = span / count;
    for (int k = 0; k < count; ++k) {
        const double mid = (k + 0.5) * h / span;
        if (mid >= t0 && mid <= t1) {
            auto& e = edges_[begin + k];
            if (e.tag != EdgeTag::Free && e.tag != tag)
                throw ConfigError("tag_side: edge already carries a conflicting tag");
            e.tag = tag;
        }
    }
}

void MacroMesh::validate_boundary() const {
    if (!has_dirichlet())
        throw ConfigError("boundary: at least one Dirichlet edge is required");
    // A Neumann edge touching a Dirichlet node is legal but the shared corner
    // stays clamped; surface it since tractions there are partly ignored.
    std::vector<char> dir(num_nodes(), 0);
    for (const auto& e : edges_)
        if (e.tag == EdgeTag::Dirichlet) dir[e.n0] = dir[e.n1] = 1;
    for (const auto& e : edges_)
        if (e.tag == EdgeTag::Neumann && (dir[e.n0] || dir[e.n1]))
            std::cerr << "warning: Neumann edge adjacent to a Dirichlet node; "
                         "the shared corner is treated as clamped\n";
}

std::vector<int> MacroMesh::dirichlet_nodes() const {
    std::vector<char> mark(num_nodes(), 0);
    for (const auto& e : edges_)
        if (e.tag == EdgeTag::Dirichlet) mark[e.n0] = mark[e.n1] = 1;
    std::vector<int> out;
    for (int n = 0; n < num_nodes(); ++n)
        if (mark[n]) out.push_back(n);
    return out;
}

bool MacroMesh::has_dirichlet() const {
    for (const auto& e : edges_)
        if (e.tag == EdgeTag::Dirichlet) return true;
    return false;
}

namespace {

// Locates x in a uniform grid; returns element index and local [-1,1] coords.
inline void locate(double x, double len, int n, int& e, double& xi) {
    const double h = len / n;
    double t = x / h;
    e = std::min(std::max(int(std::floor(t)), 0), n - 1);
    xi = 2.0 * (t - e) - 1.0;
    xi = std::min(std::max(xi, -1.0), 1.0);
}

} // namespace

double ScalarField::interp(const Vec2& x) const {
    int ei, ej;
    double xi, eta;
    locate(x[0], lx, nx, ei, xi);
    locate(x[1], ly, ny, ej, eta);
    const auto N = shape_values(xi, eta);
    const int base = ej * (nx + 1) + ei;
    return N[0] * values[base] + N[1] * values[base + 1] + N[2] * values[base + nx + 2] +
           N[3] * values[base + nx + 1];
}

Vec2 ScalarField::interp_grad(const Vec2& x) const {
    int ei, ej;
    double xi, eta;
    locate(x[0], lx, nx, ei, xi);
    locate(x[1], ly, ny, ej, eta);
    const auto dN = shape_grads(xi, eta);
    const int base = ej * (nx + 1) + ei;
    const double v[4] = {values[base], values[base + 1], values[base + nx + 2],
                         values[base + nx + 1]};
    Vec2 g(0, 0);
    for (int a = 0; a < 4; ++a) {
        g[0] += dN[0][a] * v[a];
        g[1] += dN[1][a] * v[a];
    }
    g[0] *= 2.0 * nx / lx;
    g[1] *= 2.0 * ny / ly;
    return g;
}

double PeriodicScalarField::interp(const Vec2& y) const {
    const double h = 1.0 / nc;
    double u = y[0] - std::floor(y[0]);
    double v = y[1] - std::floor(y[1]);
    int ei = std::min(int(u / h), nc - 1), ej = std::min(int(v / h), nc - 1);
    const double xi = 2.0 * (u / h - ei) - 1.0, eta = 2.0 * (v / h - ej) - 1.0;
    const auto N = shape_values(xi, eta);
    auto idx = [&](int i, int j) { return ((j % nc + nc) % nc) * nc + ((i % nc + nc) % nc); };
    return N[0] * values[idx(ei, ej)] + N[1] * values[idx(ei + 1, ej)] +
           N[2] * values[idx(ei + 1, ej + 1)] + N[3] * values[idx(ei, ej + 1)];
}

Vec2 PeriodicScalarField::interp_grad(const Vec2& y) const {
    const double h = 1.0 / nc;
    double u = y[0] - std::floor(y[0]);
    double v = y[1] - std::floor(y[1]);
    int ei = std::min(int(u / h), nc - 1), ej = std::min(int(v / h), nc - 1);
    const double xi = 2.0 * (u / h - ei) - 1.0, eta = 2.0 * (v / h - ej) - 1.0;
    const auto dN = shape_grads(xi, eta);
    auto idx = [&](int i, int j) { return ((j % nc + nc) % nc) * nc + ((i % nc + nc) % nc); };
    const double vals[4] = {values[idx(ei, ej)], values[idx(ei + 1, ej)],
                            values[idx(ei + 1, ej + 1)], values[idx(ei, ej + 1)]};
    Vec2 g(0, 0);
    for (int a = 0; a < 4; ++a) {
        g[0] += dN[0][a] * vals[a];
        g[1] += dN[1][a] * vals[a];
    }
    g *= 2.0 * nc;
    return g;
}

Vec2 DisplacementField::interp(const Vec2& x) const {
    int ei, ej;
    double xi, eta;
    locate(x[0], lx, nx, ei, xi);
    locate(x[1], ly, ny, ej, eta);
    const auto N = shape_values(xi, eta);
    const int base = ej * (nx + 1) + ei;
    const int nodes[4] = {base, base + 1, base + nx + 2, base + nx + 1};
    Vec2 u(0, 0);
    for (int a = 0; a < 4; ++a) u += N[a] * Vec2(values[2 * nodes[a]], values[2 * nodes[a] + 1]);
    return u;
}

} // namespace mtopt
