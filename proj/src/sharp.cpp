#include "mtopt/sharp.hpp"

#include <map>

namespace mtopt {

// ---------------------------------------------------------------------------
// Marching squares

namespace {

struct Crossing {
    Vec2 p;
    bool exit; // walking the cell boundary CCW, inside -> outside
};

// Canonical edge crossing: interpolated in a fixed node order so both cells
// adjacent to an edge produce bitwise-identical coordinates.
inline Vec2 edge_crossing(int key_a, const Vec2& pa, double va, int key_b, const Vec2& pb,
                          double vb) {
    if (key_a > key_b) return edge_crossing(key_b, pb, vb, key_a, pa, va);
    const double t = va / (va - vb);
    return pa + t * (pb - pa);
}

inline Vec2 rot90_ccw(const Vec2& v) { return Vec2(-v[1], v[0]); }

// Emits the oriented segments of one cell given corner values/coords/ids
// (counterclockwise corner order).  The enclosed region is {value < 0} and
// sits on the left of each segment.
void cell_segments(const std::array<double, 4>& v, const std::array<Vec2, 4>& p,
                   const std::array<int, 4>& ids, double hmin,
                   std::vector<InterfacePolyline::Segment>& out) {
    static const int ea[4] = {0, 1, 2, 3};
    static const int eb[4] = {1, 2, 3, 0};
    Crossing cr[4];
    int n = 0;
    for (int e = 0; e < 4; ++e) {
        const bool ia = v[ea[e]] < 0.0, ib = v[eb[e]] < 0.0;
        if (ia == ib) continue;
        cr[n].p = edge_crossing(ids[ea[e]], p[ea[e]], v[ea[e]], ids[eb[e]], p[eb[e]], v[eb[e]]);
        cr[n].exit = ia;
        ++n;
    }
    auto emit = [&](const Vec2& a, const Vec2& b) {
        const Vec2 d = b - a;
        const double len = d.norm();
        if (len < 1e-12 * hmin) return;
        out.push_back({a, b, rot90_ccw(d) / len, -1});
    };
    if (n == 2) {
        const int e0 = cr[0].exit ? 0 : 1;
        emit(cr[e0].p, cr[1 - e0].p);
    } else if (n == 4) {
        const double center = 0.25 * (v[0] + v[1] + v[2] + v[3]);
        for (int k = 0; k < 4; ++k) {
            if (!cr[k].exit) continue;
            // center inside: pair with the next entry; outside: previous.
            const int partner = center < 0.0 ? (k + 1) % 4 : (k + 3) % 4;
            emit(cr[k].p, cr[partner].p);
        }
    }
}

// Tolerance-quantized chaining of segments into polyline ids.
void assign_chains(std::vector<InterfacePolyline::Segment>& segs, double h) {
    auto key = [&](const Vec2& p) {
        return std::pair<long long, long long>(llround(p[0] / h * 4096.0),
                                               llround(p[1] / h * 4096.0));
    };
    std::map<std::pair<long long, long long>, std::vector<int>> by_start;
    for (int i = 0; i < int(segs.size()); ++i) by_start[key(segs[i].a)].push_back(i);
    int chain = 0;
    for (int i = 0; i < int(segs.size()); ++i) {
        if (segs[i].chain >= 0) continue;
        int cur = i;
        while (cur >= 0 && segs[cur].chain < 0) {
            segs[cur].chain = chain;
            int next = -1;
            auto it = by_start.find(key(segs[cur].b));
            if (it != by_start.end())
                for (int cand : it->second)
                    if (segs[cand].chain < 0) {
                        next = cand;
                        break;
                    }
            cur = next;
        }
        ++chain;
    }
}

} // namespace

InterfacePolyline extract_interface(const ScalarField& field, bool indicator) {
    MacroMesh mesh(field.nx, field.ny, field.lx, field.ly);
    auto val = [&](int i, int j) {
        const double v = field.values[mesh.node(i, j)];
        return indicator ? 0.5 - v : v;
    };
    InterfacePolyline poly;
    poly.domain = InterfacePolyline::Domain::Macro;
    const double hmin = std::min(mesh.hx(), mesh.hy());
    for (int ej = 0; ej < mesh.ny; ++ej)
        for (int ei = 0; ei < mesh.nx; ++ei) {
            const std::array<int, 4> corner_i = {ei, ei + 1, ei + 1, ei};
            const std::array<int, 4> corner_j = {ej, ej, ej + 1, ej + 1};
            std::array<double, 4> v;
            std::array<Vec2, 4> p;
            std::array<int, 4> ids;
            for (int c = 0; c < 4; ++c) {
                v[c] = val(corner_i[c], corner_j[c]);
                p[c] = Vec2(corner_i[c] * mesh.hx(), corner_j[c] * mesh.hy());
                ids[c] = mesh.node(corner_i[c], corner_j[c]);
            }
            cell_segments(v, p, ids, hmin, poly.segments);
        }
    assign_chains(poly.segments, hmin);
    return poly;
}

InterfacePolyline extract_interface(const PeriodicScalarField& field, bool indicator) {
    CellMesh mesh(field.nc);
    auto val = [&](int i, int j) {
        const double v = field.values[mesh.node(i, j)];
        return indicator ? 0.5 - v : v;
    };
    InterfacePolyline poly;
    poly.domain = InterfacePolyline::Domain::Cell;
    const double h = mesh.h();
    for (int ej = 0; ej < mesh.nc; ++ej)
        for (int ei = 0; ei < mesh.nc; ++ei) {
            const std::array<int, 4> corner_i = {ei, ei + 1, ei + 1, ei};
            const std::array<int, 4> corner_j = {ej, ej, ej + 1, ej + 1};
            std::array<double, 4> v;
            std::array<Vec2, 4> p;
            std::array<int, 4> ids;
            for (int c = 0; c < 4; ++c) {
                v[c] = val(corner_i[c], corner_j[c]);
                p[c] = Vec2(corner_i[c] * h, corner_j[c] * h);
                ids[c] = mesh.node(corner_i[c], corner_j[c]);
            }
            cell_segments(v, p, ids, h, poly.segments);
        }
    assign_chains(poly.segments, h);
    return poly;
}

namespace {

// Inside test by the normal side of the closest segment.
bool inside_by_nearest(const InterfacePolyline& poly, const Vec2& x) {
    double best = std::numeric_limits<double>::max();
    double side = 0.0;
    for (const auto& s : poly.segments) {
        const Vec2 d = s.b - s.a;
        const double len2 = d.squaredNorm();
        double t = len2 > 0 ? (x - s.a).dot(d) / len2 : 0.0;
        t = std::min(std::max(t, 0.0), 1.0);
        const Vec2 cp = s.a + t * d;
        const double dist = (x - cp).norm();
        if (dist < best) {
            best = dist;
            side = (x - cp).dot(s.normal);
        }
    }
    return side > 0.0;
}

} // namespace

VecX rasterize_indicator(const InterfacePolyline& poly, const MacroMesh& mesh) {
    VecX out = VecX::Zero(mesh.num_nodes());
    if (poly.empty()) return out;
    for (int n = 0; n < mesh.num_nodes(); ++n)
        out[n] = inside_by_nearest(poly, mesh.node_coord(n)) ? 1.0 : 0.0;
    return out;
}

VecX rasterize_indicator(const InterfacePolyline& poly, const CellMesh& mesh) {
    VecX out = VecX::Zero(mesh.num_nodes());
    if (poly.empty()) return out;
    for (int n = 0; n < mesh.num_nodes(); ++n)
        out[n] = inside_by_nearest(poly, mesh.node_coord(n)) ? 1.0 : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Variation fields

VariationField VariationField::translation(const Vec2& c) {
    VariationField f;
    f.eval = [c](const Vec2&) { return c; };
    f.name = "translation";
    return f;
}

VariationField VariationField::linear(const Mat2& A, const Vec2& x0) {
    VariationField f;
    f.eval = [A, x0](const Vec2& x) { return Vec2(A * (x - x0)); };
    f.grad = [A](const Vec2&) { return A; };
    f.name = "linear";
    return f;
}

VariationField VariationField::box_tangent_sine(const Vec2& amp, double lx, double ly) {
    VariationField f;
    const double kx = M_PI / lx, ky = M_PI / ly;
    f.eval = [=](const Vec2& x) {
        const double s = std::sin(kx * x[0]) * std::sin(ky * x[1]);
        return Vec2(amp[0] * s, amp[1] * s);
    };
    f.grad = [=](const Vec2& x) {
        const double sx = std::sin(kx * x[0]), sy = std::sin(ky * x[1]);
        const double cx = std::cos(kx * x[0]), cy = std::cos(ky * x[1]);
        Mat2 g;
        g << amp[0] * kx * cx * sy, amp[0] * sx * ky * cy, //
            amp[1] * kx * cx * sy, amp[1] * sx * ky * cy;
        return g;
    };
    f.name = "box_tangent_sine";
    return f;
}

namespace {

// Cutoff q(u) = amp (1 - u/R^2)^3 on u < R^2, with derivative q'(u).
struct Cutoff {
    double amp, R2;
    double q(double u) const {
        if (u >= R2) return 0.0;
        const double w = 1.0 - u / R2;
        return amp * w * w * w;
    }
    double dq(double u) const {
        if (u >= R2) return 0.0;
        const double w = 1.0 - u / R2;
        return -3.0 * amp * w * w / R2;
    }
};

} // namespace

VariationField VariationField::radial_bump(const Vec2& center, double radius, double amp) {
    VariationField f;
    const Cutoff c{amp, radius * radius};
    f.eval = [=](const Vec2& x) {
        const Vec2 r = x - center;
        return Vec2(c.q(r.squaredNorm()) * r);
    };
    f.grad = [=](const Vec2& x) {
        const Vec2 r = x - center;
        const double u = r.squaredNorm();
        Mat2 g = c.q(u) * Mat2::Identity();
        g += 2.0 * c.dq(u) * (r * r.transpose());
        return g;
    };
    f.name = "radial_bump";
    return f;
}

VariationField VariationField::swirl(const Vec2& center, double radius, double amp) {
    VariationField f;
    const Cutoff c{amp, radius * radius};
    f.eval = [=](const Vec2& x) {
        const Vec2 r = x - center;
        return Vec2(c.q(r.squaredNorm()) * rot90_ccw(r));
    };
    f.grad = [=](const Vec2& x) {
        const Vec2 r = x - center;
        const double u = r.squaredNorm();
        Mat2 rot;
        rot << 0, -1, 1, 0;
        Mat2 g = c.q(u) * rot;
        g += 2.0 * c.dq(u) * (rot90_ccw(r) * r.transpose());
        return g;
    };
    f.name = "swirl";
    return f;
}

VariationField VariationField::periodic_sine(double ax, double ay) {
    VariationField f;
    const double k = 2.0 * M_PI;
    f.eval = [=](const Vec2& y) {
        return Vec2(ax * std::sin(k * y[0]) * std::cos(k * y[1]),
                    ay * std::cos(k * y[0]) * std::sin(k * y[1]));
    };
    f.grad = [=](const Vec2& y) {
        const double s0 = std::sin(k * y[0]), c0 = std::cos(k * y[0]);
        const double s1 = std::sin(k * y[1]), c1 = std::cos(k * y[1]);
        Mat2 g;
        g << ax * k * c0 * c1, -ax * k * s0 * s1, //
            -ay * k * s0 * s1, ay * k * c0 * c1;
        return g;
    };
    f.periodic = true;
    f.name = "periodic_sine";
    return f;
}

AdmissibilityReport check_admissible(const VariationField& f, const MacroMesh& mesh,
                                     int samples_per_edge) {
    AdmissibilityReport rep;
    std::vector<char> dirichlet_node(mesh.num_nodes(), 0), neumann_node(mesh.num_nodes(), 0);
    for (const auto& e : mesh.boundary_edges()) {
        for (int k = 0; k <= samples_per_edge; ++k) {
            const double t = double(k) / samples_per_edge;
            const Vec2 x = (1 - t) * mesh.node_coord(e.n0) + t * mesh.node_coord(e.n1);
            rep.boundary_flux = std::max(rep.boundary_flux, std::abs(f.eval(x).dot(e.normal)));
            if (e.tag == EdgeTag::Dirichlet)
                rep.dirichlet_support = std::max(rep.dirichlet_support, f.eval(x).norm());
        }
        if (e.tag == EdgeTag::Dirichlet) dirichlet_node[e.n0] = dirichlet_node[e.n1] = 1;
        if (e.tag == EdgeTag::Neumann) {
            neumann_node[e.n0] += 1;
            neumann_node[e.n1] += 1;
        }
    }
    // Arc endpoints of the Neumann set: nodes touched by exactly one Neumann
    // edge; the in-boundary outer normal there is the boundary tangent.
    for (const auto& e : mesh.boundary_edges()) {
        if (e.tag != EdgeTag::Neumann) continue;
        const Vec2 t = (mesh.node_coord(e.n1) - mesh.node_coord(e.n0)).normalized();
        for (int n : {e.n0, e.n1})
            if (neumann_node[n] == 1)
                rep.neumann_corner =
                    std::max(rep.neumann_corner, std::abs(f.eval(mesh.node_coord(n)).dot(t)));
    }
    return rep;
}

AdmissibilityReport check_admissible_cell(const VariationField& f, int samples) {
    AdmissibilityReport rep;
    for (int k = 0; k <= samples; ++k) {
        const double t = double(k) / samples;
        rep.boundary_flux = std::max(rep.boundary_flux, std::abs(f.eval(Vec2(0, t))[0]));
        rep.boundary_flux = std::max(rep.boundary_flux, std::abs(f.eval(Vec2(1, t))[0]));
        rep.boundary_flux = std::max(rep.boundary_flux, std::abs(f.eval(Vec2(t, 0))[1]));
        rep.boundary_flux = std::max(rep.boundary_flux, std::abs(f.eval(Vec2(t, 1))[1]));
        rep.periodic_mismatch = std::max(
            rep.periodic_mismatch, (f.eval(Vec2(0, t)) - f.eval(Vec2(1, t))).norm());
        rep.periodic_mismatch = std::max(
            rep.periodic_mismatch, (f.eval(Vec2(t, 0)) - f.eval(Vec2(t, 1))).norm());
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Flow maps

Vec2 FlowMap::advance(const Vec2& x, double t) const {
    const int substeps = std::max(8, int(std::ceil(64.0 * std::abs(t))));
    const double dt = t / substeps;
    Vec2 p = x;
    for (int k = 0; k < substeps; ++k) {
        const Vec2 k1 = field.eval(p);
        const Vec2 k2 = field.eval(p + 0.5 * dt * k1);
        const Vec2 k3 = field.eval(p + 0.5 * dt * k2);
        const Vec2 k4 = field.eval(p + dt * k3);
        p += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return p;
}

std::vector<Vec2> flow(const std::vector<Vec2>& pts, const FlowMap& map, double t) {
    std::vector<Vec2> out;
    out.reserve(pts.size());
    for (const auto& p : pts) out.push_back(map.advance(p, t));
    return out;
}

double perimeter_first_variation(const InterfacePolyline& poly, const VariationField& f) {
    double total = 0.0;
    for (const auto& s : poly.segments) {
        const double len = (s.b - s.a).norm();
        for (double xi : gauss2()) {
            const Vec2 x = 0.5 * (1 - xi) * s.a + 0.5 * (1 + xi) * s.b;
            const Mat2 g = f.grad(x);
            total += 0.5 * len * (g.trace() - s.normal.dot(g * s.normal));
        }
    }
    return total;
}

// ---------------------------------------------------------------------------
// Sharp configurations

ScalarField SharpConfig::phi_field(double band) const {
    ScalarField out = phi_ls;
    for (int n = 0; n < out.values.size(); ++n) {
        const double l = phi_ls.values[n];
        out.values[n] = band > 0.0 ? clamp01(0.5 - l / (2.0 * band)) : (l < 0.0 ? 1.0 : 0.0);
    }
    return out;
}

PeriodicScalarField SharpConfig::m_field(double band) const {
    PeriodicScalarField out = m_ls;
    for (int n = 0; n < out.values.size(); ++n) {
        const double l = m_ls.values[n];
        out.values[n] = 1.0 + (band > 0.0 ? clamp01(0.5 - l / (2.0 * band)) : (l < 0.0 ? 1.0 : 0.0));
    }
    return out;
}

SharpConfig SharpConfig::transported(const VariationField& Phi, const VariationField& Psi,
                                     double t) const {
    SharpConfig out = *this;
    const FlowMap fphi{Phi}, fpsi{Psi};
    MacroMesh mesh(phi_ls.nx, phi_ls.ny, phi_ls.lx, phi_ls.ly);
    for (int n = 0; n < mesh.num_nodes(); ++n) {
        Vec2 x = fphi.advance(mesh.node_coord(n), -t);
        x[0] = std::min(std::max(x[0], 0.0), phi_ls.lx);
        x[1] = std::min(std::max(x[1], 0.0), phi_ls.ly);
        out.phi_ls.values[n] = phi_ls.interp(x);
    }
    CellMesh cmesh(m_ls.nc);
    for (int n = 0; n < cmesh.num_nodes(); ++n)
        out.m_ls.values[n] = m_ls.interp(fpsi.advance(cmesh.node_coord(n), -t));
    return out;
}

double eval_Js(const MacroMesh& mesh, const SharpConfig& cfg, const DisplacementField& u,
               const LoadCase& loads, const VolumeCaps& caps, const DoubleWell& dw, double band) {
    const ScalarField phi = cfg.phi_field(band);
    const PeriodicScalarField m = cfg.m_field(band);
    if (integrate(phi) > caps.V + 1e-10 * mesh.area() || integrate(m) > caps.W + 1e-10)
        return std::numeric_limits<double>::infinity();
    const double ch = dw.c_H();
    return compliance_value(mesh, phi, u, loads) +
           ch * (cfg.phi_interface().perimeter() + cfg.m_interface().perimeter());
}

// ---------------------------------------------------------------------------
// Cell transport derivative

namespace {

inline Vec3 mandel_sym_outer(const Vec2& u, const Vec2& v) {
    return Vec3(u[0] * v[0], u[1] * v[1], (u[0] * v[1] + u[1] * v[0]) / std::sqrt(2.0));
}

inline Vec3 mandel_sym(const Mat2& a) {
    return Vec3(a(0, 0), a(1, 1), (a(0, 1) + a(1, 0)) / std::sqrt(2.0));
}

} // namespace

CorrectorSet solve_z(const CellSystem& sys, const CorrectorSet& corr, const VariationField& Psi,
                     const SolveOptions& opts) {
    const CellMesh mesh(sys.nc);
    const auto strains = corrector_strains(sys, corr);
    CorrectorSet out;
    out.s = sys.s;
    const int ndof = 2 * mesh.num_nodes();

    for (int I = 0; I < 3; ++I) {
        VecX rhs = VecX::Zero(ndof);
        for (int ej = 0; ej < sys.nc; ++ej)
            for (int ei = 0; ei < sys.nc; ++ei) {
                const auto nodes = mesh.elem_nodes(ei, ej);
                const Vec2 y0 = mesh.elem_origin(ei, ej);
                Eigen::Matrix<double, 8, 1> we;
                for (int a = 0; a < 4; ++a) {
                    we[2 * a + 0] = corr.w[I][2 * nodes[a] + 0];
                    we[2 * a + 1] = corr.w[I][2 * nodes[a] + 1];
                }
                for (int q = 0; q < 4; ++q) {
                    const int idx = sys.qindex(ei, ej, q);
                    const Vec2 yq = y0 + sys.quad.qp_offset[q];
                    const Mat2 gPsi = Psi.grad(yq);
                    const double divPsi = gPsi.trace();
                    const Vec3 G = strains[idx].col(I);
                    const Vec3 MG = sys.M_q[idx] * G;
                    // Full corrector gradient at the point.
                    Mat2 gw = Mat2::Zero();
                    for (int a = 0; a < 4; ++a)
                        gw += Vec2(we[2 * a], we[2 * a + 1]) * sys.quad.dN[q][a].transpose();
                    const Vec3 m_gwPsi = mandel_sym(gw * gPsi);
                    for (int a = 0; a < 4; ++a)
                        for (int c = 0; c < 2; ++c) {
                            const Vec2 dNa = sys.quad.dN[q][a];
                            const Vec2 ec = c == 0 ? Vec2(1, 0) : Vec2(0, 1);
                            const Vec3 bv = sys.quad.B[q].col(2 * a + c);
                            const Vec3 m_vPsi = mandel_sym_outer(ec, gPsi.transpose() * dNa);
                            double val = MG.dot(m_vPsi);                       // C(grad v grad Psi):(e(w)+E)
                            val += (sys.M_q[idx] * bv).dot(m_gwPsi);           // C e(v):(grad w grad Psi)
                            val -= divPsi * MG.dot(bv);                        // -C e(v):(e(w)+E) div Psi
                            rhs[2 * nodes[a] + c] += sys.quad.w * val;
                        }
                }
            }
        out.w[I] = solve_spd(sys.K, rhs, Constraint::PeriodicMeanZero, 2, opts);
    }
    return out;
}

Tensor4 c_tilde(const CellSystem& sys, const CorrectorSet& corr, const VariationField& Psi,
                const CorrectorSet& z) {
    const CellMesh mesh(sys.nc);
    const auto strains = corrector_strains(sys, corr);
    Mat3 raw = Mat3::Zero();
    for (int ej = 0; ej < sys.nc; ++ej)
        for (int ei = 0; ei < sys.nc; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            const Vec2 y0 = mesh.elem_origin(ei, ej);
            for (int q = 0; q < 4; ++q) {
                const int idx = sys.qindex(ei, ej, q);
                const Vec2 yq = y0 + sys.quad.qp_offset[q];
                const Mat2 gPsi = Psi.grad(yq);
                const double divPsi = gPsi.trace();
                Mat3 X; // X_I = e(z_I) - sym(grad w_I grad Psi), Mandel columns
                for (int I = 0; I < 3; ++I) {
                    Eigen::Matrix<double, 8, 1> ze, we;
                    for (int a = 0; a < 4; ++a) {
                        ze[2 * a + 0] = z.w[I][2 * nodes[a] + 0];
                        ze[2 * a + 1] = z.w[I][2 * nodes[a] + 1];
                        we[2 * a + 0] = corr.w[I][2 * nodes[a] + 0];
                        we[2 * a + 1] = corr.w[I][2 * nodes[a] + 1];
                    }
                    Mat2 gw = Mat2::Zero();
                    for (int a = 0; a < 4; ++a)
                        gw += Vec2(we[2 * a], we[2 * a + 1]) * sys.quad.dN[q][a].transpose();
                    X.col(I) = Vec3(sys.quad.B[q] * ze) - mandel_sym(gw * gPsi);
                }
                const Mat3& G = strains[idx];
                const Mat3 MG = sys.M_q[idx] * G;
                raw += sys.quad.w *
                       (X.transpose() * MG + MG.transpose() * X + divPsi * G.transpose() * MG);
            }
        }
    const Vec3& f = mandel_scaling();
    const Mat3 sym = 0.5 * (raw + raw.transpose());
    return Tensor4(f.asDiagonal() * sym * f.asDiagonal());
}

Tensor4 sharp_cell_derivative(const PeriodicScalarField& m, const Material& mat,
                              const VariationField& Psi, const SolveOptions& opts) {
    const CellMesh mesh(m.nc);
    CellSystem sys(1.0, m, mesh, mat);
    const CorrectorSet corr = solve_correctors(sys, opts);
    const CorrectorSet z = solve_z(sys, corr, Psi, opts);
    return c_tilde(sys, corr, Psi, z);
}

// ---------------------------------------------------------------------------
// Shape derivative of the sharp cost

ShapeDerivTerms shape_derivative(const MacroMesh& mesh, const SharpConfig& cfg,
                                 const StateSolution& state, const CStarTable& table,
                                 const Tensor4& ctilde_level1, const VariationField& Phi,
                                 const VariationField& Psi, const LoadCase& loads,
                                 const DoubleWell& dw, double band) {
    ShapeDerivTerms terms;
    const ScalarField phi = cfg.phi_field(band);
    const QuadKernel K(mesh.hx(), mesh.hy());
    const Mat3& Ct1 = ctilde_level1.mandel();

    for (int ej = 0; ej < mesh.ny; ++ej)
        for (int ei = 0; ei < mesh.nx; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            const Vec2 x0 = mesh.elem_origin(ei, ej);
            Eigen::Matrix<double, 8, 1> ue;
            for (int a = 0; a < 4; ++a) {
                ue[2 * a + 0] = state.u.values[2 * nodes[a] + 0];
                ue[2 * a + 1] = state.u.values[2 * nodes[a] + 1];
            }
            for (int q = 0; q < 4; ++q) {
                const Vec2 xq = x0 + K.qp_offset[q];
                double phi_q = 0.0;
                Vec2 uq(0, 0);
                Mat2 gu = Mat2::Zero();
                for (int a = 0; a < 4; ++a) {
                    phi_q += K.N[q][a] * phi.values[nodes[a]];
                    uq += K.N[q][a] * Vec2(ue[2 * a], ue[2 * a + 1]);
                    gu += Vec2(ue[2 * a], ue[2 * a + 1]) * K.dN[q][a].transpose();
                }
                const Vec3 strain = K.B[q] * ue;
                const Mat3 Ms = table.value(clamp01(phi_q));
                const Vec3 Mstrain = Ms * strain;
                const Mat2 gPhi = Phi.grad(xq);
                const double divPhi = gPhi.trace();

                terms.cell_tensor -= K.w * phi_q * strain.dot(Ct1 * strain);
                terms.convection += 2.0 * K.w * Mstrain.dot(mandel_sym(gu * gPhi));
                terms.volume_div -= K.w * strain.dot(Mstrain) * divPhi;

                const Vec2 fq = loads.f.eval(xq);
                const Vec2 dfPhi = loads.f.grad(xq) * Phi.eval(xq);
                terms.body_force += 2.0 * K.w * phi_q * (dfPhi.dot(uq) + fq.dot(uq) * divPhi);
            }
        }

    for (const auto& e : mesh.boundary_edges()) {
        if (e.tag != EdgeTag::Neumann) continue;
        const Vec2 p0 = mesh.node_coord(e.n0), p1 = mesh.node_coord(e.n1);
        for (double xi : gauss2()) {
            const double N0 = 0.5 * (1 - xi), N1 = 0.5 * (1 + xi);
            const Vec2 x = N0 * p0 + N1 * p1;
            const Vec2 uq = N0 * state.u.at(e.n0) + N1 * state.u.at(e.n1);
            const Vec2 gq = loads.g.eval(x);
            const Vec2 dgPhi = loads.g.grad(x) * Phi.eval(x);
            const Mat2 gPhi = Phi.grad(x);
            const double w = 0.5 * e.len;
            terms.traction += 2.0 * w *
                              (dgPhi.dot(uq) +
                               gq.dot(uq) * (gPhi.trace() - e.normal.dot(gPhi * e.normal)));
        }
    }

    const double ch = dw.c_H();
    terms.perimeter_phi = ch * perimeter_first_variation(cfg.phi_interface(), Phi);
    terms.perimeter_m = ch * perimeter_first_variation(cfg.m_interface(), Psi);
    return terms;
}

namespace {

double volume_divergence_integral(const MacroMesh& mesh, const ScalarField& phi,
                                  const VariationField& Phi) {
    const QuadKernel K(mesh.hx(), mesh.hy());
    double total = 0.0;
    for (int ej = 0; ej < mesh.ny; ++ej)
        for (int ei = 0; ei < mesh.nx; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            const Vec2 x0 = mesh.elem_origin(ei, ej);
            for (int q = 0; q < 4; ++q) {
                double phi_q = 0.0;
                for (int a = 0; a < 4; ++a) phi_q += K.N[q][a] * phi.values[nodes[a]];
                total += K.w * phi_q * Phi.divergence(x0 + K.qp_offset[q]);
            }
        }
    return total;
}

double cell_divergence_integral(const PeriodicScalarField& m, const VariationField& Psi) {
    const CellMesh mesh(m.nc);
    const QuadKernel K(mesh.h(), mesh.h());
    double total = 0.0;
    for (int ej = 0; ej < mesh.nc; ++ej)
        for (int ei = 0; ei < mesh.nc; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            const Vec2 y0 = mesh.elem_origin(ei, ej);
            for (int q = 0; q < 4; ++q) {
                double m_q = 0.0;
                for (int a = 0; a < 4; ++a) m_q += K.N[q][a] * m.values[nodes[a]];
                total += K.w * m_q * Psi.divergence(y0 + K.qp_offset[q]);
            }
        }
    return total;
}

} // namespace

double smto_residual(const MacroMesh& mesh, const SharpConfig& cfg, const StateSolution& state,
                     const CStarTable& table, const Tensor4& ctilde_level1,
                     const VariationField& Phi, const VariationField& Psi, const LoadCase& loads,
                     const DoubleWell& dw, double lambda, double mu, double band) {
    const ShapeDerivTerms terms =
        shape_derivative(mesh, cfg, state, table, ctilde_level1, Phi, Psi, loads, dw, band);
    return terms.total() + lambda * volume_divergence_integral(mesh, cfg.phi_field(band), Phi) +
           mu * cell_divergence_integral(cfg.m_field(band), Psi);
}

MultiplierFit fit_multipliers(const MacroMesh& mesh, const SharpConfig& cfg,
                              const StateSolution& state, const CStarTable& table,
                              const std::vector<std::pair<VariationField, VariationField>>& basis,
                              const LoadCase& loads, const DoubleWell& dw,
                              const SolveOptions& opts, double band) {
    const int K = int(basis.size());
    Eigen::MatrixXd A(K, 2);
    VecX sd(K);
    const ScalarField phi = cfg.phi_field(band);
    const PeriodicScalarField m = cfg.m_field(band);
    for (int k = 0; k < K; ++k) {
        const auto& [Phi, Psi] = basis[k];
        const Tensor4 ct = sharp_cell_derivative(m, table.material(), Psi, opts);
        sd[k] = shape_derivative(mesh, cfg, state, table, ct, Phi, Psi, loads, dw, band).total();
        A(k, 0) = volume_divergence_integral(mesh, phi, Phi);
        A(k, 1) = cell_divergence_integral(m, Psi);
    }
    const Eigen::Vector2d lm = A.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(-sd);

    MultiplierFit fit;
    fit.lambda = lm[0];
    fit.mu = lm[1];
    for (int k = 0; k < K; ++k) {
        fit.residual_before.push_back(sd[k]);
        fit.residual_after.push_back(sd[k] + A(k, 0) * fit.lambda + A(k, 1) * fit.mu);
    }
    fit.norm_before = sd.norm();
    fit.norm_after = (sd + A * lm).norm();
    return fit;
}

DisplacementField solve_transported_sensitivity(const MacroMesh& mesh, const SharpConfig& cfg,
                                                const StateSolution& state,
                                                const CStarTable& table,
                                                const Tensor4& ctilde_level1,
                                                const VariationField& Phi, const LoadCase& loads,
                                                const SolveOptions& opts, double band) {
    const ScalarField phi = cfg.phi_field(band);
    const QuadKernel K(mesh.hx(), mesh.hy());
    const Mat3& Ct1 = ctilde_level1.mandel();

    MacroSystem sys = assemble_elasticity(mesh, [&](int ei, int ej, int q, const Vec2&) {
        const auto nodes = mesh.elem_nodes(ei, ej);
        double phi_q = 0.0;
        for (int a = 0; a < 4; ++a) phi_q += K.N[q][a] * phi.values[nodes[a]];
        return table.value(clamp01(phi_q));
    });

    VecX rhs = VecX::Zero(2 * mesh.num_nodes());
    for (int ej = 0; ej < mesh.ny; ++ej)
        for (int ei = 0; ei < mesh.nx; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            const Vec2 x0 = mesh.elem_origin(ei, ej);
            Eigen::Matrix<double, 8, 1> ue;
            for (int a = 0; a < 4; ++a) {
                ue[2 * a + 0] = state.u.values[2 * nodes[a] + 0];
                ue[2 * a + 1] = state.u.values[2 * nodes[a] + 1];
            }
            for (int q = 0; q < 4; ++q) {
                const Vec2 xq = x0 + K.qp_offset[q];
                double phi_q = 0.0;
                Mat2 gu = Mat2::Zero();
                for (int a = 0; a < 4; ++a) {
                    phi_q += K.N[q][a] * phi.values[nodes[a]];
                    gu += Vec2(ue[2 * a], ue[2 * a + 1]) * K.dN[q][a].transpose();
                }
                const Vec3 strain = K.B[q] * ue;
                const Mat3 Ms = table.value(clamp01(phi_q));
                const Vec3 Mstrain = Ms * strain;
                const Mat2 gPhi = Phi.grad(xq);
                const double divPhi = gPhi.trace();
                const Vec2 Phix = Phi.eval(xq);
                const Vec2 fq = loads.f.eval(xq);
                const Vec2 dfPhi = loads.f.grad(xq) * Phix;

                const Vec3 conv = Ms * mandel_sym(gu * gPhi);
                const Vec3 ct_strain = phi_q * (Ct1 * strain);
                for (int a = 0; a < 4; ++a)
                    for (int c = 0; c < 2; ++c) {
                        const Vec3 bv = K.B[q].col(2 * a + c);
                        const Vec2 ec = c == 0 ? Vec2(1, 0) : Vec2(0, 1);
                        const Vec3 m_zPhi =
                            mandel_sym_outer(ec, gPhi.transpose() * K.dN[q][a]);
                        double val = -ct_strain.dot(bv);     // -Ct e(u):e(z)
                        val += conv.dot(bv);                 // +C*(grad u grad Phi):e(z)
                        val += Mstrain.dot(m_zPhi);          // +C* e(u):(grad z grad Phi)
                        val -= divPhi * Mstrain.dot(bv);     // -C* e(u):e(z) div Phi
                        val += K.N[q][a] * phi_q * (dfPhi[c] + fq[c] * divPhi);
                        rhs[2 * nodes[a] + c] += K.w * val;
                    }
            }
        }

    for (const auto& e : mesh.boundary_edges()) {
        if (e.tag != EdgeTag::Neumann) continue;
        const Vec2 p0 = mesh.node_coord(e.n0), p1 = mesh.node_coord(e.n1);
        for (double xi : gauss2()) {
            const double N0 = 0.5 * (1 - xi), N1 = 0.5 * (1 + xi);
            const Vec2 x = N0 * p0 + N1 * p1;
            const Vec2 gq = loads.g.eval(x);
            const Vec2 dgPhi = loads.g.grad(x) * Phi.eval(x);
            const Mat2 gPhi = Phi.grad(x);
            const double corr = gPhi.trace() - e.normal.dot(gPhi * e.normal);
            const double w = 0.5 * e.len;
            for (int c = 0; c < 2; ++c) {
                rhs[2 * e.n0 + c] += w * N0 * (dgPhi[c] + gq[c] * corr);
                rhs[2 * e.n1 + c] += w * N1 * (dgPhi[c] + gq[c] * corr);
            }
        }
    }

    DisplacementField out(mesh);
    out.values = sys.expand(solve_spd(sys.A, sys.reduce(rhs), Constraint::None, 2, opts));
    return out;
}

} // namespace mtopt
