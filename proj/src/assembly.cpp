#include "mtopt/assembly.hpp"

namespace mtopt {

QuadKernel::QuadKernel(double hx, double hy) {
    w = hx * hy / 4.0;
    const double rt2 = std::sqrt(2.0);
    for (int q = 0; q < 4; ++q) {
        const auto [xi, eta] = gauss2x2()[q];
        N[q] = shape_values(xi, eta);
        const auto g = shape_grads(xi, eta);
        qp_offset[q] = Vec2(0.5 * (1 + xi) * hx, 0.5 * (1 + eta) * hy);
        Eigen::Matrix<double, 3, 8> Bq = Eigen::Matrix<double, 3, 8>::Zero();
        for (int a = 0; a < 4; ++a) {
            const double dNdx = g[0][a] * 2.0 / hx;
            const double dNdy = g[1][a] * 2.0 / hy;
            dN[q][a] = Vec2(dNdx, dNdy);
            Bq(0, 2 * a + 0) = dNdx;
            Bq(1, 2 * a + 1) = dNdy;
            Bq(2, 2 * a + 0) = dNdy / rt2;
            Bq(2, 2 * a + 1) = dNdx / rt2;
        }
        B[q] = Bq;
    }
}

namespace {

// Positive definiteness guard for coefficient tensors at quadrature points.
inline void check_coercive(const Mat3& m) {
    Eigen::LLT<Mat3> llt(m);
    if (llt.info() != Eigen::Success)
        throw ConfigError("assemble_elasticity: coefficient tensor is not positive definite");
}

// Element stiffness; symmetrized so the assembled operator is exactly
// symmetric regardless of the multiply order inside Eigen.
inline Eigen::Matrix<double, 8, 8> element_stiffness(const QuadKernel& K, const Mat3 Mq[4]) {
    Eigen::Matrix<double, 8, 8> ke = Eigen::Matrix<double, 8, 8>::Zero();
    for (int q = 0; q < 4; ++q) ke += K.w * K.B[q].transpose() * Mq[q] * K.B[q];
    return 0.5 * (ke + ke.transpose());
}

} // namespace

VecX MacroSystem::reduce(const VecX& full) const {
    VecX r(n_reduced);
    for (int d = 0; d < n_full; ++d)
        if (dof_map[d] >= 0) r[dof_map[d]] = full[d];
    return r;
}

VecX MacroSystem::expand(const VecX& reduced) const {
    VecX f = VecX::Zero(n_full);
    for (int d = 0; d < n_full; ++d)
        if (dof_map[d] >= 0) f[d] = reduced[dof_map[d]];
    return f;
}

MacroSystem assemble_elasticity(const MacroMesh& mesh, const CoeffFn& coeff) {
    MacroSystem sys;
    sys.n_full = 2 * mesh.num_nodes();
    sys.dof_map.assign(sys.n_full, 0);
    for (int n : mesh.dirichlet_nodes()) {
        sys.dof_map[2 * n] = -1;
        sys.dof_map[2 * n + 1] = -1;
    }
    int next = 0;
    for (int d = 0; d < sys.n_full; ++d)
        if (sys.dof_map[d] == 0) sys.dof_map[d] = next++;
    sys.n_reduced = next;

    const QuadKernel K(mesh.hx(), mesh.hy());
    std::vector<Triplet> trip;
    trip.reserve(size_t(mesh.num_elems()) * 64);
    for (int ej = 0; ej < mesh.ny; ++ej)
        for (int ei = 0; ei < mesh.nx; ++ei) {
            const Vec2 x0 = mesh.elem_origin(ei, ej);
            Mat3 Mq[4];
            for (int q = 0; q < 4; ++q) {
                Mq[q] = coeff(ei, ej, q, x0 + K.qp_offset[q]);
                check_coercive(Mq[q]);
            }
            const auto ke = element_stiffness(K, Mq);
            const auto nodes = mesh.elem_nodes(ei, ej);
            for (int a = 0; a < 4; ++a)
                for (int ca = 0; ca < 2; ++ca) {
                    const int ra = sys.dof_map[2 * nodes[a] + ca];
                    if (ra < 0) continue;
                    for (int b = 0; b < 4; ++b)
                        for (int cb = 0; cb < 2; ++cb) {
                            const int rb = sys.dof_map[2 * nodes[b] + cb];
                            if (rb < 0) continue;
                            trip.emplace_back(ra, rb, ke(2 * a + ca, 2 * b + cb));
                        }
                }
        }
    sys.A.resize(sys.n_reduced, sys.n_reduced);
    sys.A.setFromTriplets(trip.begin(), trip.end());
    return sys;
}

SpMat assemble_elasticity_cell(const CellMesh& mesh, const CoeffFn& coeff) {
    const QuadKernel K(mesh.h(), mesh.h());
    const int n = 2 * mesh.num_nodes();
    std::vector<Triplet> trip;
    trip.reserve(size_t(mesh.num_elems()) * 64);
    for (int ej = 0; ej < mesh.nc; ++ej)
        for (int ei = 0; ei < mesh.nc; ++ei) {
            const Vec2 y0 = mesh.elem_origin(ei, ej);
            Mat3 Mq[4];
            for (int q = 0; q < 4; ++q) {
                Mq[q] = coeff(ei, ej, q, y0 + K.qp_offset[q]);
                check_coercive(Mq[q]);
            }
            const auto ke = element_stiffness(K, Mq);
            const auto nodes = mesh.elem_nodes(ei, ej);
            for (int a = 0; a < 4; ++a)
                for (int ca = 0; ca < 2; ++ca)
                    for (int b = 0; b < 4; ++b)
                        for (int cb = 0; cb < 2; ++cb)
                            trip.emplace_back(2 * nodes[a] + ca, 2 * nodes[b] + cb,
                                              ke(2 * a + ca, 2 * b + cb));
        }
    SpMat A(n, n);
    A.setFromTriplets(trip.begin(), trip.end());
    return A;
}

namespace {

inline void project_mean_zero(VecX& v, int ncomp) {
    const int n = int(v.size()) / ncomp;
    for (int c = 0; c < ncomp; ++c) {
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += v[ncomp * i + c];
        mean /= n;
        for (int i = 0; i < n; ++i) v[ncomp * i + c] -= mean;
    }
}

} // namespace

VecX solve_spd(const SpMat& A, const VecX& b, Constraint constraint, int ncomp,
               const SolveOptions& opts, SolveStats* stats, const VecX* x0) {
    const int n = int(A.rows());
    VecX rhs = b;
    if (constraint == Constraint::PeriodicMeanZero) project_mean_zero(rhs, ncomp);

    const double bnorm = rhs.norm();
    if (bnorm == 0.0) {
        if (stats) *stats = {0, 0.0};
        return VecX::Zero(n);
    }

    VecX dinv(n);
    {
        const VecX d = A.diagonal();
        for (int i = 0; i < n; ++i) {
            if (!(d[i] > 0.0)) throw SolverError("solve_spd: nonpositive diagonal entry", 0.0);
            dinv[i] = 1.0 / d[i];
        }
    }

    VecX x = x0 ? *x0 : VecX::Zero(n);
    if (constraint == Constraint::PeriodicMeanZero) project_mean_zero(x, ncomp);
    VecX r = rhs - A * x;
    if (constraint == Constraint::PeriodicMeanZero) project_mean_zero(r, ncomp);
    VecX z = dinv.cwiseProduct(r);
    if (constraint == Constraint::PeriodicMeanZero) project_mean_zero(z, ncomp);
    VecX p = z;
    double rz = r.dot(z);
    VecX Ap(n);

    for (int it = 0; it < opts.max_iters; ++it) {
        if (r.norm() <= opts.tol_rel * bnorm) {
            if (stats) *stats = {it, r.norm() / bnorm};
            return x;
        }
        Ap.noalias() = A * p;
        const double pAp = p.dot(Ap);
        if (!(pAp > 0.0)) throw SolverError("solve_spd: operator is not positive definite", r.norm() / bnorm);
        const double alpha = rz / pAp;
        x += alpha * p;
        r -= alpha * Ap;
        if (constraint == Constraint::PeriodicMeanZero) project_mean_zero(r, ncomp);
        z = dinv.cwiseProduct(r);
        if (constraint == Constraint::PeriodicMeanZero) project_mean_zero(z, ncomp);
        const double rz_new = r.dot(z);
        p = z + (rz_new / rz) * p;
        rz = rz_new;
    }
    throw SolverError("solve_spd: no convergence within max iterations", r.norm() / bnorm);
}

namespace {

template <class Mesh>
double integral_impl(const Mesh& mesh, const VecX& values, int nelx, int nely, double hx,
                     double hy) {
    const QuadKernel K(hx, hy);
    double total = 0.0;
    for (int ej = 0; ej < nely; ++ej)
        for (int ei = 0; ei < nelx; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            for (int q = 0; q < 4; ++q) {
                double v = 0.0;
                for (int a = 0; a < 4; ++a) v += K.N[q][a] * values[nodes[a]];
                total += K.w * v;
            }
        }
    return total;
}

template <class Mesh>
double h1_impl(const Mesh& mesh, const VecX& values, int nelx, int nely, double hx, double hy) {
    const QuadKernel K(hx, hy);
    double total = 0.0;
    for (int ej = 0; ej < nely; ++ej)
        for (int ei = 0; ei < nelx; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            for (int q = 0; q < 4; ++q) {
                Vec2 g(0, 0);
                for (int a = 0; a < 4; ++a) g += values[nodes[a]] * K.dN[q][a];
                total += K.w * g.squaredNorm();
            }
        }
    return total;
}

} // namespace

double integrate(const ScalarField& f) {
    MacroMesh m(f.nx, f.ny, f.lx, f.ly);
    return integral_impl(m, f.values, f.nx, f.ny, m.hx(), m.hy());
}

double integrate(const PeriodicScalarField& f) {
    CellMesh m(f.nc);
    return integral_impl(m, f.values, f.nc, f.nc, m.h(), m.h());
}

double integrate_h1_seminorm(const ScalarField& f) {
    MacroMesh m(f.nx, f.ny, f.lx, f.ly);
    return h1_impl(m, f.values, f.nx, f.ny, m.hx(), m.hy());
}

double integrate_h1_seminorm(const PeriodicScalarField& f) {
    CellMesh m(f.nc);
    return h1_impl(m, f.values, f.nc, f.nc, m.h(), m.h());
}

VecX nodal_weights(const MacroMesh& mesh) {
    VecX w = VecX::Zero(mesh.num_nodes());
    const double cell = mesh.hx() * mesh.hy() / 4.0;
    for (int ej = 0; ej < mesh.ny; ++ej)
        for (int ei = 0; ei < mesh.nx; ++ei)
            for (int n : mesh.elem_nodes(ei, ej)) w[n] += cell;
    return w;
}

VecX nodal_weights(const CellMesh& mesh) {
    return VecX::Constant(mesh.num_nodes(), mesh.h() * mesh.h());
}

namespace {

template <class Mesh>
SpMat scalar_matrix_impl(const Mesh& mesh, int nelx, int nely, double hx, double hy, bool mass,
                         int nnodes) {
    const QuadKernel K(hx, hy);
    Eigen::Matrix4d me = Eigen::Matrix4d::Zero();
    for (int q = 0; q < 4; ++q)
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b)
                me(a, b) += mass ? K.w * K.N[q][a] * K.N[q][b]
                                 : K.w * K.dN[q][a].dot(K.dN[q][b]);
    me = 0.5 * (me + me.transpose()).eval();
    std::vector<Triplet> trip;
    trip.reserve(size_t(nelx) * nely * 16);
    for (int ej = 0; ej < nely; ++ej)
        for (int ei = 0; ei < nelx; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            for (int a = 0; a < 4; ++a)
                for (int b = 0; b < 4; ++b) trip.emplace_back(nodes[a], nodes[b], me(a, b));
        }
    SpMat M(nnodes, nnodes);
    M.setFromTriplets(trip.begin(), trip.end());
    return M;
}

} // namespace

SpMat scalar_mass(const MacroMesh& m) {
    return scalar_matrix_impl(m, m.nx, m.ny, m.hx(), m.hy(), true, m.num_nodes());
}
SpMat scalar_mass(const CellMesh& m) {
    return scalar_matrix_impl(m, m.nc, m.nc, m.h(), m.h(), true, m.num_nodes());
}
SpMat scalar_stiffness(const MacroMesh& m) {
    return scalar_matrix_impl(m, m.nx, m.ny, m.hx(), m.hy(), false, m.num_nodes());
}
SpMat scalar_stiffness(const CellMesh& m) {
    return scalar_matrix_impl(m, m.nc, m.nc, m.h(), m.h(), false, m.num_nodes());
}

} // namespace mtopt
