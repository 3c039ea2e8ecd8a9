#include "mtopt/cell.hpp"

#include <atomic>
#include <thread>

namespace mtopt {

CellSystem::CellSystem(double s_, const PeriodicScalarField& m, const CellMesh& mesh,
                       const Material& mat_)
    : s(s_), nc(mesh.nc), mat(mat_), quad(mesh.h(), mesh.h()) {
    if (m.nc != nc) throw ContractViolation("CellSystem: field/mesh resolution mismatch");
    if (!(s >= 0.0 && s <= 1.0)) throw ContractViolation("CellSystem: level outside [0,1]");
    const double mmin = m.values.minCoeff(), mmax = m.values.maxCoeff();
    if (mmin < 1.0 - 1e-12 || mmax > 2.0 + 1e-12)
        throw ContractViolation("CellSystem: microstructure values outside [1,2]");

    m_q.resize(size_t(mesh.num_elems()) * 4);
    M_q.resize(size_t(mesh.num_elems()) * 4);
    for (int ej = 0; ej < nc; ++ej)
        for (int ei = 0; ei < nc; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            for (int q = 0; q < 4; ++q) {
                double mv = 0.0;
                for (int a = 0; a < 4; ++a) mv += quad.N[q][a] * m.values[nodes[a]];
                const int idx = qindex(ei, ej, q);
                m_q[idx] = mv;
                M_q[idx] = mat.mix(s, mv);
            }
        }
    K = assemble_elasticity_cell(mesh, [&](int ei, int ej, int q, const Vec2&) {
        return M_q[qindex(ei, ej, q)];
    });
}

namespace {

inline void scatter(VecX& f, const std::array<int, 4>& nodes,
                    const Eigen::Matrix<double, 8, 1>& fe) {
    for (int a = 0; a < 4; ++a) {
        f[2 * nodes[a] + 0] += fe[2 * a + 0];
        f[2 * nodes[a] + 1] += fe[2 * a + 1];
    }
}

template <class F>
void for_each_qp(int nc, F&& fn) {
    const CellMesh mesh(nc);
    for (int ej = 0; ej < nc; ++ej)
        for (int ei = 0; ei < nc; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            for (int q = 0; q < 4; ++q) fn(q, nodes, 4 * (ej * nc + ei) + q);
        }
}

// Element displacement vector of field w on the given nodes.
inline Eigen::Matrix<double, 8, 1> gather(const VecX& w, const std::array<int, 4>& nodes) {
    Eigen::Matrix<double, 8, 1> ue;
    for (int a = 0; a < 4; ++a) {
        ue[2 * a + 0] = w[2 * nodes[a] + 0];
        ue[2 * a + 1] = w[2 * nodes[a] + 1];
    }
    return ue;
}

// psi*(m C1 - C2) + s*mu*C1 at a quadrature point, in Mandel form.
inline Mat3 variation_coeff(const Material& mat, double s, double m_q, double psi, double mu_q) {
    Mat3 c = psi * (m_q * mat.C1.mandel() - mat.C2.mandel());
    if (mu_q != 0.0) c += s * mu_q * mat.C1.mandel();
    return c;
}

} // namespace

CorrectorSet solve_correctors(const CellSystem& sys, const SolveOptions& opts) {
    CorrectorSet out;
    out.s = sys.s;
    const int ndof = 2 * sys.nc * sys.nc;
    for (int I = 0; I < 3; ++I) {
        VecX f = VecX::Zero(ndof);
        for_each_qp(sys.nc, [&](int q, const auto& nodes, int idx) {
            const Eigen::Matrix<double, 8, 1> fe =
                -sys.quad.w * sys.quad.B[q].transpose() * (sys.M_q[idx] * unit_strain_mandel()[I]);
            scatter(f, nodes, fe);
        });
        out.w[I] = solve_spd(sys.K, f, Constraint::PeriodicMeanZero, 2, opts);
    }

    // Uniform corrector energy bound: ||e(w)+E||_{L2}^2 <= (beta/alpha)|Y|
    // over the admissible coefficient range.
    double alpha = std::numeric_limits<double>::max(), beta = 0.0;
    for (const auto& M : sys.M_q) {
        Eigen::SelfAdjointEigenSolver<Mat3> es(M);
        alpha = std::min(alpha, es.eigenvalues().minCoeff());
        beta = std::max(beta, es.eigenvalues().maxCoeff());
    }
    const auto strains = corrector_strains(sys, out);
    for (int I = 0; I < 3; ++I) {
        double energy = 0.0;
        for (const auto& G : strains) energy += sys.quad.w * G.col(I).squaredNorm();
        if (energy > (beta / alpha) * (1.0 + 1e-8))
            throw ContractViolation("solve_correctors: corrector energy bound violated");
    }
    return out;
}

CorrectorSet solve_correctors(double s, const PeriodicScalarField& m, const CellMesh& mesh,
                              const Material& mat, const SolveOptions& opts) {
    return solve_correctors(CellSystem(s, m, mesh, mat), opts);
}

std::vector<Mat3> corrector_strains(const CellSystem& sys, const CorrectorSet& corr) {
    std::vector<Mat3> out(sys.M_q.size());
    for_each_qp(sys.nc, [&](int q, const auto& nodes, int idx) {
        Mat3 G;
        for (int I = 0; I < 3; ++I)
            G.col(I) = sys.quad.B[q] * gather(corr.w[I], nodes) + unit_strain_mandel()[I];
        out[idx] = G;
    });
    return out;
}

HomogenizedResult homogenized_tensor_full(const CellSystem& sys, const CorrectorSet& corr) {
    if (corr.s != sys.s)
        throw ContractViolation("homogenized_tensor: correctors solved at a different level");
    const auto strains = corrector_strains(sys, corr);
    Mat3 energy = Mat3::Zero(), flux = Mat3::Zero();
    for (size_t idx = 0; idx < strains.size(); ++idx) {
        const Mat3& G = strains[idx];
        const Mat3 MG = sys.M_q[idx] * G;
        energy += sys.quad.w * G.transpose() * MG;
        for (int J = 0; J < 3; ++J)
            for (int I = 0; I < 3; ++I)
                flux(I, J) += sys.quad.w * MG.col(I).dot(unit_strain_mandel()[J]);
    }
    if ((energy - energy.transpose()).norm() > 1e-12 * (1.0 + energy.norm()))
        throw ContractViolation("homogenized_tensor: result lost major symmetry");

    HomogenizedResult res;
    res.raw_energy = energy;
    res.raw_flux = flux;
    const Vec3& f = mandel_scaling();
    const Mat3 sym = 0.5 * (energy + energy.transpose());
    res.tensor = Tensor4(f.asDiagonal() * sym * f.asDiagonal());
    return res;
}

Tensor4 homogenized_tensor(double s, const PeriodicScalarField& m, const CellMesh& mesh,
                           const Material& mat, const CorrectorSet& corr) {
    CellSystem sys(s, m, mesh, mat);
    return homogenized_tensor_full(sys, corr).tensor;
}

Tensor4 d_cstar(const CellSystem& sys, const CorrectorSet& corr, double psi_val,
                const PeriodicScalarField* mu) {
    const auto strains = corrector_strains(sys, corr);
    const CellMesh mesh(sys.nc);
    Mat3 raw = Mat3::Zero();
    for_each_qp(sys.nc, [&](int q, const auto& nodes, int idx) {
        double mu_q = 0.0;
        if (mu)
            for (int a = 0; a < 4; ++a) mu_q += sys.quad.N[q][a] * mu->values[nodes[a]];
        const Mat3 D = variation_coeff(sys.mat, sys.s, sys.m_q[idx], psi_val, mu_q);
        const Mat3& G = strains[idx];
        raw += sys.quad.w * G.transpose() * (D * G);
    });
    const Vec3& f = mandel_scaling();
    const Mat3 sym = 0.5 * (raw + raw.transpose());
    return Tensor4(f.asDiagonal() * sym * f.asDiagonal());
}

CorrectorSet solve_linearized_corrector(const CellSystem& sys, const CorrectorSet& corr,
                                        double psi_val, const PeriodicScalarField* mu,
                                        const SolveOptions& opts) {
    const auto strains = corrector_strains(sys, corr);
    CorrectorSet out;
    out.s = sys.s;
    const int ndof = 2 * sys.nc * sys.nc;
    for (int I = 0; I < 3; ++I) {
        VecX f = VecX::Zero(ndof);
        for_each_qp(sys.nc, [&](int q, const auto& nodes, int idx) {
            double mu_q = 0.0;
            if (mu)
                for (int a = 0; a < 4; ++a) mu_q += sys.quad.N[q][a] * mu->values[nodes[a]];
            const Mat3 D = variation_coeff(sys.mat, sys.s, sys.m_q[idx], psi_val, mu_q);
            const Eigen::Matrix<double, 8, 1> fe =
                -sys.quad.w * sys.quad.B[q].transpose() * (D * strains[idx].col(I));
            scatter(f, nodes, fe);
        });
        out.w[I] = solve_spd(sys.K, f, Constraint::PeriodicMeanZero, 2, opts);
    }
    return out;
}

// ---------------------------------------------------------------------------
// CStarTable

namespace {

// Unique entries of a symmetric 3x3 matrix.
constexpr int kEntryRow[6] = {0, 1, 2, 0, 0, 1};
constexpr int kEntryCol[6] = {0, 1, 2, 1, 2, 2};

struct Hermite {
    // Cubic Hermite basis on [0,1].
    static void basis(double t, double h[4]) {
        const double t2 = t * t, t3 = t2 * t;
        h[0] = 2 * t3 - 3 * t2 + 1;
        h[1] = -2 * t3 + 3 * t2;
        h[2] = t3 - 2 * t2 + t;
        h[3] = t3 - t2;
    }
    static void basis_deriv(double t, double h[4]) {
        const double t2 = t * t;
        h[0] = 6 * t2 - 6 * t;
        h[1] = -6 * t2 + 6 * t;
        h[2] = 3 * t2 - 4 * t + 1;
        h[3] = 3 * t2 - 2 * t;
    }
};

} // namespace

CStarTable CStarTable::build(const PeriodicScalarField& m, const CellMesh& mesh,
                             const Material& mat, int n_levels, const SolveOptions& opts,
                             int threads) {
    if (n_levels < 2) throw ConfigError("CStarTable: need at least 2 levels");
    CStarTable t;
    t.m_ = m;
    t.mat_ = mat;
    t.nc_ = mesh.nc;
    t.opts_ = opts;
    t.levels_.resize(n_levels);

    auto solve_level = [&](int k) {
        const double s = double(k) / (n_levels - 1);
        CellSystem sys(s, m, mesh, mat);
        Level lvl;
        lvl.s = s;
        lvl.correctors = solve_correctors(sys, opts);
        lvl.cstar = homogenized_tensor_full(sys, lvl.correctors).tensor;
        lvl.cstar_slope = d_cstar(sys, lvl.correctors, 1.0, nullptr);
        lvl.strains = corrector_strains(sys, lvl.correctors);
        t.levels_[k] = std::move(lvl);
    };

    threads = std::max(1, threads);
    if (threads == 1) {
        for (int k = 0; k < n_levels; ++k) solve_level(k);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        for (int w = 0; w < threads; ++w)
            pool.emplace_back([&] {
                for (int k = next.fetch_add(1); k < n_levels; k = next.fetch_add(1))
                    solve_level(k);
            });
        for (auto& th : pool) th.join();
    }

    // Hermite data with a Fritsch-Carlson style safeguard.  The computed
    // slopes are kept whenever they satisfy the monotone-interval bound so the
    // interpolant derivative stays the exact tabulated derivative.
    const double h = 1.0 / (n_levels - 1);
    double tensor_scale = 0.0;
    for (const auto& lvl : t.levels_)
        tensor_scale = std::max({tensor_scale, lvl.cstar.norm(), lvl.cstar_slope.norm()});
    for (int e = 0; e < 6; ++e) {
        VecX y(n_levels), d(n_levels);
        for (int k = 0; k < n_levels; ++k) {
            y[k] = t.levels_[k].cstar.mandel()(kEntryRow[e], kEntryCol[e]);
            d[k] = t.levels_[k].cstar_slope.mandel()(kEntryRow[e], kEntryCol[e]);
        }
        const double flat = 1e-12 * (tensor_scale + 1e-300);
        for (int k = 0; k < n_levels; ++k) {
            double lim = std::numeric_limits<double>::max();
            bool monotone = true;
            bool active = false;
            if (k > 0) {
                const double dl = (y[k] - y[k - 1]) / h;
                if (std::abs(dl) > flat || std::abs(d[k]) > flat) {
                    monotone &= dl * d[k] >= 0.0;
                    lim = std::min(lim, 3.0 * std::abs(dl));
                    active = true;
                }
            }
            if (k + 1 < n_levels) {
                const double dr = (y[k + 1] - y[k]) / h;
                if (std::abs(dr) > flat || std::abs(d[k]) > flat) {
                    monotone &= dr * d[k] >= 0.0;
                    lim = std::min(lim, 3.0 * std::abs(dr));
                    active = true;
                }
            }
            if (active && (!monotone || std::abs(d[k]) > lim)) {
                // Only shrink; never flip the tabulated sign.
                const double clamped = std::copysign(std::min(std::abs(d[k]), lim), d[k]);
                if (clamped != d[k]) {
                    d[k] = clamped;
                    ++t.clamps_;
                }
            }
        }
        t.vals_[e] = y;
        t.slopes_[e] = d;
    }
    return t;
}

Mat3 CStarTable::value(double s) const {
    if (exact_mode) return exact_value(s);
    const int n = num_levels();
    const double h = 1.0 / (n - 1);
    int k = std::min(std::max(int(std::floor(s / h)), 0), n - 2);
    const double tloc = (s - k * h) / h;
    double hb[4];
    Hermite::basis(tloc, hb);
    Mat3 out;
    for (int e = 0; e < 6; ++e) {
        const double v = hb[0] * vals_[e][k] + hb[1] * vals_[e][k + 1] +
                         h * (hb[2] * slopes_[e][k] + hb[3] * slopes_[e][k + 1]);
        out(kEntryRow[e], kEntryCol[e]) = v;
        out(kEntryCol[e], kEntryRow[e]) = v;
    }
    return out;
}

Mat3 CStarTable::slope(double s) const {
    const int n = num_levels();
    const double h = 1.0 / (n - 1);
    int k = std::min(std::max(int(std::floor(s / h)), 0), n - 2);
    const double tloc = (s - k * h) / h;
    double hb[4];
    Hermite::basis_deriv(tloc, hb);
    Mat3 out;
    for (int e = 0; e < 6; ++e) {
        const double v = (hb[0] * vals_[e][k] + hb[1] * vals_[e][k + 1]) / h + hb[2] * slopes_[e][k] +
                         hb[3] * slopes_[e][k + 1];
        out(kEntryRow[e], kEntryCol[e]) = v;
        out(kEntryCol[e], kEntryRow[e]) = v;
    }
    return out;
}

int CStarTable::nearest_level(double s) const {
    const int n = num_levels();
    return std::min(std::max(int(std::lround(s * (n - 1))), 0), n - 1);
}

Mat3 CStarTable::mu_pair(int k, const PeriodicScalarField& mu) const {
    const Level& lvl = levels_.at(k);
    const CellMesh mesh(nc_);
    const QuadKernel quad(mesh.h(), mesh.h());
    const Mat3& M1 = mat_.C1.mandel();
    Mat3 raw = Mat3::Zero();
    for (int ej = 0; ej < nc_; ++ej)
        for (int ei = 0; ei < nc_; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            for (int q = 0; q < 4; ++q) {
                double mu_q = 0.0;
                for (int a = 0; a < 4; ++a) mu_q += quad.N[q][a] * mu.values[nodes[a]];
                const Mat3& G = lvl.strains[4 * (ej * nc_ + ei) + q];
                raw += (quad.w * mu_q) * (G.transpose() * (M1 * G));
            }
        }
    return 0.5 * (raw + raw.transpose());
}

Mat3 CStarTable::exact_value(double s) const {
    for (const auto& [key, m] : exact_cache_)
        if (key == s) return m;
    const CellMesh mesh(nc_);
    CellSystem sys(s, m_, mesh, mat_);
    const auto corr = solve_correctors(sys, opts_);
    const Mat3 v = homogenized_tensor_full(sys, corr).tensor.mandel();
    exact_cache_.emplace_back(s, v);
    return v;
}

} // namespace mtopt
