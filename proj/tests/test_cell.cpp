#include <doctest.h>

#include <random>

#include "mtopt/cell.hpp"
#include "mtopt/patterns.hpp"

using namespace mtopt;

namespace {

const Material& mat() {
    static const Material m = Material::isotropic(1.0, 0.3, 1e-3);
    return m;
}

// Dense saddle-point oracle for the periodic zero-mean corrector system.
VecX dense_mean_zero_solve(const SpMat& K, const VecX& f) {
    const int n = int(K.rows());
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n + 2, n + 2);
    A.topLeftCorner(n, n) = Eigen::MatrixXd(K);
    for (int node = 0; node < n / 2; ++node)
        for (int c = 0; c < 2; ++c) {
            A(2 * node + c, n + c) = 1.0;
            A(n + c, 2 * node + c) = 1.0;
        }
    VecX rhs = VecX::Zero(n + 2);
    rhs.head(n) = f;
    const VecX sol = A.fullPivLu().solve(rhs);
    return sol.head(n);
}

double h1_norm_cell(const CellMesh& mesh, const VecX& w) {
    const QuadKernel K(mesh.h(), mesh.h());
    double total = 0.0;
    for (int ej = 0; ej < mesh.nc; ++ej)
        for (int ei = 0; ei < mesh.nc; ++ei) {
            const auto nodes = mesh.elem_nodes(ei, ej);
            for (int q = 0; q < 4; ++q) {
                Vec2 val(0, 0);
                Mat2 grad = Mat2::Zero();
                for (int a = 0; a < 4; ++a) {
                    const Vec2 wa(w[2 * nodes[a]], w[2 * nodes[a] + 1]);
                    val += K.N[q][a] * wa;
                    grad += wa * K.dN[q][a].transpose();
                }
                total += K.w * (val.squaredNorm() + grad.squaredNorm());
            }
        }
    return std::sqrt(total);
}

PeriodicScalarField random_m(const CellMesh& cell, std::mt19937_64& rng, double lo = 1.05,
                             double hi = 1.95) {
    std::normal_distribution<double> d(0.0, 1.0);
    double a[3][3], b[3][3];
    for (auto& row : a)
        for (auto& v : row) v = d(rng);
    for (auto& row : b)
        for (auto& v : row) v = d(rng);
    PeriodicScalarField m(cell);
    double mn = 1e300, mx = -1e300;
    for (int n = 0; n < cell.num_nodes(); ++n) {
        const Vec2 y = cell.node_coord(n);
        double v = 0;
        for (int k = 0; k < 3; ++k)
            for (int l = 0; l < 3; ++l)
                v += a[k][l] * std::sin(2 * M_PI * (k + 1) * y[0]) *
                         std::sin(2 * M_PI * (l + 1) * y[1]) +
                     b[k][l] * std::cos(2 * M_PI * (k + 1) * y[0]) *
                         std::cos(2 * M_PI * (l + 1) * y[1]);
        m.values[n] = v;
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    for (int n = 0; n < cell.num_nodes(); ++n)
        m.values[n] = lo + (hi - lo) * (m.values[n] - mn) / (mx - mn + 1e-300);
    return m;
}

PeriodicScalarField random_mu(const CellMesh& cell, std::mt19937_64& rng) {
    PeriodicScalarField mu = random_m(cell, rng, -1.0, 1.0);
    return mu;
}

} // namespace

TEST_CASE("constant microstructure has zero correctors") {
    const CellMesh cell(8);
    const auto m = constant_m(cell, 1.4);
    const CorrectorSet corr = solve_correctors(0.6, m, cell, mat());
    for (int I = 0; I < 3; ++I) CHECK(corr.w[I].norm() == doctest::Approx(0.0));

    // s = 0 degenerates to the constant Ersatz coefficient.
    const auto m2 = checkerboard_m(cell);
    const CorrectorSet corr0 = solve_correctors(0.0, m2, cell, mat());
    for (int I = 0; I < 3; ++I) CHECK(corr0.w[I].norm() == doctest::Approx(0.0));
}

TEST_CASE("correctors match the dense periodic oracle") {
    const CellMesh cell(16);
    const auto m = checkerboard_m(cell);
    CellSystem sys(1.0, m, cell, mat());
    const CorrectorSet corr = solve_correctors(sys, {1e-12, 100000});
    for (int I = 0; I < 3; ++I) {
        VecX f = VecX::Zero(2 * cell.num_nodes());
        // weak load of the unit strain
        const QuadKernel K(cell.h(), cell.h());
        for (int ej = 0; ej < cell.nc; ++ej)
            for (int ei = 0; ei < cell.nc; ++ei) {
                const auto nodes = cell.elem_nodes(ei, ej);
                for (int q = 0; q < 4; ++q) {
                    const Eigen::Matrix<double, 8, 1> fe =
                        -K.w * K.B[q].transpose() *
                        (sys.M_q[sys.qindex(ei, ej, q)] * unit_strain_mandel()[I]);
                    for (int a = 0; a < 4; ++a) {
                        f[2 * nodes[a]] += fe[2 * a];
                        f[2 * nodes[a] + 1] += fe[2 * a + 1];
                    }
                }
            }
        const VecX dense = dense_mean_zero_solve(sys.K, f);
        CHECK((corr.w[I] - dense).norm() <= 1e-8 * (1.0 + dense.norm()));
        // zero mean per component
        double m0 = 0, m1 = 0;
        for (int n = 0; n < cell.num_nodes(); ++n) {
            m0 += corr.w[I][2 * n];
            m1 += corr.w[I][2 * n + 1];
        }
        CHECK(std::abs(m0) / cell.num_nodes() <= 1e-12 * (1.0 + corr.w[I].norm()));
        CHECK(std::abs(m1) / cell.num_nodes() <= 1e-12 * (1.0 + corr.w[I].norm()));
    }
}

TEST_CASE("constant data homogenizes to the plain mixture") {
    const CellMesh cell(8);
    const double c = 1.7, s = 0.35;
    const auto m = constant_m(cell, c);
    CellSystem sys(s, m, cell, mat());
    const auto corr = solve_correctors(sys);
    const Tensor4 cstar = homogenized_tensor_full(sys, corr).tensor;
    const Mat3 expected = s * c * mat().C1.mandel() + (1 - s) * mat().C2.mandel();
    CHECK((cstar.mandel() - expected).norm() <= 1e-12 * expected.norm());
}

TEST_CASE("energy and flux forms of the homogenized tensor agree") {
    const CellMesh cell(16);
    std::mt19937_64 rng(17);
    for (int inst = 0; inst < 3; ++inst) {
        const auto m = random_m(cell, rng);
        const double s = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        CellSystem sys(s, m, cell, mat());
        const auto corr = solve_correctors(sys);
        const auto full = homogenized_tensor_full(sys, corr);
        CHECK((full.raw_energy - full.raw_flux).norm() <= 1e-8 * (1.0 + full.raw_energy.norm()));
        // Voigt upper bound: below the plain average in quadratic form
        Mat3 avg = Mat3::Zero();
        for (const auto& M : sys.M_q) avg += sys.quad.w * M;
        Eigen::SelfAdjointEigenSolver<Mat3> es(avg - full.tensor.mandel());
        CHECK(es.eigenvalues().minCoeff() >= -1e-9 * avg.norm());
        // spectral bounds within the constituent range
        double al = 1e300, be = 0;
        for (const auto& M : sys.M_q) {
            Eigen::SelfAdjointEigenSolver<Mat3> e2(M);
            al = std::min(al, e2.eigenvalues().minCoeff());
            be = std::max(be, e2.eigenvalues().maxCoeff());
        }
        const auto [a, b] = spectral_bounds(full.tensor);
        CHECK(a >= al - 1e-9 * be);
        CHECK(b <= be + 1e-9 * be);
    }
}

TEST_CASE("laminate sits between harmonic and arithmetic mixtures") {
    const CellMesh coarse(16);
    auto m16 = laminate_m(coarse);
    CellSystem sys(1.0, m16, coarse, mat());
    const auto corr = solve_correctors(sys);
    const Mat3 cstar = homogenized_tensor_full(sys, corr).tensor.mandel();

    // Refined solve interpolating the same coefficient field.
    const CellMesh fine(64);
    PeriodicScalarField m64(fine);
    for (int n = 0; n < fine.num_nodes(); ++n) m64.values[n] = m16.interp(fine.node_coord(n));
    CellSystem sysf(1.0, m64, fine, mat());
    const Mat3 cfine = homogenized_tensor_full(sysf, solve_correctors(sysf)).tensor.mandel();
    CHECK((cstar - cfine).norm() <= 0.01 * cfine.norm());

    // Mixture bounds computed from the interpolated field.
    const QuadKernel K(coarse.h(), coarse.h());
    double mean = 0, hmean = 0;
    for (int ej = 0; ej < coarse.nc; ++ej)
        for (int ei = 0; ei < coarse.nc; ++ei) {
            const auto nodes = coarse.elem_nodes(ei, ej);
            for (int q = 0; q < 4; ++q) {
                double mv = 0;
                for (int a = 0; a < 4; ++a) mv += K.N[q][a] * m16.values[nodes[a]];
                mean += K.w * mv;
                hmean += K.w / mv;
            }
        }
    const Mat3 arith = mean * mat().C1.mandel();
    const Mat3 harm = (1.0 / hmean) * mat().C1.mandel();
    CHECK(Eigen::SelfAdjointEigenSolver<Mat3>(arith - cstar).eigenvalues().minCoeff() >=
          -1e-8 * arith.norm());
    CHECK(Eigen::SelfAdjointEigenSolver<Mat3>(cstar - harm).eigenvalues().minCoeff() >=
          -2e-3 * harm.norm());
}

TEST_CASE("derivative tensor: trivial cases") {
    const CellMesh cell(8);
    const auto m = constant_m(cell, 1.6);
    CellSystem sys(0.5, m, cell, mat());
    const auto corr = solve_correctors(sys);
    const Tensor4 zero = d_cstar(sys, corr, 0.0, nullptr);
    CHECK(zero.norm() == doctest::Approx(0.0));
    const Tensor4 slope = d_cstar(sys, corr, 1.0, nullptr);
    const Mat3 expected = 1.6 * mat().C1.mandel() - mat().C2.mandel();
    CHECK((slope.mandel() - expected).norm() <= 1e-12 * expected.norm());
}

TEST_CASE("derivative tensor is linear in (psi, mu)") {
    const CellMesh cell(8);
    std::mt19937_64 rng(23);
    const auto m = random_m(cell, rng);
    const auto mu = random_mu(cell, rng);
    CellSystem sys(0.4, m, cell, mat());
    const auto corr = solve_correctors(sys);
    const Tensor4 a = d_cstar(sys, corr, 0.7, &mu);
    const Tensor4 b = d_cstar(sys, corr, 0.7, nullptr);
    PeriodicScalarField mu2 = mu;
    mu2.values *= 2.0;
    const Tensor4 c = d_cstar(sys, corr, 1.4, &mu2);
    CHECK((c.mandel() - 2.0 * a.mandel()).norm() <= 1e-12 * (1.0 + a.norm()));
    PeriodicScalarField muz(cell, 0.0);
    const Tensor4 only_mu = d_cstar(sys, corr, 0.0, &mu);
    CHECK((a.mandel() - b.mandel() - only_mu.mandel()).norm() <= 1e-12 * (1.0 + a.norm()));
}

TEST_CASE("derivative tensor passes the halving finite-difference test") {
    const CellMesh cell(12);
    std::mt19937_64 rng(29);
    const auto m = random_m(cell, rng, 1.2, 1.8);
    const auto mu = random_mu(cell, rng);
    const double s = 0.45, psi = 0.8;
    const SolveOptions opts{1e-12, 100000};

    CellSystem sys(s, m, cell, mat());
    const auto corr = solve_correctors(sys, opts);
    const Tensor4 dd = d_cstar(sys, corr, psi, &mu);

    auto cstar_at = [&](double t) {
        PeriodicScalarField mt = m;
        mt.values += t * mu.values;
        CellSystem st(s + t * psi, mt, cell, mat());
        return homogenized_tensor_full(st, solve_correctors(st, opts)).tensor.mandel();
    };
    const Mat3 c0 = cstar_at(0.0);
    std::vector<double> errs;
    for (double t : {1e-2, 5e-3, 2.5e-3}) {
        const Mat3 diff = cstar_at(t) - c0 - t * dd.mandel();
        errs.push_back(diff.norm());
    }
    CHECK(errs[0] / errs[1] == doctest::Approx(4.0).epsilon(0.12));
    CHECK(errs[1] / errs[2] == doctest::Approx(4.0).epsilon(0.12));
}

TEST_CASE("linearized correctors: trivial and FD cases") {
    const CellMesh cell(12);
    std::mt19937_64 rng(31);
    const auto m = random_m(cell, rng, 1.2, 1.8);
    CellSystem sys(0.5, m, cell, mat());
    const auto corr = solve_correctors(sys);

    PeriodicScalarField muz(cell, 0.0);
    const auto wz = solve_linearized_corrector(sys, corr, 0.0, &muz);
    for (int I = 0; I < 3; ++I) CHECK(wz.w[I].norm() == doctest::Approx(0.0));

    // constant data: the source has constant coefficient, so the derivative vanishes
    const auto mc = constant_m(cell, 1.5);
    CellSystem sysc(0.5, mc, cell, mat());
    const auto corrc = solve_correctors(sysc);
    PeriodicScalarField muc(cell, 0.3);
    const auto wc = solve_linearized_corrector(sysc, corrc, 0.6, &muc);
    for (int I = 0; I < 3; ++I)
        CHECK(wc.w[I].lpNorm<Eigen::Infinity>() <= 1e-10);

    // first-order convergence of the corrector difference quotient
    const auto mu = random_mu(cell, rng);
    const double psi = 0.5;
    const SolveOptions opts{1e-12, 100000};
    const auto wbar = solve_linearized_corrector(sys, corr, psi, &mu, opts);
    std::vector<double> errs;
    for (double t : {2e-3, 1e-3}) {
        PeriodicScalarField mt = m;
        mt.values += t * mu.values;
        CellSystem st(0.5 + t * psi, mt, cell, mat());
        const auto corrt = solve_correctors(st, opts);
        double worst = 0;
        for (int I = 0; I < 3; ++I) {
            const VecX q = (corrt.w[I] - corr.w[I]) / t - wbar.w[I];
            worst = std::max(worst, h1_norm_cell(cell, q));
        }
        errs.push_back(worst);
    }
    CHECK(errs[1] <= 0.6 * errs[0]); // O(t) decay
}

TEST_CASE("table reproduces samples and affine families exactly") {
    const CellMesh cell(8);
    const auto m = constant_m(cell, 1.3);
    const auto table = CStarTable::build(m, cell, mat(), 5);
    CHECK(table.safeguard_clamps() == 0);
    for (int k = 0; k < table.num_levels(); ++k) {
        const double s = table.level(k).s;
        CHECK((table.value(s) - table.level(k).cstar.mandel()).norm() <= 1e-14);
        CHECK((table.slope(s) - table.level(k).cstar_slope.mandel()).norm() <= 1e-13);
    }
    // constant m: C*(s) affine, the interpolation is exact everywhere
    for (double s : {0.03, 0.21, 0.5, 0.77, 0.99}) {
        const Mat3 expected = s * 1.3 * mat().C1.mandel() + (1 - s) * mat().C2.mandel();
        CHECK((table.value(s) - expected).norm() <= 1e-12 * expected.norm());
    }
}

TEST_CASE("table refinement: interpolation resolved away from the ersatz layer") {
    // The homogenized tensor varies on the contrast scale delta near s = 0;
    // uniform sampling resolves everything past the first couple of levels.
    const CellMesh cell(16);
    const auto m = checkerboard_m(cell);
    const auto t17 = CStarTable::build(m, cell, mat(), 17);
    const auto t33 = CStarTable::build(m, cell, mat(), 33);
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 50; ++k) {
        const double s = u(rng);
        const Mat3 a = t17.value(s), b = t33.value(s);
        if (s >= 0.125)
            CHECK((a - b).norm() <= 1e-4 * b.norm());
        else
            CHECK((a - b).norm() <= 3e-2 * b.norm()); // measured layer envelope
    }
    // At mild contrast the layer flattens out and queries match everywhere.
    const Material soft = Material::isotropic(1.0, 0.3, 0.1);
    const auto s17 = CStarTable::build(m, cell, soft, 17);
    const auto s33 = CStarTable::build(m, cell, soft, 33);
    for (int k = 0; k < 50; ++k) {
        const double s = u(rng);
        CHECK((s17.value(s) - s33.value(s)).norm() <= 1e-3 * s33.value(s).norm());
    }
}

TEST_CASE("monotone quadratic form on the table samples") {
    const CellMesh cell(8);
    const auto m = checkerboard_m(cell); // m C1 - C2 is positive semidefinite
    const auto table = CStarTable::build(m, cell, mat(), 9);
    std::mt19937_64 rng(43);
    std::normal_distribution<double> d(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        const Vec3 e(d(rng), d(rng), d(rng));
        double prev = -1e300;
        for (int k = 0; k < table.num_levels(); ++k) {
            const double q = e.dot(table.level(k).cstar.mandel() * e);
            CHECK(q >= prev - 1e-12 * std::abs(q));
            prev = q;
        }
    }
}

TEST_CASE("exact mode agrees with interpolation at samples") {
    const CellMesh cell(8);
    const auto m = checkerboard_m(cell);
    auto table = CStarTable::build(m, cell, mat(), 5);
    table.exact_mode = true;
    const Mat3 exact_mid = table.value(0.37);
    table.exact_mode = false;
    const Mat3 interp_mid = table.value(0.37);
    CHECK((exact_mid - interp_mid).norm() <= 2e-4 * exact_mid.norm()); // coarse table
    table.exact_mode = true;
    CHECK((table.value(0.5) - table.level(2).cstar.mandel()).norm() <=
          1e-10 * exact_mid.norm());
}

TEST_CASE("corrector data-dependence is Lipschitz with refinement-stable slope") {
    std::mt19937_64 rng(47);
    auto fitted_K = [&](int nc) {
        const CellMesh cell(nc);
        std::mt19937_64 local(101);
        double worst = 0;
        for (int pair = 0; pair < 4; ++pair) {
            const auto ma = random_m(cell, local, 1.2, 1.8);
            const auto mb = random_m(cell, local, 1.2, 1.8);
            std::uniform_real_distribution<double> u(0.2, 0.8);
            const double sa = u(local), sb = u(local);
            const auto wa = solve_correctors(sa, ma, cell, mat());
            const auto wb = solve_correctors(sb, mb, cell, mat());
            PeriodicScalarField dm = ma;
            dm.values -= mb.values;
            double dist = std::abs(sa - sb);
            double l2 = 0;
            const VecX wgt = nodal_weights(cell);
            l2 = std::sqrt(dm.values.cwiseProduct(dm.values).dot(wgt));
            dist += l2;
            for (int I = 0; I < 3; ++I)
                worst = std::max(worst, h1_norm_cell(cell, VecX(wa.w[I] - wb.w[I])) / dist);
        }
        return worst;
    };
    const double k8 = fitted_K(8), k16 = fitted_K(16);
    CHECK(k16 <= 2.0 * k8 + 1e-12);
}
