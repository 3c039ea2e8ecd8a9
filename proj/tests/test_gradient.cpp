#include <doctest.h>

#include <random>

#include "mtopt/gradient.hpp"
#include "mtopt/io.hpp"
#include "mtopt/patterns.hpp"

using namespace mtopt;

namespace {

const Material& mat() {
    static const Material m = Material::isotropic(1.0, 0.3, 1e-3);
    return m;
}

struct Fixture {
    MacroMesh mesh;
    CellMesh cell;
    ScalarField phi;
    PeriodicScalarField m;
    LoadCase loads;
    VolumeCaps caps;
    int n_levels;
};

// phi constant on a table level, smooth m, traction pull.
Fixture level_fixture(int n_levels = 5) {
    MacroMesh mesh(10, 6, 1.0, 0.6);
    mesh.tag_side(Side::Left, EdgeTag::Dirichlet);
    mesh.tag_side(Side::Right, EdgeTag::Neumann);
    CellMesh cell(8);
    const double s0 = 0.5; // exactly on the level grid for odd n_levels
    Fixture f{mesh, cell, constant_phi(mesh, s0), sine_m(cell, 1.5, 0.25), {}, {0.0, 0.0}, n_levels};
    f.loads.g = VectorField2::constant(Vec2(0.6, -0.4));
    f.loads.f = VectorField2::constant(Vec2(0.0, -0.3));
    f.caps = {0.8 * mesh.area(), 1.9};
    return f;
}

ScalarField smooth_direction_phi(const MacroMesh& mesh, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 0.3);
    const double a = d(rng), b = d(rng);
    ScalarField psi(mesh);
    for (int n = 0; n < mesh.num_nodes(); ++n) {
        const Vec2 x = mesh.node_coord(n);
        psi.values[n] = a * std::sin(M_PI * x[0] / mesh.lx) * std::sin(M_PI * x[1] / mesh.ly) +
                        b * std::sin(2 * M_PI * x[0] / mesh.lx) * std::sin(M_PI * x[1] / mesh.ly);
    }
    return psi;
}

PeriodicScalarField smooth_direction_m(const CellMesh& cell, unsigned seed) {
    std::mt19937_64 rng(seed + 1000);
    std::normal_distribution<double> d(0.0, 0.3);
    const double a = d(rng), b = d(rng);
    PeriodicScalarField mu(cell);
    for (int n = 0; n < cell.num_nodes(); ++n) {
        const Vec2 y = cell.node_coord(n);
        mu.values[n] = a * std::sin(2 * M_PI * y[0]) * std::cos(2 * M_PI * y[1]) +
                       b * std::cos(4 * M_PI * y[1]);
    }
    return mu;
}

} // namespace

TEST_CASE("zero loads leave only the regularizer in the directional") {
    Fixture f = level_fixture();
    f.loads = {};
    f.phi = sine_phi(f.mesh, 0.5, 0.2);
    const auto table = CStarTable::build(f.m, f.cell, mat(), f.n_levels);
    const StateSolution st = solve_state(f.mesh, f.phi, table, f.loads);
    const GradientPair g = assemble_gradient(f.mesh, f.phi, f.m, st, table, f.loads);
    CHECK(g.r_phi.norm() == doctest::Approx(0.0));
    CHECK(g.r_m.norm() == doctest::Approx(0.0));

    const ScalarField psi = smooth_direction_phi(f.mesh, 3);
    const VecX mu0 = VecX::Zero(f.cell.num_nodes());
    const double expected = psi.values.dot(scalar_stiffness(f.mesh) * f.phi.values);
    CHECK(g.directional(psi.values, mu0) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("directional is exactly linear in the direction") {
    Fixture f = level_fixture();
    const auto table = CStarTable::build(f.m, f.cell, mat(), f.n_levels);
    const StateSolution st = solve_state(f.mesh, f.phi, table, f.loads);
    const GradientPair g = assemble_gradient(f.mesh, f.phi, f.m, st, table, f.loads);
    const ScalarField p1 = smooth_direction_phi(f.mesh, 7), p2 = smooth_direction_phi(f.mesh, 8);
    const PeriodicScalarField m1 = smooth_direction_m(f.cell, 7),
                              m2 = smooth_direction_m(f.cell, 8);
    const double lhs = g.directional(2.0 * p1.values - 3.0 * p2.values,
                                     2.0 * m1.values - 3.0 * m2.values);
    const double rhs = 2.0 * g.directional(p1.values, m1.values) -
                       3.0 * g.directional(p2.values, m2.values);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-13));
}

TEST_CASE("riesz fields reproduce the weak vectors through the mass inner product") {
    Fixture f = level_fixture();
    const auto table = CStarTable::build(f.m, f.cell, mat(), f.n_levels);
    const StateSolution st = solve_state(f.mesh, f.phi, table, f.loads);
    const GradientPair g = assemble_gradient(f.mesh, f.phi, f.m, st, table, f.loads);
    const ScalarField psi = smooth_direction_phi(f.mesh, 21);
    const double via_field = psi.values.dot(scalar_mass(f.mesh) * g.g_phi.values);
    CHECK(via_field == doctest::Approx(g.r_phi.dot(psi.values)).epsilon(1e-9));
}

TEST_CASE("central differences converge at second order to the directional") {
    Fixture f = level_fixture();
    const RegWeights w{};
    const SolveOptions opts{1e-12, 200000};
    const auto table = CStarTable::build(f.m, f.cell, mat(), f.n_levels, opts);
    const StateSolution st = solve_state(f.mesh, f.phi, table, f.loads, opts);
    const GradientPair g = assemble_gradient(f.mesh, f.phi, f.m, st, table, f.loads, w, opts);

    for (unsigned seed : {1u, 2u, 3u}) {
        const ScalarField psi = smooth_direction_phi(f.mesh, seed);
        const PeriodicScalarField mu = smooth_direction_m(f.cell, seed);
        const double exact = g.directional(psi.values, mu.values);
        std::vector<double> errs;
        for (double t : {1e-2, 5e-3, 2.5e-3}) {
            ScalarField pp = f.phi, pm = f.phi;
            pp.values += t * psi.values;
            pm.values -= t * psi.values;
            PeriodicScalarField mp = f.m, mm = f.m;
            mp.values += t * mu.values;
            mm.values -= t * mu.values;
            const double gp =
                reduced_objective(f.mesh, pp, mp, f.loads, mat(), f.caps, w, f.n_levels, opts);
            const double gm =
                reduced_objective(f.mesh, pm, mm, f.loads, mat(), f.caps, w, f.n_levels, opts);
            errs.push_back(std::abs((gp - gm) / (2 * t) - exact));
        }
        CHECK(errs[0] / errs[1] == doctest::Approx(4.0).epsilon(0.15));
        CHECK(errs[1] / errs[2] == doctest::Approx(4.0).epsilon(0.15));
    }
}

TEST_CASE("constant microstructure direction has a closed-form accumulation") {
    Fixture f = level_fixture();
    f.m = constant_m(f.cell, 1.5);
    const auto table = CStarTable::build(f.m, f.cell, mat(), f.n_levels);
    const StateSolution st = solve_state(f.mesh, f.phi, table, f.loads, {1e-12, 200000});
    const GradientPair g = assemble_gradient(f.mesh, f.phi, f.m, st, table, f.loads);

    // zero correctors: the directional in a constant mu reduces to
    // -mu * int phi C1 e(u):e(u)
    const double mu0 = 0.37;
    const QuadKernel K(f.mesh.hx(), f.mesh.hy());
    double expected = 0.0;
    const Mat3 M1 = mat().C1.mandel();
    for (int ej = 0; ej < f.mesh.ny; ++ej)
        for (int ei = 0; ei < f.mesh.nx; ++ei) {
            const auto nodes = f.mesh.elem_nodes(ei, ej);
            Eigen::Matrix<double, 8, 1> ue;
            for (int a = 0; a < 4; ++a) {
                ue[2 * a] = st.u.values[2 * nodes[a]];
                ue[2 * a + 1] = st.u.values[2 * nodes[a] + 1];
            }
            for (int q = 0; q < 4; ++q) {
                double s = 0;
                for (int a = 0; a < 4; ++a) s += K.N[q][a] * f.phi.values[nodes[a]];
                const Vec3 strain = K.B[q] * ue;
                expected -= K.w * s * strain.dot(M1 * strain) * mu0;
            }
        }
    const VecX muvec = VecX::Constant(f.cell.num_nodes(), mu0);
    CHECK(g.directional(VecX::Zero(f.mesh.num_nodes()), muvec) ==
          doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("level binning agrees with exact per-point evaluation on smooth data") {
    Fixture f = level_fixture(17);
    f.phi = sine_phi(f.mesh, 0.55, 0.25);
    const SolveOptions opts{1e-12, 200000};
    const auto table = CStarTable::build(f.m, f.cell, mat(), 17, opts);
    const StateSolution st = solve_state(f.mesh, f.phi, table, f.loads, opts);
    const GradientPair g = assemble_gradient(f.mesh, f.phi, f.m, st, table, f.loads, {}, opts);

    // direct evaluation: per-point correctors at the exact phi value
    const PeriodicScalarField mu = smooth_direction_m(f.cell, 4);
    const QuadKernel K(f.mesh.hx(), f.mesh.hy());
    double direct = 0.0;
    std::map<long long, Mat3> cache;
    for (int ej = 0; ej < f.mesh.ny; ++ej)
        for (int ei = 0; ei < f.mesh.nx; ++ei) {
            const auto nodes = f.mesh.elem_nodes(ei, ej);
            Eigen::Matrix<double, 8, 1> ue;
            for (int a = 0; a < 4; ++a) {
                ue[2 * a] = st.u.values[2 * nodes[a]];
                ue[2 * a + 1] = st.u.values[2 * nodes[a] + 1];
            }
            for (int q = 0; q < 4; ++q) {
                double s = 0;
                for (int a = 0; a < 4; ++a) s += K.N[q][a] * f.phi.values[nodes[a]];
                s = clamp01(s);
                const long long key = llround(s * 1e12);
                Mat3 cbar;
                if (auto it = cache.find(key); it != cache.end()) {
                    cbar = it->second;
                } else {
                    CellSystem sys(s, f.m, f.cell, mat());
                    const auto corr = solve_correctors(sys, opts);
                    cbar = d_cstar(sys, corr, 0.0, &mu).mandel();
                    cache[key] = cbar;
                }
                const Vec3 strain = K.B[q] * ue;
                direct -= K.w * strain.dot(cbar * strain);
            }
        }
    const double binned = g.r_m.dot(mu.values);
    CHECK(std::abs(binned - direct) <= 5e-2 * std::abs(direct));
}

TEST_CASE("sensitivity solve: trivial and convergent cases") {
    Fixture f = level_fixture();
    const SolveOptions opts{1e-12, 200000};
    const auto table = CStarTable::build(f.m, f.cell, mat(), f.n_levels, opts);
    const StateSolution st = solve_state(f.mesh, f.phi, table, f.loads, opts);

    const ScalarField psi0(f.mesh, 0.0);
    const DisplacementField v0 = solve_sensitivity(f.mesh, f.phi, psi0, nullptr, st, table,
                                                   f.loads, opts);
    CHECK(v0.values.norm() == doctest::Approx(0.0));

    const ScalarField psi = smooth_direction_phi(f.mesh, 5);
    const PeriodicScalarField mu = smooth_direction_m(f.cell, 5);
    const DisplacementField v =
        solve_sensitivity(f.mesh, f.phi, psi, &mu, st, table, f.loads, opts);
    std::vector<double> errs;
    for (double t : {4e-3, 2e-3}) {
        ScalarField pp = f.phi;
        pp.values += t * psi.values;
        PeriodicScalarField mp = f.m;
        mp.values += t * mu.values;
        const auto table_t = CStarTable::build(mp, f.cell, mat(), f.n_levels, opts);
        const StateSolution stt = solve_state(f.mesh, pp, table_t, f.loads, opts);
        errs.push_back((((stt.u.values - st.u.values) / t) - v.values).norm());
    }
    CHECK(errs[1] <= 0.6 * errs[0]);

    // chain-rule path equals the assembled directional
    const GradientPair g = assemble_gradient(f.mesh, f.phi, f.m, st, table, f.loads, {}, opts);
    const double direct = g.directional(psi.values, mu.values);
    double chain = compliance_value(f.mesh, psi, st.u, {f.loads.f, {}});
    chain += assemble_load_vector(f.mesh, f.phi, f.loads).dot(v.values);
    chain += psi.values.dot(scalar_stiffness(f.mesh) * f.phi.values);
    chain += mu.values.dot(scalar_stiffness(f.cell) * f.m.values);
    CHECK(std::abs(chain - direct) <= 1e-6 * std::abs(direct));
}

TEST_CASE("stationarity measure respects the tangent cone") {
    MacroMesh mesh(4, 4, 1.0, 1.0);
    mesh.tag_side(Side::Left, EdgeTag::Dirichlet);
    CellMesh cell(4);
    const VolumeCaps caps{0.9, 1.9};

    GradientPair g;
    g.total_phi = ScalarField(mesh, 0.0);
    g.total_m = PeriodicScalarField(cell, 0.0);
    ScalarField phi = constant_phi(mesh, 0.5);
    PeriodicScalarField m = constant_m(cell, 1.5);
    CHECK(stationarity_measure(mesh, phi, m, g, caps) == doctest::Approx(0.0));

    // interior point: the measure is the weighted norm of the gradient
    g.total_phi.values.setConstant(2.0);
    const double expected = std::sqrt(4.0 * mesh.area());
    CHECK(stationarity_measure(mesh, phi, m, g, caps) ==
          doctest::Approx(expected).epsilon(1e-12));

    // a node pinned at the upper bound with negative gradient contributes
    // nothing (ascent would leave the box)
    phi.values.setConstant(0.5);
    phi.values[7] = 1.0;
    g.total_phi.values.setZero();
    g.total_phi.values[7] = -3.0; // descent direction +3 points out of the box
    CHECK(stationarity_measure(mesh, phi, m, g, caps) == doctest::Approx(0.0));
    // the same gradient at an interior node does contribute
    g.total_phi.values.setZero();
    g.total_phi.values[6] = -3.0;
    CHECK(stationarity_measure(mesh, phi, m, g, caps) > 0.1);
}
