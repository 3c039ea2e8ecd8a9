#include <doctest.h>

#include <random>

#include "mtopt/io.hpp"
#include "mtopt/optimize.hpp"
#include "mtopt/patterns.hpp"

using namespace mtopt;

namespace {

const Material& mat() {
    static const Material m = Material::isotropic(1.0, 0.3, 1e-3);
    return m;
}

// Exact breakpoint-scan oracle for the capped box projection.
VecX projection_oracle(const VecX& w, double lo, double hi, double cap, const VecX& wt) {
    auto value = [&](double c) {
        double s = 0;
        for (int i = 0; i < w.size(); ++i) s += wt[i] * std::min(std::max(w[i] - c, lo), hi);
        return s;
    };
    VecX clamped(w.size());
    for (int i = 0; i < w.size(); ++i) clamped[i] = std::min(std::max(w[i], lo), hi);
    double s0 = 0;
    for (int i = 0; i < w.size(); ++i) s0 += wt[i] * clamped[i];
    if (s0 <= cap) return clamped;
    std::vector<double> brk;
    for (int i = 0; i < w.size(); ++i) {
        brk.push_back(w[i] - hi);
        brk.push_back(w[i] - lo);
    }
    std::sort(brk.begin(), brk.end());
    for (size_t k = 0; k + 1 < brk.size(); ++k) {
        const double a = brk[k], b = brk[k + 1];
        if (value(a) >= cap && value(b) <= cap) {
            // linear in between: interpolate exactly
            const double va = value(a), vb = value(b);
            const double c = vb == va ? b : a + (va - cap) * (b - a) / (va - vb);
            VecX out(w.size());
            for (int i = 0; i < w.size(); ++i) out[i] = std::min(std::max(w[i] - c, lo), hi);
            return out;
        }
    }
    return clamped;
}

struct SmallFixture {
    MacroMesh mesh;
    CellMesh cell;
    LoadCase loads;
    OptimConfig cfg;
};

SmallFixture cantilever_small() {
    SmallFixture f{cantilever_mesh(16, 8, 2.0, 1.0), CellMesh(8), {}, {}};
    f.loads.g = VectorField2::constant(Vec2(0.0, -1.0));
    f.cfg.caps = {0.4 * f.mesh.area(), 1.5};
    f.cfg.n_levels = 5;
    f.cfg.max_iters = 25;
    f.cfg.h1_precondition = true;
    f.cfg.h1_tau = 1e-2;
    f.cfg.step0 = 2.0;
    return f;
}

} // namespace

TEST_CASE("projection: feasible input is returned unchanged") {
    MacroMesh mesh(4, 4, 1.0, 1.0);
    const VecX wt = nodal_weights(mesh);
    ScalarField phi(mesh, 0.3);
    const VolumeCaps caps{0.5, 1.5};
    const ScalarField out = project_admissible(phi, caps);
    CHECK((out.values - phi.values).norm() == 0.0);
}

TEST_CASE("projection: uniform overfull field shifts onto the cap") {
    MacroMesh mesh(8, 8, 1.0, 1.0);
    ScalarField phi(mesh, 1.0);
    const ScalarField out = project_admissible(phi, {0.5, 1.5});
    for (int n = 0; n < mesh.num_nodes(); ++n)
        CHECK(out.values[n] == doctest::Approx(0.5).epsilon(1e-10));
    CHECK(integrate(out) <= 0.5 + 1e-12);
}

TEST_CASE("projection matches the breakpoint oracle on random fields") {
    MacroMesh mesh(10, 10, 1.0, 1.0);
    const VecX wt = nodal_weights(mesh);
    std::mt19937_64 rng(71);
    std::normal_distribution<double> d(0.4, 0.6);
    for (int trial = 0; trial < 10; ++trial) {
        VecX w(mesh.num_nodes());
        for (int i = 0; i < w.size(); ++i) w[i] = d(rng);
        const double cap = 0.35;
        const VecX mine = project_admissible(w, 0.0, 1.0, cap, wt, mesh.area());
        const VecX oracle = projection_oracle(w, 0.0, 1.0, cap, wt);
        CHECK((mine - oracle).lpNorm<Eigen::Infinity>() <= 1e-9);
        CHECK(wt.dot(mine) <= cap + 1e-12);
    }
}

TEST_CASE("projection rejects an infeasible cap") {
    MacroMesh mesh(4, 4, 1.0, 1.0);
    VecX w = VecX::Ones(mesh.num_nodes());
    CHECK_THROWS_AS(project_admissible(w, 0.5, 1.0, 0.2, nodal_weights(mesh), mesh.area()),
                    ConfigError);
}

TEST_CASE("step: zero step or zero gradient leaves the fields unchanged") {
    MacroMesh mesh(6, 4, 1.0, 1.0);
    CellMesh cell(4);
    const ScalarField phi = sine_phi(mesh, 0.4, 0.1);
    const PeriodicScalarField m = constant_m(cell, 1.3);
    const VolumeCaps caps{0.9 * mesh.area(), 1.9};
    VecX gp = VecX::Ones(mesh.num_nodes()), gm = VecX::Ones(cell.num_nodes());
    auto [p1, m1] = step(phi, m, gp, gm, 0.0, caps);
    CHECK((p1.values - phi.values).norm() == 0.0);
    CHECK((m1.values - m.values).norm() == 0.0);
    auto [p2, m2] = step(phi, m, VecX::Zero(gp.size()), VecX::Zero(gm.size()), 0.7, caps);
    CHECK((p2.values - phi.values).norm() == 0.0);
    CHECK((m2.values - m.values).norm() == 0.0);
}

TEST_CASE("interior descent step decreases the objective to first order") {
    SmallFixture f = cantilever_small();
    const SolveOptions opts{1e-12, 200000};
    // strictly interior iterate
    const ScalarField phi = constant_phi(f.mesh, 0.35);
    const PeriodicScalarField m = constant_m(f.cell, 1.3);
    const VolumeCaps caps{0.9 * f.mesh.area(), 1.9};
    const auto table = CStarTable::build(m, f.cell, mat(), f.cfg.n_levels, opts);
    const StateSolution st = solve_state(f.mesh, phi, table, f.loads, opts);
    const GradientPair g = assemble_gradient(f.mesh, phi, m, st, table, f.loads, {}, opts);
    const double G0 = eval_J(f.mesh, phi, m, st.u, f.loads, caps);

    const double g2 = (g.r_phi + g.reg_phi).dot(g.total_phi.values) +
                      (g.r_m + g.reg_m).dot(g.total_m.values);
    std::vector<double> errs;
    for (double t : {1e-2, 5e-3}) {
        auto [p, mm] = step(phi, m, g.total_phi.values, g.total_m.values, t, caps);
        const double G1 =
            reduced_objective(f.mesh, p, mm, f.loads, mat(), caps, {}, f.cfg.n_levels, opts);
        errs.push_back(std::abs(G1 - G0 + t * g2));
    }
    CHECK(errs[1] <= 0.35 * errs[0]); // quadratic remainder
}

TEST_CASE("constants with zero loads are immediately stationary") {
    SmallFixture f = cantilever_small();
    f.loads = {};
    f.cfg.tol_stationarity = 1e-12;
    const OptimResult res = optimize(f.mesh, constant_phi(f.mesh, 0.35),
                                     constant_m(f.cell, 1.4), f.loads, mat(), f.cfg);
    CHECK(res.converged);
    CHECK(res.history.size() == 1);
    CHECK(res.history[0].stationarity <= 1e-12);
}

TEST_CASE("cantilever run: monotone objective, feasible iterates, decreasing measure") {
    SmallFixture f = cantilever_small();
    const OptimResult res = optimize(f.mesh, constant_phi(f.mesh, 0.4),
                                     constant_m(f.cell, 1.5), f.loads, mat(), f.cfg);
    REQUIRE(res.history.size() >= 20);
    CHECK(!res.line_search_failed);
    for (size_t k = 1; k < res.history.size(); ++k)
        CHECK(res.history[k].objective <= res.history[k - 1].objective + 1e-14);
    for (const auto& row : res.history) {
        CHECK(row.vol_phi <= f.cfg.caps.V + 1e-10 * f.mesh.area());
        CHECK(row.vol_m <= f.cfg.caps.W + 1e-10);
    }
    CHECK(res.phi.values.minCoeff() >= -1e-14);
    CHECK(res.phi.values.maxCoeff() <= 1.0 + 1e-14);
    CHECK(res.m.values.minCoeff() >= 1.0 - 1e-14);
    CHECK(res.m.values.maxCoeff() <= 2.0 + 1e-14);
    CHECK(res.history.back().stationarity < 0.2 * res.history.front().stationarity);
}

TEST_CASE("microstructure-only run stiffens up to the cap") {
    SmallFixture f = cantilever_small();
    f.cfg.freeze_phi = true;
    f.cfg.caps.V = f.mesh.area(); // phi = 1 everywhere, held fixed
    f.cfg.max_iters = 30;
    const OptimResult res = optimize(f.mesh, constant_phi(f.mesh, 1.0),
                                     constant_m(f.cell, 1.2), f.loads, mat(), f.cfg);
    CHECK((res.phi.values.array() - 1.0).abs().maxCoeff() <= 1e-12);
    CHECK(res.history.back().compliance < res.history.front().compliance);
    // the mean of m climbs to the cap and the cap is active at the end
    CHECK(res.history.back().vol_m == doctest::Approx(f.cfg.caps.W).epsilon(1e-8));
    // multiplier sign: the unconstrained descent still pushes the volume up
    const auto table = CStarTable::build(res.m, f.cell, mat(), f.cfg.n_levels, f.cfg.solver);
    const GradientPair g =
        assemble_gradient(f.mesh, res.phi, res.m, res.state, table, f.loads, {}, f.cfg.solver);
    CHECK(nodal_weights(f.cell).dot(VecX(-g.total_m.values)) > 0.0);
}

TEST_CASE("identical runs produce bitwise-identical histories") {
    SmallFixture f = cantilever_small();
    f.cfg.max_iters = 8;
    const OptimResult a = optimize(f.mesh, constant_phi(f.mesh, 0.4),
                                   constant_m(f.cell, 1.5), f.loads, mat(), f.cfg);
    const OptimResult b = optimize(f.mesh, constant_phi(f.mesh, 0.4),
                                   constant_m(f.cell, 1.5), f.loads, mat(), f.cfg);
    REQUIRE(a.history.size() == b.history.size());
    for (size_t k = 0; k < a.history.size(); ++k) {
        CHECK(a.history[k].objective == b.history[k].objective);
        CHECK(a.history[k].stationarity == b.history[k].stationarity);
        CHECK(a.history[k].step == b.history[k].step);
    }
    CHECK((a.phi.values - b.phi.values).norm() == 0.0);
    CHECK((a.m.values - b.m.values).norm() == 0.0);
}

TEST_CASE("hopeless line search returns the best iterate with a flag") {
    SmallFixture f = cantilever_small();
    f.cfg.step0 = 1e14;
    f.cfg.max_shrinks = 0;
    f.cfg.max_iters = 5;
    const OptimResult res = optimize(f.mesh, constant_phi(f.mesh, 0.4),
                                     constant_m(f.cell, 1.5), f.loads, mat(), f.cfg);
    CHECK(res.line_search_failed);
    CHECK(!res.history.empty());
    CHECK(!res.history.back().accepted);
}
