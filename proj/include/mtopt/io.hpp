#pragma once

#include <json.hpp>

#include "mtopt/optimize.hpp"

namespace mtopt {

inline constexpr const char* kVersion = "0.1.0";

// Deterministic numeric formatting: full keeps the exact double on re-read,
// sig is the 9-significant-digit form used in VTK files.
std::string format_full(double v);
std::string format_sig(double v);

// RFC-4180 CSV with a header row.
void export_csv(const std::string& path, const std::vector<std::string>& header,
                const std::vector<std::vector<std::string>>& rows);

// Legacy ASCII STRUCTURED_POINTS files, row-major point data.
void export_vtk_scalar(const std::string& path, const std::string& name, const ScalarField& f);
void export_vtk_vector(const std::string& path, const std::string& name,
                       const DisplacementField& u);

// Flat configuration with a fixed documented key set; unknown keys are
// rejected.  Environment variables MTOPT_<KEY>=value override file values.
struct RunConfig {
    nlohmann::json values;

    static RunConfig load(const std::string& path);
    static RunConfig from_json(nlohmann::json j);
    void apply_env_overrides();

    double num(const std::string& key) const;
    int integer(const std::string& key) const;
    bool flag(const std::string& key) const;
    std::string str(const std::string& key) const;
    std::vector<double> num_list(const std::string& key) const;

    // Typed builders with validation.
    MacroMesh make_mesh() const;
    CellMesh make_cell() const;
    Material make_material() const;
    LoadCase make_loads() const;
    VolumeCaps make_caps() const;
    PeriodicScalarField make_microstructure() const;
    OptimConfig make_optim(const MacroMesh& mesh) const;
    SolveOptions make_solver() const;
};

// Reduced objective with full re-homogenization at m (table rebuilt).
double reduced_objective(const MacroMesh& mesh, const ScalarField& phi,
                         const PeriodicScalarField& m, const LoadCase& loads, const Material& mat,
                         const VolumeCaps& caps, const RegWeights& w, int n_levels,
                         const SolveOptions& opts = {});

// Subcommand dispatch.  Writes artifacts and a manifest under out_dir, even on
// failure.  Exit codes: 0 success, 2 config error, 3 solver failure,
// 4 non-convergence.
int run(const std::string& subcommand, const std::string& config_path, std::string out_dir,
        int threads_override = 0, long seed_override = -1);

} // namespace mtopt
