#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "enkf/diagnostics.hpp"
#include "enkf/effective_dim.hpp"
#include "enkf/models.hpp"

namespace enkf {

using json = nlohmann::json;

/// Fully resolved experiment description; see docs/config.md for the schema.
struct ExperimentConfig {
  std::string experiment = "simulate";
  std::string builtin;  // "" or "kolmogorov"
  TurbulenceParams model;
  Index K = 40;
  std::optional<Index> p;  // unset means "auto" (verifier's state-dimension count)
  Index dense_eig_max_dim = kDenseEigenMaxDim;
  std::uint64_t T = 100;
  std::uint64_t seed_base = 1;
  std::uint64_t seed_count = 1;
  std::vector<std::uint64_t> seed_list;  // overrides base/count when non-empty
  double init_var = 1.0;
  std::string reference = "auto";  // auto | stationary | riccati
  std::vector<double> shifts{10.0};
  std::vector<double> eps{1.0, 0.3, 0.1};
  std::vector<double> rho_grid;
  ConcentrationOptions rmt;
  std::string output_dir;

  std::vector<std::uint64_t> seeds() const;
  /// Projection rank after resolving "auto".
  Index resolved_p() const;
};

/// Strict parse: unknown keys and wrong types raise ConfigError naming the field.
ExperimentConfig parse_config(const json& j);
ExperimentConfig load_config(const std::string& path);
json to_json(const ExperimentConfig& c);

TurbulenceParams parse_model(const json& j, const std::string& where = "model");
json to_json(const TurbulenceParams& p);

json to_json(const DimReport& r);
json to_json(const ConcentrationResult& r);
json to_json(const StabilityResult& r);
json to_json(const std::vector<AccuracyRow>& rows);
json to_json(const FilterDiagnostics& d);

void write_json(const json& j, const std::string& path);
void write_text(const std::string& text, const std::string& path);

/// Per-mode table: k,gamma_k,sigma_kk,branch1,branch2,r_k,pass
std::string dim_report_csv(const DimReport& r);

}  // namespace enkf
