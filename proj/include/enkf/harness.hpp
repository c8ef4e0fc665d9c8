#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "enkf/diagnostics.hpp"
#include "enkf/io.hpp"

namespace enkf {

EnkfConfig make_enkf_config(const ExperimentConfig& c);

/// Stream, filter parameters and reference covariance for a turbulence experiment.
FilterSetup make_filter_setup(const ExperimentConfig& c);

/// Subcommands: simulate, verify-dim, rmt-experiment, stability, accuracy.
/// Returns 0 on success, 2 on configuration errors, 1 on runtime errors.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace enkf
