#pragma once

#include <string>
#include <vector>

#include "elab/report.hpp"

namespace elab {

/// Renders the erased-vs-CI bar chart (one bar pair per method, accuracy in
/// percent drawn above each bar) plus the markdown table. Returns the paths
/// written. Deterministic filenames; rerunning on the same report rewrites
/// the identical file set.
std::vector<std::string> emit_plots(const EvalReport& report, const std::string& outdir);

}  // namespace elab
