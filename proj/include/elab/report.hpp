#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace elab {

/// One measured cell of the evaluation matrix.
struct EvalRecord {
    std::string concept_token;
    std::string method;  // base | esd | uce | sa | fmn | ac | np | sld | ti-full | ti-excluded ...
    std::string stage;   // base | erased | ci | transfer
    double accuracy = 0.0;
    int n_samples = 0;
    std::uint64_t seed = 0;
    std::string sample_grid;  // path to the PNG, empty if not rendered
    std::string skip_reason;  // non-empty when the cell failed and was recorded
};

struct EvalReport {
    std::vector<EvalRecord> records;
    std::string config_echo;  // resolved config JSON text

    const EvalRecord* find(const std::string& concept_token, const std::string& method,
                           const std::string& stage) const;
    double accuracy_or(const std::string& concept_token, const std::string& method, const std::string& stage,
                       double fallback) const;
};

/// One JSON record per line; loads back losslessly.
void save_report(const std::string& path, const EvalReport& report);
EvalReport load_report(const std::string& path);

/// Markdown table in the erased / ci cell format plus a transfer column.
std::string render_markdown(const EvalReport& report);

}  // namespace elab
