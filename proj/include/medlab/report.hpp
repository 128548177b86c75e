#pragma once

#include <optional>
#include <string>
#include <vector>

#include "medlab/accounting.hpp"
#include "medlab/manifest.hpp"

namespace medlab {

struct RunArtifacts {
  RunManifest manifest;
  // final_metrics.json fields
  double tr1 = 0, tr5 = 0, ir1 = 0, ir5 = 0, caption_em = 0, caption_f1 = 0;
  double l_total = 0;
  int64_t steps_run = 0;
};

RunArtifacts load_run(const std::string& run_dir);

// Aligned text table over cost reports (params, FLOPs, latency).
std::string render_cost_table(const std::vector<CostReport>& reports);
std::string cost_report_json(const CostReport& r);

// Plain-text summary for one run, or a student/teacher comparison with
// parameter/FLOP ratios and metric-retention percentages (student/teacher,
// one decimal). Without a teacher the comparison columns are omitted.
std::string render_summary(const RunArtifacts& run,
                           const std::optional<RunArtifacts>& teacher);

}  // namespace medlab
