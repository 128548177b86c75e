#pragma once

#include <optional>
#include <string>
#include <vector>

#include "medlab/checkpoint.hpp"
#include "medlab/manifest.hpp"
#include "medlab/metrics.hpp"

namespace medlab {

struct EvalSnapshot {
  int64_t step = 0;
  double tr1 = 0, tr5 = 0, ir1 = 0, ir5 = 0;
  double caption_em = 0, caption_f1 = 0;
};

struct RunResult {
  RunManifest manifest;
  std::string run_dir;
  std::string checkpoint_path;
  EvalSnapshot final_eval;
  double l_itc = 0, l_itm = 0, l_lm = 0, l_vlp = 0, l_hr = 0, l_at = 0, l_total = 0;
  int64_t steps_run = 0;
  // scalar proxy metrics (classification accuracy / perplexity) when relevant
  double proxy_metric = 0;
};

// Optional early stop on eval targets; negative disables. Reaching all
// enabled targets at an eval point ends the run (deterministically).
struct StopTargets {
  double tr1 = -1;
  double caption_em = -1;
};

// Minimizes the pretraining objective, maintains the momentum encoder, logs
// JSON lines, persists manifest + metrics + checkpoint under run_dir.
// Aborts with DivergenceError if any loss goes non-finite.
RunResult pretrain_teacher(const RunManifest& manifest, const std::string& run_dir,
                           const StopTargets& stop = {});

// Loads and freezes the teacher, trains student + projections on the
// combined objective. Geometry compatibility (vocab, patch grid, sequence
// lengths) is checked before training starts.
RunResult distill_student(const RunManifest& manifest, const std::string& run_dir,
                          const StopTargets& stop = {});

// task == "proxy-vision": shape/color classification on single-object scenes.
// task == "proxy-text": causal next-token modeling on grammar captions.
// The checkpoint it writes is loadable into a matching MED model.
RunResult proxy_pretrain(const RunManifest& manifest, const std::string& run_dir);

// Dispatches on manifest.task.
RunResult run_task(const RunManifest& manifest, const std::string& run_dir,
                   const StopTargets& stop = {});

// ---- ablation grid ----

struct GridAxis {
  std::string key;                  // dotted manifest path, e.g. "model.text.n_fusion_layers"
  std::vector<std::string> values;  // JSON-encoded values
};

struct GridSpec {
  RunManifest base;
  std::vector<uint64_t> seeds;
  std::vector<GridAxis> axes;
};

struct CellOutcome {
  std::string cell_id;
  uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double tr1 = 0, ir1 = 0, caption_em = 0, caption_f1 = 0;
  double l_itc = 0, l_itm = 0, l_lm = 0, l_total = 0;
};

// Runs every cell x seed, never skips silently: failures are recorded with
// the error message and the grid continues. Writes results.csv (fixed column
// order) and summary.csv (per-cell mean +- sd over succeeded seeds).
std::vector<CellOutcome> run_ablation_grid(const GridSpec& spec, const std::string& out_dir);

GridSpec grid_from_json(const std::string& js);
std::string results_csv(const std::vector<CellOutcome>& rows);
std::string summary_csv(const std::vector<CellOutcome>& rows);

// Applies "a.b.c" = json value onto a manifest via its JSON form; unknown
// paths fail closed through the manifest parser.
RunManifest override_manifest(const RunManifest& base, const std::string& key,
                              const std::string& json_value);

}  // namespace medlab
