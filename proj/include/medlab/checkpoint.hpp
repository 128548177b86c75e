#pragma once

#include <map>
#include <string>

#include "medlab/distill.hpp"
#include "medlab/manifest.hpp"
#include "medlab/model.hpp"
#include "medlab/optim.hpp"

namespace medlab {

// Single-file checkpoint: magic, JSON header (manifest + tensor index with
// name/shape/offset/bytes/crc32), then flat little-endian f32 payloads.
// Bit-exact load/save round trips; version or integrity problems raise
// explicit errors rather than migrating silently.
struct Checkpoint {
  RunManifest manifest;
  std::map<std::string, Tensor> tensors;  // f32
  int64_t optim_step = 0;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Collects model (+ optional projections and optimizer moments) into f32
// tensors under their hierarchical names.
Checkpoint snapshot_state(const MEDModel& m, const DistillProjections* proj, const AdamW* opt,
                          const RunManifest& manifest);

// Writes checkpoint tensors back into an already-built model; every model
// tensor must be present with the exact shape.
void restore_model(MEDModel& m, const Checkpoint& ck);
void restore_projections(DistillProjections& proj, const Checkpoint& ck);
void restore_optimizer(AdamW& opt, const Checkpoint& ck);

// Loads only the tensors under `prefix` (e.g. "vision.") into the model,
// used by proxy initialization. Missing tensors under other prefixes are fine.
void restore_model_subset(MEDModel& m, const Checkpoint& ck, const std::string& prefix);

uint32_t crc32(const void* data, size_t len);

}  // namespace medlab
