#pragma once

#include <string>
#include <vector>

#include "langroute/model.hpp"

namespace langroute {

// Sidecar metadata carried in the checkpoint header line. The manifest is the
// partition JSON used during finetuning; evaluation rebuilds routing from it
// for every trained pair. Both fields may be empty for a base model.
struct CheckpointMeta {
  std::vector<std::string> trained_pairs;
  std::string manifest_json;
};

// Layout: one line of JSON (format tag, model config, parameter names, shapes
// and byte offsets, metadata), a newline, then each parameter's raw
// little-endian doubles at its stated offset, in header order.
void save_checkpoint(const std::string& path, const TransformerModel& model,
                     const CheckpointMeta& meta = {});

struct LoadedCheckpoint {
  TransformerModel model;
  CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace langroute
