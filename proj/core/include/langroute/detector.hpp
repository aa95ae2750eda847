#pragma once

#include <map>
#include <string>
#include <vector>

#include "langroute/model.hpp"

namespace langroute {

// Per-layer mean FFN hidden activation, one column per forward pass.
struct ActivationTrace {
  int n_layers = 0;
  int passes = 0;
  std::vector<double> a;  // a[layer * passes + pass]
  std::string pair;

  double at(int layer, int pass) const { return a[static_cast<std::size_t>(layer * passes + pass)]; }
  double layer_mean(int layer) const;
};

struct LayerRelevance {
  std::string pair;
  int k = 0;
  std::vector<double> deltas;  // boundary b: |mean(layer b) - mean(layer b+1)|
  std::vector<int> selected;   // ascending layer ids
};

struct TraceOptions {
  bool absolute_mean = false;  // default: signed mean of raw activations
};

// One pass = one batch; pass n reads data[n mod |data|]. The mean runs over
// hidden units and loss-masked token positions.
ActivationTrace trace_activations(const TransformerModel& model, const std::vector<Batch>& data,
                                  int passes, const TraceOptions& opts = {});

std::vector<double> activation_deltas(const ActivationTrace& trace);

// Layers named by the top-k boundary deltas. A boundary's relevance goes to the
// upper layer (the one whose response changed); ties prefer the lower boundary.
std::vector<int> select_layers(const std::vector<double>& deltas, int k);

LayerRelevance detect_layers(const TransformerModel& model, const std::vector<Batch>& data,
                             int passes, int k, const TraceOptions& opts = {});

// Selection file shared by the scoring stage; holds one entry per analyzed pair.
struct LayerSelectionFile {
  std::map<std::string, LayerRelevance> pairs;
  std::vector<int> all_selected() const;  // sorted union across pairs
};

std::string layer_selection_to_json(const LayerSelectionFile& sel);
LayerSelectionFile layer_selection_from_json(const std::string& json_text);

void write_layer_activations_csv(const std::string& path, const std::vector<ActivationTrace>& traces);
void write_layer_deltas_csv(const std::string& path, const std::vector<LayerRelevance>& relevances);

}  // namespace langroute
