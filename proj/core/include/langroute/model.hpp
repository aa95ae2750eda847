#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "langroute/tape.hpp"
#include "langroute/tensor.hpp"

namespace langroute {

struct ModelConfig {
  int n_layers = 8;
  int d_model = 64;
  int d_ff = 256;
  int n_heads = 4;
  int vocab_size = 0;  // set from the tokenizer before use
  int max_seq_len = 128;
  std::uint64_t seed = 0;

  // d_model divisible by n_heads; d_ff >= 16 so a 0.9 split leaves specific neurons
  void validate() const;
};

struct Param {
  std::string name;
  Tensor value;
};

// Token ids and loss mask, row-major [rows x cols]. mask is true exactly on
// target-side tokens, the positions whose prediction contributes to the loss.
struct Batch {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<int> tokens;
  std::vector<std::uint8_t> mask;
  std::string pair;

  int token_at(std::int64_t r, std::int64_t c) const { return tokens[static_cast<std::size_t>(r * cols + c)]; }
  bool mask_at(std::int64_t r, std::int64_t c) const { return mask[static_cast<std::size_t>(r * cols + c)] != 0; }
  std::int64_t loss_positions() const;  // count of mask-true cells
};

// Per-layer routed FFN configuration. Branch scales are per hidden unit:
// 1.0 for members of the branch, 0.0 otherwise. Units in neither branch are
// unactivated and contribute nothing to the layer output.
struct LayerRouting {
  double car = 0.0;
  std::vector<double> general_scale;
  std::vector<double> specific_scale;
};

struct RoutingPlan {
  std::string pair;
  std::map<int, LayerRouting> layers;
};

struct ForwardOptions {
  const RoutingPlan* routing = nullptr;
  // Post-activation column scales per layer, for ablation probes. Applies to the
  // plain FFN path only; a layer cannot be both routed and ablated.
  std::map<int, std::vector<double>> ablation_scale;
};

struct ForwardResult {
  NodeId logits = -1;  // [rows*cols, vocab]
  std::map<int, NodeId> recorded;  // layer -> post-activation FFN hidden [rows*cols, d_ff]
  std::map<std::string, NodeId> param_nodes;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
};

class TransformerModel {
 public:
  TransformerModel() = default;
  explicit TransformerModel(ModelConfig cfg);  // allocates parameters, zero-filled

  // Deterministic initialization from cfg.seed; same config + seed give
  // bit-identical parameters.
  void init_params();

  const ModelConfig& config() const { return cfg_; }
  const std::vector<Param>& params() const { return params_; }
  std::vector<Param>& params() { return params_; }
  Param& param(const std::string& name);
  const Param& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return index_.count(name) != 0; }
  std::int64_t num_scalars() const;

  static std::string layer_param_name(int layer, const std::string& leaf);

 private:
  void add_param(std::string name, std::vector<std::int64_t> shape);

  ModelConfig cfg_;
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
};

// Causal forward pass over the tape. Recorded layers expose the post-activation
// FFN hidden values; recording never changes the computed logits.
ForwardResult forward(const TransformerModel& model, const Batch& batch,
                      const std::set<int>& record_layers, Tape& tape,
                      const ForwardOptions& opts = {});

// Mean cross entropy over mask-true positions, each predicted from its prefix.
NodeId lm_loss_node(Tape& tape, const ForwardResult& fr, const Batch& batch);

double lm_loss(const TransformerModel& model, const Batch& batch, const ForwardOptions& opts = {});

// Coordinates of the parameters owned by the given hidden units: for each
// chosen layer, the selected units' input weights (one W1 column each), their
// b1 entries, and their output weights (one W2 row each).
struct ParamSelection {
  std::map<std::string, std::vector<std::int64_t>> coords;  // param name -> sorted flat indices
  std::int64_t size() const;
};

ParamSelection param_groups(const TransformerModel& model, const std::set<int>& layers,
                            const std::map<int, std::set<int>>& neuron_sets);

}  // namespace langroute
