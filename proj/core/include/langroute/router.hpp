#pragma once

#include <string>

#include "langroute/awareness.hpp"
#include "langroute/model.hpp"

namespace langroute {

// Specific-awareness fraction for one (layer, pair): sum of the pair's
// specific-neuron scores over the total of specific + general. A neuron's
// pair score is the mean of its two language columns. Both sums zero gives 0.
double compute_car(const NeuronPartition& partition, const std::string& a, const std::string& b,
                   int layer);

struct RouterOptions {
  // Swap which branch receives the car-scaled input (the general branch gets
  // 1-car instead). Excluded from acceptance; kept for the ablation study.
  bool swap_branches = false;
};

// Assemble the per-layer routing for one pair from its detected layers in the
// partition manifest. LayerRouting.car is the input scale of the general branch.
RoutingPlan build_routing_plan(const ModelConfig& cfg, const NeuronPartition& partition,
                               const std::string& a, const std::string& b,
                               const RouterOptions& opts = {});

// Same plan over an explicit layer list, for pairs the manifest has no
// detection record for.
RoutingPlan build_routing_plan(const ModelConfig& cfg, const NeuronPartition& partition,
                               const std::string& a, const std::string& b,
                               const std::vector<int>& layers, const RouterOptions& opts = {});

// Layers a manifest routes for the given pair: its own detection record when
// present, otherwise the union of every recorded pair's layers.
std::vector<int> serving_layers(const NeuronPartition& partition, const std::string& pair_tag);

// Standalone routed FFN on a row-major [n x d_model] input, mirroring the
// in-model path: general branch on car-scaled input, specific branch on the
// complement, fused additively with the output bias added once.
Tensor routed_ffn(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                  const Tensor& b2, const LayerRouting& routing);

}  // namespace langroute
