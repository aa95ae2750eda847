#include "langroute/router.hpp"

#include <algorithm>

#include "langroute/errors.hpp"
#include "langroute/tape.hpp"

namespace langroute {

double compute_car(const NeuronPartition& partition, const std::string& a, const std::string& b,
                   int layer) {
  auto it = partition.layers.find(layer);
  if (it == partition.layers.end()) {
    throw ContractError("compute_car: layer " + std::to_string(layer) + " not partitioned");
  }
  const LayerPartition& lp = it->second;
  auto pa = lp.phi.find(a);
  auto pb = lp.phi.find(b);
  if (pa == lp.phi.end() || pb == lp.phi.end()) {
    throw DataError("compute_car: pair languages not scored for layer " + std::to_string(layer));
  }
  auto pair_phi = [&](int neuron) {
    const double va = pa->second[static_cast<std::size_t>(neuron)];
    const double vb = pb->second[static_cast<std::size_t>(neuron)];
    if (va < 0.0 || vb < 0.0) throw DataError("compute_car: negative awareness score");
    return 0.5 * (va + vb);
  };

  double spec_sum = 0.0;
  for (const std::string& code : {a, b}) {
    auto sit = lp.specific.find(code);
    if (sit == lp.specific.end()) continue;
    for (int i : sit->second) spec_sum += pair_phi(i);
  }
  double gen_sum = 0.0;
  for (int i : lp.general) gen_sum += pair_phi(i);

  const double total = spec_sum + gen_sum;
  if (total == 0.0) return 0.0;
  return spec_sum / total;
}

RoutingPlan build_routing_plan(const ModelConfig& cfg, const NeuronPartition& partition,
                               const std::string& a, const std::string& b,
                               const RouterOptions& opts) {
  const std::string pair = a + "-" + b;
  auto it = partition.pair_layers.find(pair);
  if (it == partition.pair_layers.end()) {
    throw DataError("build_routing_plan: no detected layers recorded for pair " + pair);
  }
  return build_routing_plan(cfg, partition, a, b, it->second, opts);
}

RoutingPlan build_routing_plan(const ModelConfig& cfg, const NeuronPartition& partition,
                               const std::string& a, const std::string& b,
                               const std::vector<int>& layers, const RouterOptions& opts) {
  const std::string pair = a + "-" + b;
  auto specs = pair_neurons(partition, a, b);

  RoutingPlan plan;
  plan.pair = pair;
  for (int layer : layers) {
    auto lpit = partition.layers.find(layer);
    if (lpit == partition.layers.end()) {
      throw DataError("build_routing_plan: layer " + std::to_string(layer) + " missing from manifest");
    }
    const LayerPartition& lp = lpit->second;
    LayerRouting r;
    r.general_scale.assign(static_cast<std::size_t>(cfg.d_ff), 0.0);
    r.specific_scale.assign(static_cast<std::size_t>(cfg.d_ff), 0.0);
    for (int i : lp.general) {
      if (i < 0 || i >= cfg.d_ff) throw ContractError("routing: neuron id out of range");
      r.general_scale[static_cast<std::size_t>(i)] = 1.0;
    }
    for (int i : specs.at(layer)) {
      if (i < 0 || i >= cfg.d_ff) throw ContractError("routing: neuron id out of range");
      r.specific_scale[static_cast<std::size_t>(i)] = 1.0;
    }
    const double car = compute_car(partition, a, b, layer);
    r.car = opts.swap_branches ? 1.0 - car : car;
    plan.layers[layer] = std::move(r);
  }
  return plan;
}

std::vector<int> serving_layers(const NeuronPartition& partition, const std::string& pair_tag) {
  auto it = partition.pair_layers.find(pair_tag);
  if (it != partition.pair_layers.end()) return it->second;
  std::vector<int> all;
  for (const auto& [pair, layers] : partition.pair_layers) {
    all.insert(all.end(), layers.begin(), layers.end());
  }
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  if (all.empty()) throw DataError("serving_layers: manifest records no detected layers");
  return all;
}

Tensor routed_ffn(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                  const Tensor& b2, const LayerRouting& routing) {
  bool any = false;
  for (double s : routing.general_scale) any = any || s != 0.0;
  for (double s : routing.specific_scale) any = any || s != 0.0;
  if (!any) throw ContractError("routed_ffn: no active units in either branch");

  Tape t;
  NodeId xg = t.mul_scalar(t.leaf(x), routing.car);
  NodeId xs = t.mul_scalar(t.leaf(x), 1.0 - routing.car);
  NodeId w1n = t.leaf(w1), b1n = t.leaf(b1), w2n = t.leaf(w2);
  NodeId hg = t.scale_columns(t.relu(t.add_bias(t.matmul(xg, w1n), b1n)), routing.general_scale);
  NodeId hs = t.scale_columns(t.relu(t.add_bias(t.matmul(xs, w1n), b1n)), routing.specific_scale);
  NodeId out = t.add_bias(t.add(t.matmul(hg, w2n), t.matmul(hs, w2n)), t.leaf(b2));
  return t.value(out);
}

}  // namespace langroute
