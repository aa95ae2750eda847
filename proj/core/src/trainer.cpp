#include "langroute/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "langroute/errors.hpp"
#include "langroute/router.hpp"

namespace langroute {

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw ContractError("learning_rate must be positive");
  if (batch_size < 1) throw ContractError("batch_size must be at least 1");
  if (grad_accum_steps < 1) throw ContractError("grad_accum_steps must be at least 1");
  if (epochs < 1) throw ContractError("epochs must be at least 1");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ContractError("moment decay rates must lie in [0, 1)");
  }
  if (weight_decay < 0.0) throw ContractError("weight_decay must be non-negative");
  if (eps <= 0.0) throw ContractError("eps must be positive");
  if (max_steps < 0) throw ContractError("max_steps must be non-negative");
}

bool UpdateMask::at(const std::string& name, std::int64_t i) const {
  auto it = mask.find(name);
  if (it == mask.end()) return false;
  return it->second[static_cast<std::size_t>(i)] != 0;
}

std::int64_t UpdateMask::true_count() const {
  std::int64_t n = 0;
  for (const auto& [name, v] : mask) {
    n += std::count_if(v.begin(), v.end(), [](std::uint8_t b) { return b != 0; });
  }
  return n;
}

UpdateMask full_mask(const TransformerModel& model) {
  UpdateMask um;
  for (const Param& p : model.params()) um.mask[p.name].assign(p.value.data.size(), 1);
  return um;
}

namespace {

std::map<std::string, std::vector<std::int64_t>> general_coords(const TransformerModel& model,
                                                                const NeuronPartition& partition,
                                                                const std::vector<int>& layers) {
  std::set<int> layer_set(layers.begin(), layers.end());
  std::map<int, std::set<int>> sets;
  for (int l : layer_set) {
    const auto& gen = partition.layers.at(l).general;
    if (!gen.empty()) sets[l] = std::set<int>(gen.begin(), gen.end());
  }
  if (sets.empty()) return {};
  return param_groups(model, layer_set, sets).coords;
}

}  // namespace

UpdateMask build_update_mask(const TransformerModel& model, const NeuronPartition& partition,
                             const std::string& pair, const std::vector<int>& layers) {
  for (int l : layers) {
    if (partition.layers.count(l) == 0) {
      throw ContractError("layer " + std::to_string(l) + " is not covered by the partition");
    }
  }
  auto [a, b] = split_pair_tag(pair);
  auto specifics = pair_neurons(partition, a, b);

  std::set<int> layer_set(layers.begin(), layers.end());
  std::map<int, std::set<int>> sets;
  for (int l : layer_set) {
    std::set<int> units(partition.layers.at(l).general.begin(),
                        partition.layers.at(l).general.end());
    auto it = specifics.find(l);
    if (it != specifics.end()) units.insert(it->second.begin(), it->second.end());
    if (!units.empty()) sets[l] = std::move(units);
  }
  if (sets.empty()) throw ContractError("no trainable units for pair " + pair);

  ParamSelection sel = param_groups(model, layer_set, sets);
  UpdateMask um;
  for (const auto& [name, coords] : sel.coords) {
    auto& v = um.mask[name];
    v.assign(model.param(name).value.data.size(), 0);
    for (std::int64_t c : coords) v[static_cast<std::size_t>(c)] = 1;
  }
  return um;
}

void write_train_log_csv(const std::string& path, const std::vector<TrainLogEntry>& log) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write training log: " + path);
  f << "step,pair,loss,lr\n";
  char buf[64];
  for (const TrainLogEntry& row : log) {
    std::snprintf(buf, sizeof(buf), "%.17g", row.loss);
    f << row.step << ',' << row.pair << ',' << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", row.lr);
    f << buf << '\n';
  }
}

void MaskedAdamW::apply(TransformerModel& model, const UpdateMask& mask,
                        const std::map<std::string, Tensor>& grad_sums, std::int64_t accum) {
  if (accum < 1) throw ContractError("optimizer applied without accumulated gradients");
  const double inv = 1.0 / static_cast<double>(accum);
  for (const auto& [name, mvec] : mask.mask) {
    Param& p = model.param(name);
    if (mvec.size() != p.value.data.size()) {
      throw ContractError("update mask size mismatch for " + name);
    }
    const bool decay = p.value.rank() >= 2;
    auto git = grad_sums.find(name);
    const Tensor* g = git == grad_sums.end() ? nullptr : &git->second;
    auto& slots = state_[name];
    for (std::size_t i = 0; i < mvec.size(); ++i) {
      if (!mvec[i]) continue;
      const double gi = g ? g->data[i] * inv : 0.0;
      Slot& s = slots[static_cast<std::int64_t>(i)];
      s.t += 1;
      s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * gi;
      s.v = cfg_.beta2 * s.v + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = s.m / (1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t)));
      const double vhat = s.v / (1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t)));
      double& w = p.value.data[i];
      const double wd = decay ? cfg_.weight_decay * w : 0.0;
      w -= cfg_.learning_rate * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd);
    }
  }
}

void MaskedAdamW::retain(const std::map<std::string, std::vector<std::int64_t>>& keep) {
  std::map<std::string, std::unordered_map<std::int64_t, Slot>> next;
  for (const auto& [name, coords] : keep) {
    auto it = state_.find(name);
    if (it == state_.end()) continue;
    for (std::int64_t c : coords) {
      auto sit = it->second.find(c);
      if (sit != it->second.end()) next[name].emplace(c, sit->second);
    }
  }
  state_ = std::move(next);
}

std::int64_t MaskedAdamW::state_size() const {
  std::int64_t n = 0;
  for (const auto& [name, slots] : state_) n += static_cast<std::int64_t>(slots.size());
  return n;
}

namespace {

struct Stream {
  std::string pair;
  std::vector<Batch> batches;
  std::size_t cursor = 0;
  UpdateMask mask;
  RoutingPlan plan;
  bool use_routing = false;
  std::map<std::string, std::vector<std::int64_t>> general_keep;
};

std::vector<Batch> build_batches(const std::vector<BatchRow>& rows, const std::string& pair,
                                 const TrainConfig& cfg, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(rows.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<Batch> out;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(idx.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<BatchRow> chunk;
      chunk.reserve(stop - start);
      for (std::size_t k = start; k < stop; ++k) chunk.push_back(rows[idx[k]]);
      out.push_back(rows_to_batch(chunk, pair));
    }
  }
  return out;
}

TrainResult run_streams(TransformerModel& model, std::vector<Stream>& streams,
                        const TrainConfig& cfg, bool sequential) {
  TrainResult res;
  MaskedAdamW opt(cfg);
  std::string active_pair;
  std::int64_t step = 0;
  bool stop = false;

  auto exhausted = [](const Stream& s) { return s.cursor >= s.batches.size(); };

  auto run_block = [&](Stream& s) {
    if (exhausted(s) || stop) return;
    if (!active_pair.empty() && active_pair != s.pair) opt.retain(s.general_keep);
    active_pair = s.pair;

    std::map<std::string, Tensor> grad_sums;
    std::int64_t accum = 0;
    while (accum < cfg.grad_accum_steps && !exhausted(s) && !stop) {
      const Batch& batch = s.batches[s.cursor++];
      ++step;
      try {
        Tape tape;
        ForwardOptions opts;
        if (s.use_routing) opts.routing = &s.plan;
        ForwardResult fr = forward(model, batch, {}, tape, opts);
        const NodeId loss_node = lm_loss_node(tape, fr, batch);
        const double loss = tape.value(loss_node).data[0];
        if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
        res.log.push_back({step, s.pair, loss, cfg.learning_rate});
        tape.backward(loss_node);
        for (const auto& [name, mvec] : s.mask.mask) {
          const Tensor& g = tape.grad(fr.param_nodes.at(name));
          auto it = grad_sums.find(name);
          if (it == grad_sums.end()) {
            grad_sums.emplace(name, g);
          } else {
            for (std::size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i];
          }
        }
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (training step " + std::to_string(step) +
                           ", pair " + s.pair + ")");
      }
      ++accum;
      if (cfg.max_steps > 0 && step >= cfg.max_steps) stop = true;
    }
    if (accum > 0) {
      opt.apply(model, s.mask, grad_sums, accum);
      ++res.updates;
    }
  };

  if (sequential) {
    for (Stream& s : streams) {
      while (!exhausted(s) && !stop) run_block(s);
    }
  } else {
    bool progress = true;
    while (progress && !stop) {
      progress = false;
      for (Stream& s : streams) {
        if (stop) break;
        if (!exhausted(s)) {
          run_block(s);
          progress = true;
        }
      }
    }
  }
  res.steps = step;
  return res;
}

Stream make_pair_stream(const TransformerModel& model, const std::string& pair,
                        const std::vector<BatchRow>& rows, const NeuronPartition& partition,
                        const TrainConfig& cfg, std::mt19937_64& rng) {
  auto pl = partition.pair_layers.find(pair);
  if (pl == partition.pair_layers.end()) {
    throw DataError("no detected layers recorded for pair " + pair);
  }
  auto [a, b] = split_pair_tag(pair);
  Stream s;
  s.pair = pair;
  s.mask = build_update_mask(model, partition, pair, pl->second);
  s.plan = build_routing_plan(model.config(), partition, a, b);
  s.use_routing = true;
  s.general_keep = general_coords(model, partition, pl->second);
  s.batches = build_batches(rows, pair, cfg, rng);
  return s;
}

}  // namespace

TrainResult finetune_pair(TransformerModel& model, const std::string& pair,
                          const std::vector<BatchRow>& rows, const NeuronPartition& partition,
                          const TrainConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::vector<Stream> streams;
  streams.push_back(make_pair_stream(model, pair, rows, partition, cfg, rng));
  return run_streams(model, streams, cfg, false);
}

TrainResult finetune_pairs(TransformerModel& model, const std::vector<PairDataset>& datasets,
                           const NeuronPartition& partition, const TrainConfig& cfg,
                           bool sequential) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::vector<Stream> streams;
  streams.reserve(datasets.size());
  for (const PairDataset& d : datasets) {
    streams.push_back(make_pair_stream(model, d.pair, d.rows, partition, cfg, rng));
  }
  return run_streams(model, streams, cfg, sequential);
}

TrainResult full_finetune(TransformerModel& model, const std::vector<BatchRow>& rows,
                          const TrainConfig& cfg, const std::string& pair_label) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  Stream s;
  s.pair = pair_label;
  s.mask = full_mask(model);
  s.use_routing = false;
  s.batches = build_batches(rows, pair_label, cfg, rng);
  std::vector<Stream> streams;
  streams.push_back(std::move(s));
  return run_streams(model, streams, cfg, false);
}

}  // namespace langroute
