#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "langroute/awareness.hpp"
#include "langroute/corpus.hpp"
#include "langroute/model.hpp"

namespace langroute {

struct TrainConfig {
  double learning_rate = 5e-5;
  int batch_size = 8;
  int grad_accum_steps = 10;  // optimizer applies once per this many micro-batches
  int epochs = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::int64_t max_steps = 0;  // micro-batch cap, 0 = full epoch budget

  void validate() const;
};

// Flat per-parameter trainability mask. Parameters absent from the map are
// fully frozen; everything outside the mask must come out of training
// bit-identical.
struct UpdateMask {
  std::map<std::string, std::vector<std::uint8_t>> mask;

  bool at(const std::string& name, std::int64_t i) const;
  std::int64_t true_count() const;
};

UpdateMask full_mask(const TransformerModel& model);

// Trainable set = the hidden units in general ∪ specific(pair) inside the
// pair's detected layers, i.e. their W1 columns, b1 entries and W2 rows.
// Embeddings, attention, norms, b2 and undetected layers stay frozen.
UpdateMask build_update_mask(const TransformerModel& model, const NeuronPartition& partition,
                             const std::string& pair, const std::vector<int>& layers);

struct TrainLogEntry {
  std::int64_t step = 0;
  std::string pair;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;  // one row per micro-batch
  std::int64_t steps = 0;
  std::int64_t updates = 0;  // optimizer applications
};

// CSV columns: step,pair,loss,lr
void write_train_log_csv(const std::string& path, const std::vector<TrainLogEntry>& log);

// Decoupled-weight-decay adaptive moments over masked coordinates only. State
// is sparse: memory is proportional to the trainable set, and bias correction
// counts steps per coordinate so moments surviving a pair switch keep their
// history. Weight decay applies to matrices (rank >= 2), never to vectors.
class MaskedAdamW {
 public:
  explicit MaskedAdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  // grad_sums holds summed micro-batch gradients; accum divides them.
  void apply(TransformerModel& model, const UpdateMask& mask,
             const std::map<std::string, Tensor>& grad_sums, std::int64_t accum);

  // Drop state at coordinates outside keep. Used when training switches pairs:
  // only general-neuron coordinates carry over.
  void retain(const std::map<std::string, std::vector<std::int64_t>>& keep);

  std::int64_t state_size() const;

 private:
  struct Slot {
    double m = 0.0, v = 0.0;
    std::int64_t t = 0;
  };
  TrainConfig cfg_;
  std::map<std::string, std::unordered_map<std::int64_t, Slot>> state_;
};

// Selective finetuning of one pair: routed forward per the partition, updates
// restricted to the pair's mask. The model is modified in place.
TrainResult finetune_pair(TransformerModel& model, const std::string& pair,
                          const std::vector<BatchRow>& rows, const NeuronPartition& partition,
                          const TrainConfig& cfg);

struct PairDataset {
  std::string pair;
  std::vector<BatchRow> rows;
};

// Multi-pair schedule: round-robin over pairs at optimizer-step granularity
// (each turn consumes one accumulation block), or one pair fully after another
// when sequential is set. On a pair switch the optimizer keeps only the
// incoming pair's general-neuron moments.
TrainResult finetune_pairs(TransformerModel& model, const std::vector<PairDataset>& datasets,
                           const NeuronPartition& partition, const TrainConfig& cfg,
                           bool sequential = false);

// Baseline comparator: all parameters trainable, no routing.
TrainResult full_finetune(TransformerModel& model, const std::vector<BatchRow>& rows,
                          const TrainConfig& cfg, const std::string& pair_label = "all");

}  // namespace langroute
