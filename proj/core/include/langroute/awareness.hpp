#pragma once

#include <map>
#include <string>
#include <vector>

#include "langroute/model.hpp"

namespace langroute {

// First-order importance scores: phi[layer](neuron, language) estimates the
// loss change from zeroing that neuron's activation on that language's text.
struct AwarenessTable {
  std::vector<std::string> languages;
  std::vector<int> layers;  // ascending
  int d_ff = 0;
  std::map<int, Tensor> phi;  // layer -> [d_ff x n_languages]
  std::map<std::string, std::int64_t> batch_counts;

  int lang_index(const std::string& code) const;  // DataError if unknown
  double phi_at(int layer, int neuron, const std::string& lang) const;
  bool complete() const;  // every language scored at least once
};

AwarenessTable make_awareness_table(const std::vector<std::string>& languages,
                                    const std::vector<int>& layers, int d_ff);

struct ScoreOptions {
  // Default: mean over token positions of |grad * activation|. The alternative
  // takes the absolute value after summing, allowing sign cancellation.
  bool abs_of_sum = false;
};

// Accumulate one language's column from monolingual LM batches. Gradient terms
// are rescaled to sum-loss semantics so the result is invariant to how the
// same rows are split into batches.
void score_language(const TransformerModel& model, const std::string& language,
                    const std::vector<Batch>& mono_data, AwarenessTable& table,
                    const ScoreOptions& opts = {});

// Exact loss change from forcing one hidden unit to zero, by two forward passes.
double ablation_delta(const TransformerModel& model, const Batch& batch, int layer, int neuron);

struct LayerPartition {
  double lambda = 0.0;  // largest variance admitted into the general set
  std::vector<int> general;
  std::map<std::string, std::vector<int>> specific;
  std::vector<double> variance;  // population variance across languages, per neuron
  std::map<std::string, std::vector<double>> phi;  // per-language scores, per neuron
};

struct NeuronPartition {
  double epsilon = 0.0;
  std::vector<std::string> languages;
  std::map<int, LayerPartition> layers;
  std::map<std::string, std::vector<int>> pair_layers;  // pair tag -> detected layers
};

// Per layer: the floor(epsilon * d_ff) lowest-variance units become general;
// the rest are specific to their highest-awareness language. Ties fall to the
// lower language index, then the lower neuron id.
NeuronPartition partition(const AwarenessTable& table, double epsilon);

// specific[a] union specific[b] per layer.
std::map<int, std::vector<int>> pair_neurons(const NeuronPartition& partition, const std::string& a,
                                             const std::string& b);

std::string awareness_table_to_json(const AwarenessTable& table,
                                    const std::map<std::string, std::vector<int>>& pair_layers);
AwarenessTable awareness_table_from_json(const std::string& json_text,
                                         std::map<std::string, std::vector<int>>* pair_layers);

std::string partition_to_json(const NeuronPartition& partition);
NeuronPartition partition_from_json(const std::string& json_text);

void write_awareness_csv(const std::string& path, const AwarenessTable& table);

}  // namespace langroute
