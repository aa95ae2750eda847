#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "langroute/awareness.hpp"
#include "langroute/corpus.hpp"
#include "langroute/model.hpp"

namespace langroute {

// Greedy continuation of the prompt, one forward pass per emitted token.
// Stops at eos_id (not included in the result) or after max_new tokens.
std::vector<int> decode(const TransformerModel& model, const std::vector<int>& prompt, int max_new,
                        const RoutingPlan* routing = nullptr, int eos_id = Vocab::kEos);

struct BleuOptions {
  bool add_one = false;  // add-one smoothing on the n > 1 precisions, for tiny test sets
};

// Corpus-level BLEU in [0, 100]: geometric mean of modified 1..4-gram
// precisions times the brevity penalty. Unsmoothed by default, so any
// zero precision zeroes the score.
double bleu(const std::vector<std::vector<int>>& hypotheses,
            const std::vector<std::vector<int>>& references, const BleuOptions& opts = {});

// Teacher-forced next-token argmax accuracy over mask-true positions.
// Ties resolve to the lower token id.
double token_accuracy(const TransformerModel& model, const Batch& batch,
                      const RoutingPlan* routing = nullptr);

struct PairEval {
  std::string pair;
  double bleu_score = 0.0;
  double accuracy = 0.0;
  std::int64_t examples = 0;
};

struct EvalOptions {
  int batch_size = 16;
  int max_new = 0;  // decode budget per example; 0 spends the full context window
  BleuOptions bleu;
  const RoutingPlan* routing = nullptr;
};

// Accuracy is teacher-forced over the batched rows; BLEU decodes each prompt
// greedily against the reference target (terminator stripped from both sides).
PairEval evaluate_pair(const TransformerModel& model, const std::string& pair,
                       const std::vector<BatchRow>& rows, const EvalOptions& opts = {});

struct EvalReport {
  std::string checkpoint_id;
  std::string manifest_id;
  std::uint64_t seed = 0;
  std::vector<std::string> trained_pairs;
  std::vector<PairEval> pairs;
};

std::string eval_report_to_json(const EvalReport& report);
EvalReport eval_report_from_json(const std::string& json_text);

enum class Metric { kAccuracy, kBleu };

struct FinetunedCheckpoint {
  std::string pair;  // the pair this checkpoint was finetuned on
  const TransformerModel* model = nullptr;
  // Selective checkpoints serve every pair through the manifest's routed
  // architecture; null marks a plain full-finetune checkpoint.
  const NeuronPartition* partition = nullptr;
};

struct PairTestset {
  std::string pair;
  std::vector<BatchRow> rows;
};

// rows = finetuned checkpoints, cols = evaluated testsets.
struct TransferMatrix {
  std::vector<std::string> finetuned;
  std::vector<std::string> evaluated;
  std::vector<double> delta;  // row-major

  double at(std::size_t row, std::size_t col) const;
};

// cell(r,c) = metric(checkpoint_r on testset_c) - metric(base on testset_c),
// both sides scored through checkpoint r's serving architecture: the evaluated
// pair's routing for a selective row, the plain forward for a full row. Holding
// the architecture fixed within a cell isolates what finetuning changed from
// what routing costs, so diagonal cells read as transfer and off-diagonal
// cells as interference under either method.
TransferMatrix forgetting_matrix(const TransformerModel& base,
                                 const std::vector<FinetunedCheckpoint>& finetuned,
                                 const std::vector<PairTestset>& testsets,
                                 Metric metric = Metric::kAccuracy, const EvalOptions& opts = {});

// Same matrix assembled from stored evaluation reports instead of forwards.
// Column order follows the base report.
TransferMatrix transfer_from_reports(const EvalReport& base,
                                     const std::vector<EvalReport>& finetuned, Metric metric);

void write_transfer_csv(const std::string& path, const TransferMatrix& matrix);

}  // namespace langroute
