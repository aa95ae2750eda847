#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "langroute/awareness.hpp"
#include "langroute/corpus.hpp"
#include "langroute/detector.hpp"
#include "langroute/metrics.hpp"
#include "langroute/model.hpp"
#include "langroute/trainer.hpp"

namespace langroute {

// File-level stages behind the CLI. Every stage reads and writes plain files,
// so runs are reproducible from (seed, data directory, checkpoints) alone.
//
// Data directory layout, written by run_gen_corpus and read by later stages:
//   family.json        language family: vocabulary, permutations, word orders
//   <pair>.train.tsv   parallel training split, one "src<TAB>tgt" line each
//   <pair>.test.tsv    parallel evaluation split

struct CorpusSpec {
  int n_langs = 4;
  std::vector<std::string> pairs;  // tags over the generated codes aa, bb, cc, ...
  int n_train = 2000;
  int n_test = 256;
  int base_vocab = 64;
  std::uint64_t seed = 0;
};

struct GenCorpusResult {
  std::vector<std::string> files;  // family.json first, then TSVs in pair order
  std::vector<std::string> languages;
  int vocab_size = 0;
};

GenCorpusResult run_gen_corpus(const CorpusSpec& spec, const std::string& out_dir);

LanguageFamily load_family(const std::string& data_dir);

// Templated model rows for one pair and split ("train" or "test"). Rows whose
// templated form exceeds max_len are dropped; words outside the family
// vocabulary are a data error.
std::vector<BatchRow> load_pair_rows(const std::string& data_dir, const LanguageFamily& family,
                                     const std::string& pair, const std::string& split, int max_len,
                                     std::uint64_t seed);

// Monolingual LM rows for one language, drawn from that language's side of
// every training TSV in the directory.
std::vector<BatchRow> load_mono_rows(const std::string& data_dir, const LanguageFamily& family,
                                     const std::string& lang, int max_len);

// Chunk rows into fixed-size padded batches; the last batch may be short.
std::vector<Batch> rows_to_batches(const std::vector<BatchRow>& rows, int batch_size,
                                   const std::string& tag);

struct InitCkptSpec {
  std::string data_dir;  // source of the vocabulary size
  ModelConfig config;    // vocab_size 0 means "take it from the family"
};

// Seeded random model saved as a checkpoint with empty metadata.
ModelConfig run_init_ckpt(const InitCkptSpec& spec, const std::string& out_path);

struct DetectSpec {
  std::string ckpt_path;
  std::string data_dir;
  std::string pair;
  int k = 4;
  int passes = 16;
  int batch_size = 16;
  std::uint64_t seed = 0;  // row templating seed
};

// Writes the pair's entry into the selection file at out_path, merging with
// entries already present for other pairs.
LayerRelevance run_detect_layers(const DetectSpec& spec, const std::string& out_path);

struct ScoreSpec {
  std::string ckpt_path;
  std::string data_dir;
  std::string layers_path;
  std::vector<std::string> langs;  // empty means every family language
  int batch_size = 16;
};

// Scores all languages over the union of detected layers and writes the
// awareness table (with the per-pair layer map) to out_path.
AwarenessTable run_score_neurons(const ScoreSpec& spec, const std::string& out_path);

struct PartitionSpec {
  std::string phi_path;
  double epsilon = 0.9;
};

NeuronPartition run_partition(const PartitionSpec& spec, const std::string& out_path);

// Optional JSON overrides for TrainConfig; absent keys keep defaults, unknown
// keys are a data error.
TrainConfig train_config_from_json(const std::string& json_text);

struct FinetuneSpec {
  std::string ckpt_path;
  std::string data_dir;
  std::string pair;
  std::string manifest_path;  // required unless full is set
  std::string config_path;    // optional TrainConfig JSON
  bool full = false;          // full finetuning baseline: no mask, no routing
  bool override_seed = false;
  std::uint64_t seed = 0;  // replaces the config seed when override_seed is set
};

// Trains on the pair's train split and writes the result checkpoint to
// out_path plus a step log at out_path + ".train.csv". Selective runs embed
// the manifest and extend trained_pairs; full runs clear the manifest, since
// the stored partition no longer describes the moved parameters.
TrainResult run_finetune(const FinetuneSpec& spec, const std::string& out_path);

struct EvaluateSpec {
  std::string ckpt_path;
  std::string data_dir;
  std::vector<std::string> pairs;  // empty means every pair with a test TSV
  std::string manifest_path;       // overrides the checkpoint's embedded manifest
  int batch_size = 16;
  int max_new = 0;
  bool add_one_bleu = false;
  std::uint64_t seed = 0;  // row templating seed
};

// Scores each pair on its test split. With a manifest (embedded by selective
// finetuning, or passed explicitly) every pair whose languages the manifest
// scores runs through its routed architecture; without one the plain forward
// is used. An explicit manifest path scores base weights under a candidate
// architecture, giving the routed baseline the transfer report subtracts.
// routed_pairs, when non-null, receives the pairs that actually ran routed.
EvalReport run_evaluate(const EvaluateSpec& spec, const std::string& out_path,
                        std::vector<std::string>* routed_pairs = nullptr);

struct ReportSpec {
  std::string kind;  // activations | deltas | awareness | transfer
  std::vector<std::string> inputs;
  std::string base;               // transfer: the base-model report
  std::string metric = "accuracy";  // transfer: accuracy | bleu
  // activations recomputes traces from a checkpoint:
  std::string ckpt_path;
  std::string data_dir;
  std::vector<std::string> pairs;
  int passes = 16;
  int batch_size = 16;
  std::uint64_t seed = 0;
};

void run_report(const ReportSpec& spec, const std::string& out_path);

}  // namespace langroute
