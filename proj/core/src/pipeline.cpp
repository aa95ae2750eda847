#include "langroute/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "langroute/checkpoint.hpp"
#include "langroute/errors.hpp"
#include "langroute/router.hpp"
#include "json.hpp"

namespace langroute {

namespace fs = std::filesystem;

namespace {

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("short write to " + path);
}

// splitmix64 finalizer; decorrelates per-pair generation streams from one CLI seed.
std::uint64_t mix_seed(std::uint64_t s, std::uint64_t k) {
  std::uint64_t z = s + 0x9e3779b97f4a7c15ULL * (k + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string fnv1a64_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string tsv_path(const std::string& data_dir, const std::string& pair,
                     const std::string& split) {
  if (split != "train" && split != "test") {
    throw ContractError("corpus split must be train or test, got " + split);
  }
  return (fs::path(data_dir) / (pair + "." + split + ".tsv")).string();
}

// Load a pair TSV against a fixed vocabulary; any new word is a data error.
std::vector<ParallelExample> load_examples_strict(const std::string& path,
                                                  const LanguageFamily& family) {
  Vocab scratch = family.vocab;
  TsvLoadResult res = load_parallel_tsv(path, scratch);
  if (scratch.size() != family.vocab.size()) {
    throw DataError("corpus uses words outside the family vocabulary: " + path);
  }
  return std::move(res.examples);
}

std::vector<std::string> sorted_stems_with_suffix(const std::string& data_dir,
                                                  const std::string& suffix) {
  if (!fs::is_directory(data_dir)) throw DataError("not a data directory: " + data_dir);
  std::vector<std::string> stems;
  for (const fs::directory_entry& e : fs::directory_iterator(data_dir)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    if (name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      stems.push_back(name.substr(0, name.size() - suffix.size()));
    }
  }
  std::sort(stems.begin(), stems.end());
  return stems;
}

bool contains_pair(const std::vector<std::string>& pairs, const std::string& pair) {
  return std::find(pairs.begin(), pairs.end(), pair) != pairs.end();
}

}  // namespace

GenCorpusResult run_gen_corpus(const CorpusSpec& spec, const std::string& out_dir) {
  if (spec.pairs.empty()) throw ContractError("gen-corpus: at least one pair is required");
  if (spec.n_train < 1 || spec.n_test < 1) {
    throw ContractError("gen-corpus: split sizes must be positive");
  }
  LanguageFamily family = make_language_family(spec.n_langs, spec.base_vocab, spec.seed);
  for (std::size_t i = 0; i < spec.pairs.size(); ++i) {
    auto [a, b] = split_pair_tag(spec.pairs[i]);
    family.lang(a);
    family.lang(b);
    if (a == b) throw DataError("pair " + spec.pairs[i] + " repeats one language");
    for (std::size_t j = 0; j < i; ++j) {
      if (spec.pairs[j] == spec.pairs[i]) throw DataError("duplicate pair " + spec.pairs[i]);
    }
  }

  fs::create_directories(out_dir);
  GenCorpusResult result;
  const std::string family_path = (fs::path(out_dir) / "family.json").string();
  write_text_file(family_path, family_to_json(family));
  result.files.push_back(family_path);
  for (const Language& l : family.langs) result.languages.push_back(l.code);
  result.vocab_size = family.vocab.size();

  for (std::size_t i = 0; i < spec.pairs.size(); ++i) {
    auto [a, b] = split_pair_tag(spec.pairs[i]);
    const auto train = gen_parallel(family, a, b, spec.n_train, mix_seed(spec.seed, 2 * i));
    const auto test = gen_parallel(family, a, b, spec.n_test, mix_seed(spec.seed, 2 * i + 1));
    const std::string train_path = tsv_path(out_dir, spec.pairs[i], "train");
    const std::string test_path = tsv_path(out_dir, spec.pairs[i], "test");
    save_parallel_tsv(train, family.vocab, train_path);
    save_parallel_tsv(test, family.vocab, test_path);
    result.files.push_back(train_path);
    result.files.push_back(test_path);
  }
  return result;
}

LanguageFamily load_family(const std::string& data_dir) {
  return family_from_json(read_text_file((fs::path(data_dir) / "family.json").string()));
}

std::vector<BatchRow> load_pair_rows(const std::string& data_dir, const LanguageFamily& family,
                                     const std::string& pair, const std::string& split, int max_len,
                                     std::uint64_t seed) {
  const std::string path = tsv_path(data_dir, pair, split);
  const std::vector<ParallelExample> examples = load_examples_strict(path, family);
  std::vector<BatchRow> rows;
  rows.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    try {
      rows.push_back(apply_template(family, examples[i], -1, seed + i, max_len));
    } catch (const DataError&) {
      // overlong templated row; unknown words were ruled out at load
    }
  }
  return rows;
}

std::vector<BatchRow> load_mono_rows(const std::string& data_dir, const LanguageFamily& family,
                                     const std::string& lang, int max_len) {
  family.lang(lang);
  std::vector<BatchRow> rows;
  for (const std::string& stem : sorted_stems_with_suffix(data_dir, ".train.tsv")) {
    auto [a, b] = split_pair_tag(stem);
    if (a != lang && b != lang) continue;
    const std::string path = (fs::path(data_dir) / (stem + ".train.tsv")).string();
    for (const ParallelExample& ex : load_examples_strict(path, family)) {
      const std::vector<int>& side = (a == lang) ? ex.src : ex.tgt;
      if (static_cast<int>(side.size()) + 2 > max_len) continue;
      rows.push_back(lm_row(side));
    }
  }
  return rows;
}

std::vector<Batch> rows_to_batches(const std::vector<BatchRow>& rows, int batch_size,
                                   const std::string& tag) {
  if (batch_size < 1) throw ContractError("batch size must be positive");
  std::vector<Batch> batches;
  for (std::size_t at = 0; at < rows.size(); at += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(rows.size(), at + static_cast<std::size_t>(batch_size));
    batches.push_back(
        rows_to_batch(std::vector<BatchRow>(rows.begin() + static_cast<std::ptrdiff_t>(at),
                                            rows.begin() + static_cast<std::ptrdiff_t>(end)),
                      tag));
  }
  return batches;
}

ModelConfig run_init_ckpt(const InitCkptSpec& spec, const std::string& out_path) {
  ModelConfig cfg = spec.config;
  if (cfg.vocab_size == 0) cfg.vocab_size = load_family(spec.data_dir).vocab.size();
  cfg.validate();
  TransformerModel model(cfg);
  model.init_params();
  save_checkpoint(out_path, model);
  return cfg;
}

LayerRelevance run_detect_layers(const DetectSpec& spec, const std::string& out_path) {
  LoadedCheckpoint ckpt = load_checkpoint(spec.ckpt_path);
  const LanguageFamily family = load_family(spec.data_dir);
  const std::vector<BatchRow> rows = load_pair_rows(
      spec.data_dir, family, spec.pair, "train", ckpt.model.config().max_seq_len, spec.seed);
  if (rows.empty()) throw DataError("no usable training rows for pair " + spec.pair);
  const std::vector<Batch> batches = rows_to_batches(rows, spec.batch_size, spec.pair);

  LayerRelevance rel = detect_layers(ckpt.model, batches, spec.passes, spec.k);
  rel.pair = spec.pair;

  LayerSelectionFile sel;
  if (fs::exists(out_path)) sel = layer_selection_from_json(read_text_file(out_path));
  sel.pairs[spec.pair] = rel;
  write_text_file(out_path, layer_selection_to_json(sel));
  return rel;
}

AwarenessTable run_score_neurons(const ScoreSpec& spec, const std::string& out_path) {
  LoadedCheckpoint ckpt = load_checkpoint(spec.ckpt_path);
  const LanguageFamily family = load_family(spec.data_dir);
  const LayerSelectionFile sel = layer_selection_from_json(read_text_file(spec.layers_path));
  const std::vector<int> layers = sel.all_selected();
  if (layers.empty()) throw DataError("layer selection holds no layers: " + spec.layers_path);

  std::vector<std::string> langs = spec.langs;
  if (langs.empty()) {
    for (const Language& l : family.langs) langs.push_back(l.code);
  }
  for (const std::string& l : langs) family.lang(l);

  AwarenessTable table = make_awareness_table(langs, layers, ckpt.model.config().d_ff);
  for (const std::string& lang : langs) {
    const std::vector<BatchRow> rows =
        load_mono_rows(spec.data_dir, family, lang, ckpt.model.config().max_seq_len);
    if (rows.empty()) throw DataError("no monolingual rows for language " + lang);
    score_language(ckpt.model, lang, rows_to_batches(rows, spec.batch_size, lang), table);
  }

  std::map<std::string, std::vector<int>> pair_layers;
  for (const auto& [pair, rel] : sel.pairs) pair_layers[pair] = rel.selected;
  write_text_file(out_path, awareness_table_to_json(table, pair_layers));
  return table;
}

NeuronPartition run_partition(const PartitionSpec& spec, const std::string& out_path) {
  std::map<std::string, std::vector<int>> pair_layers;
  const AwarenessTable table =
      awareness_table_from_json(read_text_file(spec.phi_path), &pair_layers);
  NeuronPartition np = partition(table, spec.epsilon);
  np.pair_layers = std::move(pair_layers);
  write_text_file(out_path, partition_to_json(np));
  return np;
}

TrainConfig train_config_from_json(const std::string& json_text) {
  const nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw DataError("train config must be a JSON object");
  TrainConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "learning_rate") cfg.learning_rate = value.get<double>();
      else if (key == "batch_size") cfg.batch_size = value.get<int>();
      else if (key == "grad_accum_steps") cfg.grad_accum_steps = value.get<int>();
      else if (key == "epochs") cfg.epochs = value.get<int>();
      else if (key == "beta1") cfg.beta1 = value.get<double>();
      else if (key == "beta2") cfg.beta2 = value.get<double>();
      else if (key == "weight_decay") cfg.weight_decay = value.get<double>();
      else if (key == "eps") cfg.eps = value.get<double>();
      else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else if (key == "max_steps") cfg.max_steps = value.get<std::int64_t>();
      else throw DataError("unknown train config key " + key);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed train config: ") + e.what());
  }
  return cfg;
}

TrainResult run_finetune(const FinetuneSpec& spec, const std::string& out_path) {
  LoadedCheckpoint ckpt = load_checkpoint(spec.ckpt_path);
  const LanguageFamily family = load_family(spec.data_dir);
  TrainConfig cfg;
  if (!spec.config_path.empty()) cfg = train_config_from_json(read_text_file(spec.config_path));
  if (spec.override_seed) cfg.seed = spec.seed;

  const std::vector<BatchRow> rows = load_pair_rows(
      spec.data_dir, family, spec.pair, "train", ckpt.model.config().max_seq_len, cfg.seed);
  if (rows.empty()) throw DataError("no usable training rows for pair " + spec.pair);

  TrainResult result;
  CheckpointMeta meta = ckpt.meta;
  if (spec.full) {
    result = full_finetune(ckpt.model, rows, cfg, spec.pair);
    meta.manifest_json.clear();
  } else {
    if (spec.manifest_path.empty()) {
      throw ContractError("selective finetuning requires a partition manifest");
    }
    const std::string manifest_text = read_text_file(spec.manifest_path);
    const NeuronPartition np = partition_from_json(manifest_text);
    result = finetune_pair(ckpt.model, spec.pair, rows, np, cfg);
    meta.manifest_json = manifest_text;
  }
  if (!contains_pair(meta.trained_pairs, spec.pair)) meta.trained_pairs.push_back(spec.pair);

  save_checkpoint(out_path, ckpt.model, meta);
  write_train_log_csv(out_path + ".train.csv", result.log);
  return result;
}

EvalReport run_evaluate(const EvaluateSpec& spec, const std::string& out_path,
                        std::vector<std::string>* routed_pairs) {
  LoadedCheckpoint ckpt = load_checkpoint(spec.ckpt_path);
  const LanguageFamily family = load_family(spec.data_dir);

  std::vector<std::string> pairs = spec.pairs;
  if (pairs.empty()) pairs = sorted_stems_with_suffix(spec.data_dir, ".test.tsv");
  if (pairs.empty()) throw DataError("no test sets found in " + spec.data_dir);

  std::string manifest_text = ckpt.meta.manifest_json;
  if (!spec.manifest_path.empty()) manifest_text = read_text_file(spec.manifest_path);
  NeuronPartition np;
  const bool have_manifest = !manifest_text.empty();
  if (have_manifest) np = partition_from_json(manifest_text);
  auto scored = [&](const std::string& lang) {
    return std::find(np.languages.begin(), np.languages.end(), lang) != np.languages.end();
  };

  EvalReport report;
  report.checkpoint_id = fs::path(spec.ckpt_path).filename().string();
  report.manifest_id = have_manifest ? fnv1a64_hex(manifest_text) : "none";
  report.seed = spec.seed;
  report.trained_pairs = ckpt.meta.trained_pairs;

  for (const std::string& pair : pairs) {
    const std::vector<BatchRow> rows = load_pair_rows(
        spec.data_dir, family, pair, "test", ckpt.model.config().max_seq_len, spec.seed);
    if (rows.empty()) throw DataError("no usable test rows for pair " + pair);

    EvalOptions opts;
    opts.batch_size = spec.batch_size;
    opts.max_new = spec.max_new;
    opts.bleu.add_one = spec.add_one_bleu;
    RoutingPlan plan;
    const auto [a, b] = split_pair_tag(pair);
    if (have_manifest && scored(a) && scored(b)) {
      plan = build_routing_plan(ckpt.model.config(), np, a, b, serving_layers(np, pair));
      opts.routing = &plan;
      if (routed_pairs != nullptr) routed_pairs->push_back(pair);
    }
    report.pairs.push_back(evaluate_pair(ckpt.model, pair, rows, opts));
  }

  write_text_file(out_path, eval_report_to_json(report));
  return report;
}

void run_report(const ReportSpec& spec, const std::string& out_path) {
  if (spec.kind == "activations") {
    if (spec.ckpt_path.empty() || spec.data_dir.empty() || spec.pairs.empty()) {
      throw ContractError("report kind activations needs a checkpoint, data dir and pairs");
    }
    LoadedCheckpoint ckpt = load_checkpoint(spec.ckpt_path);
    const LanguageFamily family = load_family(spec.data_dir);
    std::vector<ActivationTrace> traces;
    for (const std::string& pair : spec.pairs) {
      const std::vector<BatchRow> rows = load_pair_rows(
          spec.data_dir, family, pair, "train", ckpt.model.config().max_seq_len, spec.seed);
      if (rows.empty()) throw DataError("no usable training rows for pair " + pair);
      ActivationTrace t = trace_activations(
          ckpt.model, rows_to_batches(rows, spec.batch_size, pair), spec.passes);
      t.pair = pair;
      traces.push_back(std::move(t));
    }
    write_layer_activations_csv(out_path, traces);
  } else if (spec.kind == "deltas") {
    if (spec.inputs.size() != 1) {
      throw ContractError("report kind deltas needs exactly one layer selection input");
    }
    const LayerSelectionFile sel = layer_selection_from_json(read_text_file(spec.inputs[0]));
    std::vector<LayerRelevance> rels;
    for (const auto& [pair, rel] : sel.pairs) rels.push_back(rel);
    write_layer_deltas_csv(out_path, rels);
  } else if (spec.kind == "awareness") {
    if (spec.inputs.size() != 1) {
      throw ContractError("report kind awareness needs exactly one score table input");
    }
    const AwarenessTable table = awareness_table_from_json(read_text_file(spec.inputs[0]), nullptr);
    write_awareness_csv(out_path, table);
  } else if (spec.kind == "transfer") {
    if (spec.base.empty() || spec.inputs.empty()) {
      throw ContractError("report kind transfer needs a base report and finetuned reports");
    }
    Metric metric;
    if (spec.metric == "accuracy") metric = Metric::kAccuracy;
    else if (spec.metric == "bleu") metric = Metric::kBleu;
    else throw ContractError("unknown transfer metric " + spec.metric);
    const EvalReport base = eval_report_from_json(read_text_file(spec.base));
    std::vector<EvalReport> finetuned;
    for (const std::string& path : spec.inputs) {
      finetuned.push_back(eval_report_from_json(read_text_file(path)));
    }
    write_transfer_csv(out_path, transfer_from_reports(base, finetuned, metric));
  } else {
    throw ContractError("unknown report kind " + spec.kind);
  }
}

}  // namespace langroute
