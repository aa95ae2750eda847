#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "langroute/errors.hpp"
#include "langroute/pipeline.hpp"

namespace {

using namespace langroute;

void print_pair_eval(const PairEval& pe, bool routed) {
  std::printf("%s: accuracy %.4f  bleu %.2f  (%lld examples%s)\n", pe.pair.c_str(), pe.accuracy,
              pe.bleu_score, static_cast<long long>(pe.examples), routed ? ", routed" : "");
}

int run_cli(int argc, char** argv) {
  CLI::App app{"language-aware layer detection, neuron scoring and selective finetuning"};
  app.require_subcommand(1);

  CorpusSpec corpus;
  std::string out_dir;
  CLI::App* gen = app.add_subcommand("gen-corpus", "generate a cipher-language parallel corpus");
  gen->add_option("--langs", corpus.n_langs, "number of languages")->capture_default_str();
  gen->add_option("--pairs", corpus.pairs, "pair tags, e.g. aa-bb,aa-cc")
      ->required()
      ->delimiter(',');
  gen->add_option("--n-train", corpus.n_train, "training examples per pair")
      ->capture_default_str();
  gen->add_option("--n-test", corpus.n_test, "test examples per pair")->capture_default_str();
  gen->add_option("--base-vocab", corpus.base_vocab, "surface words per language")
      ->capture_default_str();
  gen->add_option("--seed", corpus.seed, "generation seed")->capture_default_str();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->callback([&] {
    const GenCorpusResult res = run_gen_corpus(corpus, out_dir);
    std::printf("wrote %zu files to %s (%d words)\nlanguages:", res.files.size(), out_dir.c_str(),
                res.vocab_size);
    for (const std::string& l : res.languages) std::printf(" %s", l.c_str());
    std::printf("\n");
  });

  InitCkptSpec init;
  std::string init_out;
  CLI::App* ic = app.add_subcommand("init-ckpt", "write a seeded random model checkpoint");
  ic->add_option("--data", init.data_dir, "data directory (vocabulary source)")->required();
  ic->add_option("--layers", init.config.n_layers, "decoder layers")->capture_default_str();
  ic->add_option("--d-model", init.config.d_model, "model width")->capture_default_str();
  ic->add_option("--d-ff", init.config.d_ff, "feed-forward width")->capture_default_str();
  ic->add_option("--heads", init.config.n_heads, "attention heads")->capture_default_str();
  ic->add_option("--max-seq", init.config.max_seq_len, "context length")->capture_default_str();
  ic->add_option("--seed", init.config.seed, "parameter init seed")->capture_default_str();
  ic->add_option("--out", init_out, "checkpoint path")->required();
  ic->callback([&] {
    const ModelConfig cfg = run_init_ckpt(init, init_out);
    std::printf("wrote %s (%d layers, d_model %d, d_ff %d, vocab %d)\n", init_out.c_str(),
                cfg.n_layers, cfg.d_model, cfg.d_ff, cfg.vocab_size);
  });

  DetectSpec detect;
  std::string detect_out;
  CLI::App* dl = app.add_subcommand("detect-layers", "select language-pair-relevant layers");
  dl->add_option("--ckpt", detect.ckpt_path, "model checkpoint")->required();
  dl->add_option("--data", detect.data_dir, "data directory")->required();
  dl->add_option("--pair", detect.pair, "pair tag, e.g. aa-bb")->required();
  dl->add_option("--k", detect.k, "layers to select")->capture_default_str();
  dl->add_option("--passes", detect.passes, "forward passes to trace")->capture_default_str();
  dl->add_option("--batch-size", detect.batch_size, "rows per pass")->capture_default_str();
  dl->add_option("--seed", detect.seed, "row templating seed")->capture_default_str();
  dl->add_option("--out", detect_out, "layer selection file (merged if present)")->required();
  dl->callback([&] {
    const LayerRelevance rel = run_detect_layers(detect, detect_out);
    std::printf("%s: selected layers", detect.pair.c_str());
    for (int l : rel.selected) std::printf(" %d", l);
    std::printf(" -> %s\n", detect_out.c_str());
  });

  ScoreSpec score;
  std::string score_out;
  CLI::App* sn = app.add_subcommand("score-neurons", "score per-neuron language awareness");
  sn->add_option("--ckpt", score.ckpt_path, "model checkpoint")->required();
  sn->add_option("--data", score.data_dir, "data directory")->required();
  sn->add_option("--layers", score.layers_path, "layer selection file")->required();
  sn->add_option("--langs", score.langs, "languages to score (default: all)")->delimiter(',');
  sn->add_option("--batch-size", score.batch_size, "rows per batch")->capture_default_str();
  sn->add_option("--out", score_out, "awareness table output")->required();
  sn->callback([&] {
    const AwarenessTable table = run_score_neurons(score, score_out);
    std::printf("scored %zu languages over %zu layers -> %s\n", table.languages.size(),
                table.layers.size(), score_out.c_str());
  });

  PartitionSpec part;
  std::string part_out;
  CLI::App* pt = app.add_subcommand("partition", "split neurons into general and specific sets");
  pt->add_option("--phi", part.phi_path, "awareness table")->required();
  pt->add_option("--epsilon", part.epsilon, "general fraction per layer")->capture_default_str();
  pt->add_option("--out", part_out, "partition manifest output")->required();
  pt->callback([&] {
    const NeuronPartition np = run_partition(part, part_out);
    for (const auto& [layer, lp] : np.layers) {
      std::size_t specific = 0;
      for (const auto& [lang, ids] : lp.specific) specific += ids.size();
      std::printf("layer %d: %zu general, %zu specific\n", layer, lp.general.size(), specific);
    }
    std::printf("wrote %s\n", part_out.c_str());
  });

  FinetuneSpec tune;
  std::string tune_out;
  CLI::App* ft = app.add_subcommand("finetune", "finetune one pair selectively or fully");
  ft->add_option("--ckpt", tune.ckpt_path, "input checkpoint")->required();
  ft->add_option("--data", tune.data_dir, "data directory")->required();
  ft->add_option("--pair", tune.pair, "pair tag to train")->required();
  ft->add_option("--manifest", tune.manifest_path, "partition manifest (selective runs)");
  ft->add_option("--config", tune.config_path, "training config JSON");
  ft->add_flag("--full", tune.full, "full finetuning baseline: no mask, no routing");
  CLI::Option* seed_opt = ft->add_option("--seed", tune.seed, "overrides the config seed");
  ft->add_option("--out", tune_out, "output checkpoint")->required();
  ft->callback([&] {
    tune.override_seed = seed_opt->count() > 0;
    const TrainResult res = run_finetune(tune, tune_out);
    const double last = res.log.empty() ? 0.0 : res.log.back().loss;
    std::printf("%s: %lld steps, %lld updates, final loss %.4f -> %s\n", tune.pair.c_str(),
                static_cast<long long>(res.steps), static_cast<long long>(res.updates), last,
                tune_out.c_str());
  });

  EvaluateSpec ev;
  std::string ev_out;
  CLI::App* evc = app.add_subcommand("evaluate", "score pairs on their test splits");
  evc->add_option("--ckpt", ev.ckpt_path, "model checkpoint")->required();
  evc->add_option("--data", ev.data_dir, "data directory")->required();
  evc->add_option("--pairs", ev.pairs, "pair tags (default: every test set)")->delimiter(',');
  evc->add_option("--manifest", ev.manifest_path,
                  "score under this manifest's routed architecture instead of the embedded one");
  evc->add_option("--batch-size", ev.batch_size, "rows per batch")->capture_default_str();
  evc->add_option("--max-new", ev.max_new, "decode budget per example (0 = full window)")
      ->capture_default_str();
  evc->add_flag("--add-one-bleu", ev.add_one_bleu, "smooth the n>1 precisions");
  evc->add_option("--seed", ev.seed, "row templating seed")->capture_default_str();
  evc->add_option("--out", ev_out, "evaluation report output")->required();
  evc->callback([&] {
    std::vector<std::string> routed_pairs;
    const EvalReport report = run_evaluate(ev, ev_out, &routed_pairs);
    for (const PairEval& pe : report.pairs) {
      const bool routed =
          std::find(routed_pairs.begin(), routed_pairs.end(), pe.pair) != routed_pairs.end();
      print_pair_eval(pe, routed);
    }
    std::printf("wrote %s\n", ev_out.c_str());
  });

  ReportSpec rep;
  std::string rep_out;
  CLI::App* rp = app.add_subcommand("report", "write a CSV view of stage outputs");
  rp->add_option("--kind", rep.kind, "activations | deltas | awareness | transfer")->required();
  rp->add_option("--in", rep.inputs, "input files for the chosen kind")->delimiter(',');
  rp->add_option("--base", rep.base, "base evaluation report (transfer)");
  rp->add_option("--metric", rep.metric, "accuracy | bleu (transfer)")->capture_default_str();
  rp->add_option("--ckpt", rep.ckpt_path, "model checkpoint (activations)");
  rp->add_option("--data", rep.data_dir, "data directory (activations)");
  rp->add_option("--pairs", rep.pairs, "pair tags (activations)")->delimiter(',');
  rp->add_option("--passes", rep.passes, "forward passes (activations)")->capture_default_str();
  rp->add_option("--batch-size", rep.batch_size, "rows per pass (activations)")
      ->capture_default_str();
  rp->add_option("--seed", rep.seed, "row templating seed (activations)")->capture_default_str();
  rp->add_option("--out", rep_out, "CSV output path")->required();
  rp->callback([&] {
    run_report(rep, rep_out);
    std::printf("wrote %s\n", rep_out.c_str());
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const langroute::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
