#include "langroute/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "json.hpp"
#include "langroute/errors.hpp"
#include "langroute/router.hpp"
#include "langroute/tape.hpp"

namespace langroute {

namespace {

// Argmax with ties to the lower index.
int argmax_row(const Tensor& logits, std::int64_t row) {
  const std::int64_t v = logits.dim(logits.rank() - 1);
  const double* p = logits.data.data() + row * v;
  int best = 0;
  for (std::int64_t u = 1; u < v; ++u) {
    if (p[u] > p[best]) best = static_cast<int>(u);
  }
  return best;
}

}  // namespace

std::vector<int> decode(const TransformerModel& model, const std::vector<int>& prompt, int max_new,
                        const RoutingPlan* routing, int eos_id) {
  if (prompt.empty()) throw ContractError("decode needs a non-empty prompt");
  if (max_new < 0) throw ContractError("decode budget must be non-negative");
  if (static_cast<int>(prompt.size()) + max_new > model.config().max_seq_len) {
    throw ContractError("prompt plus decode budget exceeds the context window");
  }
  std::vector<int> seq = prompt;
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    Batch b;
    b.rows = 1;
    b.cols = static_cast<std::int64_t>(seq.size());
    b.tokens = seq;
    b.mask.assign(seq.size(), 0);
    Tape tape;
    ForwardOptions opts;
    opts.routing = routing;
    ForwardResult fr = forward(model, b, {}, tape, opts);
    const int tok = argmax_row(tape.value(fr.logits), b.cols - 1);
    if (tok == eos_id) break;
    out.push_back(tok);
    seq.push_back(tok);
  }
  return out;
}

double bleu(const std::vector<std::vector<int>>& hypotheses,
            const std::vector<std::vector<int>>& references, const BleuOptions& opts) {
  if (hypotheses.size() != references.size()) {
    throw ContractError("hypothesis/reference counts differ");
  }
  if (hypotheses.empty()) throw ContractError("empty evaluation corpus");
  for (const auto& r : references) {
    if (r.empty()) throw ContractError("empty reference sentence");
  }

  std::int64_t hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    hyp_len += static_cast<std::int64_t>(hypotheses[s].size());
    ref_len += static_cast<std::int64_t>(references[s].size());
  }

  double log_sum = 0.0;
  for (int n = 1; n <= 4; ++n) {
    std::int64_t matched = 0, total = 0;
    for (std::size_t s = 0; s < hypotheses.size(); ++s) {
      const auto& h = hypotheses[s];
      const auto& r = references[s];
      std::map<std::vector<int>, std::int64_t> ref_counts;
      for (std::size_t i = 0; i + n <= r.size(); ++i) {
        ++ref_counts[std::vector<int>(r.begin() + i, r.begin() + i + n)];
      }
      for (std::size_t i = 0; i + n <= h.size(); ++i) {
        ++total;
        auto it = ref_counts.find(std::vector<int>(h.begin() + i, h.begin() + i + n));
        if (it != ref_counts.end() && it->second > 0) {
          --it->second;
          ++matched;
        }
      }
    }
    double p;
    if (opts.add_one && n > 1) {
      p = static_cast<double>(matched + 1) / static_cast<double>(total + 1);
    } else {
      p = total > 0 ? static_cast<double>(matched) / static_cast<double>(total) : 0.0;
    }
    if (p == 0.0) return 0.0;
    log_sum += 0.25 * std::log(p);
  }

  double bp = 1.0;
  if (hyp_len <= ref_len) {
    if (hyp_len == 0) return 0.0;
    bp = std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  }
  return 100.0 * bp * std::exp(log_sum);
}

double token_accuracy(const TransformerModel& model, const Batch& batch,
                      const RoutingPlan* routing) {
  Tape tape;
  ForwardOptions opts;
  opts.routing = routing;
  ForwardResult fr = forward(model, batch, {}, tape, opts);
  const Tensor& logits = tape.value(fr.logits);
  std::int64_t matched = 0, total = 0;
  for (std::int64_t r = 0; r < batch.rows; ++r) {
    if (batch.mask_at(r, 0)) throw ContractError("position 0 cannot be a target");
    for (std::int64_t c = 1; c < batch.cols; ++c) {
      if (!batch.mask_at(r, c)) continue;
      ++total;
      if (argmax_row(logits, r * batch.cols + c - 1) == batch.token_at(r, c)) ++matched;
    }
  }
  if (total == 0) throw DataError("batch has no loss positions");
  return static_cast<double>(matched) / static_cast<double>(total);
}

namespace {

// Accuracy pooled at count level across micro-batches.
double corpus_accuracy(const TransformerModel& model, const std::vector<BatchRow>& rows,
                       const std::string& pair, const RoutingPlan* routing, int batch_size) {
  std::int64_t matched = 0, total = 0;
  for (std::size_t start = 0; start < rows.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(rows.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<BatchRow> chunk(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                rows.begin() + static_cast<std::ptrdiff_t>(stop));
    Batch batch = rows_to_batch(chunk, pair);
    Tape tape;
    ForwardOptions opts;
    opts.routing = routing;
    ForwardResult fr = forward(model, batch, {}, tape, opts);
    const Tensor& logits = tape.value(fr.logits);
    for (std::int64_t r = 0; r < batch.rows; ++r) {
      for (std::int64_t c = 1; c < batch.cols; ++c) {
        if (!batch.mask_at(r, c)) continue;
        ++total;
        if (argmax_row(logits, r * batch.cols + c - 1) == batch.token_at(r, c)) ++matched;
      }
    }
  }
  if (total == 0) throw DataError("testset has no loss positions");
  return static_cast<double>(matched) / static_cast<double>(total);
}

std::vector<int> reference_of(const BatchRow& row) {
  std::vector<int> ref(row.tokens.begin() + static_cast<std::ptrdiff_t>(row.prompt_len),
                       row.tokens.end());
  if (!ref.empty() && ref.back() == Vocab::kEos) ref.pop_back();
  return ref;
}

double corpus_bleu(const TransformerModel& model, const std::vector<BatchRow>& rows,
                   const EvalOptions& opts) {
  std::vector<std::vector<int>> hyps, refs;
  hyps.reserve(rows.size());
  refs.reserve(rows.size());
  for (const BatchRow& row : rows) {
    std::vector<int> prompt(row.tokens.begin(),
                            row.tokens.begin() + static_cast<std::ptrdiff_t>(row.prompt_len));
    int budget = model.config().max_seq_len - static_cast<int>(prompt.size());
    if (opts.max_new > 0) budget = std::min(budget, opts.max_new);
    if (budget < 0) throw DataError("prompt exceeds the context window");
    hyps.push_back(decode(model, prompt, budget, opts.routing));
    refs.push_back(reference_of(row));
  }
  return bleu(hyps, refs, opts.bleu);
}

}  // namespace

PairEval evaluate_pair(const TransformerModel& model, const std::string& pair,
                       const std::vector<BatchRow>& rows, const EvalOptions& opts) {
  if (rows.empty()) throw ContractError("empty evaluation corpus");
  if (opts.batch_size < 1) throw ContractError("batch_size must be at least 1");
  PairEval out;
  out.pair = pair;
  out.examples = static_cast<std::int64_t>(rows.size());
  out.accuracy = corpus_accuracy(model, rows, pair, opts.routing, opts.batch_size);
  out.bleu_score = corpus_bleu(model, rows, opts);
  return out;
}

std::string eval_report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["checkpoint"] = report.checkpoint_id;
  j["manifest"] = report.manifest_id;
  j["seed"] = report.seed;
  j["trained_pairs"] = report.trained_pairs;
  nlohmann::json pairs = nlohmann::json::object();
  for (const PairEval& p : report.pairs) {
    pairs[p.pair] = {{"bleu", p.bleu_score}, {"accuracy", p.accuracy}, {"examples", p.examples}};
  }
  j["pairs"] = std::move(pairs);
  return j.dump(2);
}

EvalReport eval_report_from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
  if (j.is_discarded()) throw DataError("evaluation report is not valid JSON");
  EvalReport out;
  try {
    out.checkpoint_id = j.value("checkpoint", std::string{});
    out.manifest_id = j.value("manifest", std::string{});
    out.seed = j.value("seed", std::uint64_t{0});
    out.trained_pairs = j.value("trained_pairs", std::vector<std::string>{});
    for (const auto& [pair, entry] : j.at("pairs").items()) {
      PairEval p;
      p.pair = pair;
      p.bleu_score = entry.at("bleu").get<double>();
      p.accuracy = entry.at("accuracy").get<double>();
      p.examples = entry.at("examples").get<std::int64_t>();
      out.pairs.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed evaluation report: " + std::string(e.what()));
  }
  return out;
}

double TransferMatrix::at(std::size_t row, std::size_t col) const {
  if (row >= finetuned.size() || col >= evaluated.size()) {
    throw ContractError("transfer matrix index out of range");
  }
  return delta[row * evaluated.size() + col];
}

namespace {

void check_compatible(const ModelConfig& a, const ModelConfig& b) {
  if (a.n_layers != b.n_layers || a.d_model != b.d_model || a.d_ff != b.d_ff ||
      a.n_heads != b.n_heads || a.vocab_size != b.vocab_size || a.max_seq_len != b.max_seq_len) {
    throw ContractError("checkpoint configurations are incompatible");
  }
}

double score_testset(const TransformerModel& model, const PairTestset& testset,
                     const RoutingPlan* routing, Metric metric, const EvalOptions& opts) {
  if (metric == Metric::kAccuracy) {
    return corpus_accuracy(model, testset.rows, testset.pair, routing, opts.batch_size);
  }
  EvalOptions o = opts;
  o.routing = routing;
  return corpus_bleu(model, testset.rows, o);
}

}  // namespace

TransferMatrix forgetting_matrix(const TransformerModel& base,
                                 const std::vector<FinetunedCheckpoint>& finetuned,
                                 const std::vector<PairTestset>& testsets, Metric metric,
                                 const EvalOptions& opts) {
  if (testsets.empty()) throw ContractError("forgetting matrix needs at least one testset");
  for (const FinetunedCheckpoint& fc : finetuned) {
    if (fc.model == nullptr) throw ContractError("null finetuned checkpoint");
    check_compatible(base.config(), fc.model->config());
  }
  std::vector<double> plain_base(testsets.size(), 0.0);
  std::vector<bool> have_plain(testsets.size(), false);

  TransferMatrix out;
  for (const FinetunedCheckpoint& fc : finetuned) out.finetuned.push_back(fc.pair);
  for (const PairTestset& ts : testsets) out.evaluated.push_back(ts.pair);
  out.delta.reserve(finetuned.size() * testsets.size());
  for (const FinetunedCheckpoint& fc : finetuned) {
    for (std::size_t c = 0; c < testsets.size(); ++c) {
      if (fc.partition != nullptr) {
        const auto [la, lb] = split_pair_tag(testsets[c].pair);
        const RoutingPlan plan =
            build_routing_plan(fc.model->config(), *fc.partition, la, lb,
                               serving_layers(*fc.partition, testsets[c].pair));
        out.delta.push_back(score_testset(*fc.model, testsets[c], &plan, metric, opts) -
                            score_testset(base, testsets[c], &plan, metric, opts));
      } else {
        if (!have_plain[c]) {
          plain_base[c] = score_testset(base, testsets[c], nullptr, metric, opts);
          have_plain[c] = true;
        }
        out.delta.push_back(score_testset(*fc.model, testsets[c], nullptr, metric, opts) -
                            plain_base[c]);
      }
    }
  }
  return out;
}

TransferMatrix transfer_from_reports(const EvalReport& base,
                                     const std::vector<EvalReport>& finetuned, Metric metric) {
  if (base.pairs.empty()) throw ContractError("base report has no pairs");
  auto value = [&](const PairEval& p) {
    return metric == Metric::kAccuracy ? p.accuracy : p.bleu_score;
  };
  TransferMatrix out;
  for (const PairEval& p : base.pairs) out.evaluated.push_back(p.pair);
  for (const EvalReport& r : finetuned) {
    out.finetuned.push_back(r.trained_pairs.size() == 1 ? r.trained_pairs[0] : r.checkpoint_id);
    for (const PairEval& bp : base.pairs) {
      auto it = std::find_if(r.pairs.begin(), r.pairs.end(),
                             [&](const PairEval& p) { return p.pair == bp.pair; });
      if (it == r.pairs.end()) {
        throw DataError("report " + r.checkpoint_id + " is missing pair " + bp.pair);
      }
      out.delta.push_back(value(*it) - value(bp));
    }
  }
  return out;
}

void write_transfer_csv(const std::string& path, const TransferMatrix& matrix) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write transfer matrix: " + path);
  f << "finetuned";
  for (const std::string& pair : matrix.evaluated) f << ',' << pair;
  f << '\n';
  char buf[64];
  for (std::size_t r = 0; r < matrix.finetuned.size(); ++r) {
    f << matrix.finetuned[r];
    for (std::size_t c = 0; c < matrix.evaluated.size(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", matrix.at(r, c));
      f << ',' << buf;
    }
    f << '\n';
  }
}

}  // namespace langroute
