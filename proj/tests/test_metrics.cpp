#include "langroute/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "langroute/corpus.hpp"
#include "langroute/errors.hpp"

using namespace langroute;

namespace {

// Hand-built network computing next-token = pi(current token): one-hot
// embeddings, dead block (all zeros), final norm, permutation head.
TransformerModel perm_model(const std::vector<int>& pi) {
  const int v = static_cast<int>(pi.size());
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = v;
  cfg.d_ff = 16;
  cfg.n_heads = 1;
  cfg.vocab_size = v;
  cfg.max_seq_len = 16;
  TransformerModel m(cfg);
  Tensor& emb = m.param("tok_emb").value;
  for (int t = 0; t < v; ++t) emb.at2(t, t) = 1.0;
  Tensor& gain = m.param("lnf.g").value;
  std::fill(gain.data.begin(), gain.data.end(), 1.0);
  Tensor& head = m.param("head").value;
  for (int d = 0; d < v; ++d) head.at2(d, pi[d]) = 1.0;
  return m;
}

// identity except 3 -> 4 -> 5 -> 6 -> 3, and 7 -> <eos>
const std::vector<int> kPi{0, 1, 2, 4, 5, 6, 3, 2, 8, 9};

// Independent direct-formula scorer: sorted n-gram multisets intersected by a
// two-pointer merge, geometric mean via a product.
double bleu_oracle(const std::vector<std::vector<int>>& hyps,
                   const std::vector<std::vector<int>>& refs, bool add_one) {
  auto ngrams = [](const std::vector<int>& s, int n) {
    std::vector<std::vector<int>> grams;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i) {
      grams.emplace_back(s.begin() + static_cast<std::ptrdiff_t>(i),
                         s.begin() + static_cast<std::ptrdiff_t>(i) + n);
    }
    std::sort(grams.begin(), grams.end());
    return grams;
  };
  long long c = 0, r = 0;
  for (const auto& h : hyps) c += static_cast<long long>(h.size());
  for (const auto& f : refs) r += static_cast<long long>(f.size());
  double product = 1.0;
  for (int n = 1; n <= 4; ++n) {
    long long match = 0, total = 0;
    for (std::size_t s = 0; s < hyps.size(); ++s) {
      auto hg = ngrams(hyps[s], n);
      auto rg = ngrams(refs[s], n);
      total += static_cast<long long>(hg.size());
      std::size_t i = 0, j = 0;
      while (i < hg.size() && j < rg.size()) {
        if (hg[i] == rg[j]) {
          ++match;
          ++i;
          ++j;
        } else if (hg[i] < rg[j]) {
          ++i;
        } else {
          ++j;
        }
      }
    }
    double p;
    if (add_one && n > 1) {
      p = static_cast<double>(match + 1) / static_cast<double>(total + 1);
    } else {
      p = total > 0 ? static_cast<double>(match) / static_cast<double>(total) : 0.0;
    }
    if (p == 0.0) return 0.0;
    product *= p;
  }
  if (c == 0) return 0.0;
  const double bp = c > r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return 100.0 * bp * std::pow(product, 0.25);
}

}  // namespace

TEST_CASE("greedy decoding walks the constructed permutation") {
  TransformerModel m = perm_model(kPi);
  CHECK(decode(m, {3}, 3) == std::vector<int>{4, 5, 6});
  CHECK(decode(m, {3}, 6) == std::vector<int>{4, 5, 6, 3, 4, 5});
  CHECK(decode(m, {1, 9, 3}, 2) == std::vector<int>{4, 5});
  CHECK(decode(m, {7}, 5).empty());  // eos comes first
  CHECK(decode(m, {3}, 0).empty());
  CHECK(decode(m, {3}, 3) == decode(m, {3}, 3));

  CHECK_THROWS_AS(decode(m, {}, 3), ContractError);
  CHECK_THROWS_AS(decode(m, {3}, -1), ContractError);
  CHECK_THROWS_AS(decode(m, std::vector<int>(10, 3), 7), ContractError);
}

TEST_CASE("bleu hand cases") {
  using V = std::vector<std::vector<int>>;
  CHECK(bleu(V{{1, 2, 3, 4}}, V{{1, 2, 3, 4}}) == 100.0);
  CHECK(bleu(V{{1, 2, 3, 4, 5}}, V{{1, 2, 3, 4, 6}}) ==
        doctest::Approx(100.0 * std::pow(0.2, 0.25)).epsilon(1e-12));
  // disjoint vocabularies: zero unigram precision
  CHECK(bleu(V{{1, 2, 3, 4}}, V{{5, 6, 7, 8}}) == 0.0);
  // shared trigrams but no 4-gram anywhere
  CHECK(bleu(V{{1, 2, 3, 9, 4, 5, 6}}, V{{1, 2, 3, 4, 5, 6, 7}}) == 0.0);
  BleuOptions smooth;
  smooth.add_one = true;
  CHECK(bleu(V{{1, 2, 3, 9, 4, 5, 6}}, V{{1, 2, 3, 4, 5, 6, 7}}, smooth) > 0.0);
  // clipping: five 7s earn at most the reference's two
  CHECK(bleu(V{{7, 7, 7, 7, 7}}, V{{7, 7}}) == 0.0);
  CHECK(bleu(V{{7, 7, 7, 7, 7}}, V{{7, 7}}, smooth) ==
        doctest::Approx(100.0 * std::pow(0.4 * 0.4 * 0.25 * (1.0 / 3.0), 0.25)).epsilon(1e-12));
  // brevity penalty at two-thirds length
  CHECK(bleu(V{{1, 2, 3, 4}}, V{{1, 2, 3, 4, 5, 6}}) ==
        doctest::Approx(std::exp(1.0 - 1.5) * 100.0 * std::pow((4.0 / 4.0) * (3.0 / 3.0) *
                                                                   (2.0 / 2.0) * (1.0 / 1.0),
                                                               0.25))
            .epsilon(1e-12));

  CHECK_THROWS_AS(bleu({}, {}), ContractError);
  CHECK_THROWS_AS(bleu(V{{1}}, V{{1}, {2}}), ContractError);
  CHECK_THROWS_AS(bleu(V{{1}}, V{{}}), ContractError);
}

TEST_CASE("bleu matches an independent brute-force oracle on random corpora") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const int n_sent = 1 + static_cast<int>(rng() % 5);
    std::vector<std::vector<int>> hyps, refs;
    for (int s = 0; s < n_sent; ++s) {
      const int hn = static_cast<int>(rng() % 13);
      const int rn = 1 + static_cast<int>(rng() % 12);
      std::vector<int> h(static_cast<std::size_t>(hn)), r(static_cast<std::size_t>(rn));
      for (int& t : h) t = 1 + static_cast<int>(rng() % 6);
      for (int& t : r) t = 1 + static_cast<int>(rng() % 6);
      hyps.push_back(std::move(h));
      refs.push_back(std::move(r));
    }
    BleuOptions opts;
    opts.add_one = trial % 2 == 1;
    const double got = bleu(hyps, refs, opts);
    const double want = bleu_oracle(hyps, refs, opts.add_one);
    CHECK(std::abs(got - want) < 1e-9);
    CHECK(got >= 0.0);
    CHECK(got <= 100.0 + 1e-12);
  }
}

TEST_CASE("token accuracy counts teacher-forced argmax matches") {
  TransformerModel m = perm_model(kPi);
  Batch b;
  b.rows = 1;
  b.cols = 4;
  b.tokens = {3, 4, 5, 9};
  b.mask = {0, 1, 1, 1};
  b.pair = "x-y";
  CHECK(token_accuracy(m, b) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

  Batch first_masked = b;
  first_masked.mask = {1, 1, 1, 1};
  CHECK_THROWS_AS(token_accuracy(m, first_masked), ContractError);
  Batch no_mask = b;
  no_mask.mask = {0, 0, 0, 0};
  CHECK_THROWS_AS(token_accuracy(m, no_mask), DataError);
}

TEST_CASE("pair evaluation scores the oracle walk perfectly") {
  TransformerModel m = perm_model(kPi);
  std::vector<BatchRow> rows;
  BatchRow r1;
  r1.tokens = {3, 4, 5, 6, 3, 2};
  r1.mask = {0, 1, 1, 1, 1, 1};
  r1.prompt_len = 1;
  BatchRow r2;
  r2.tokens = {4, 5, 6, 3, 4, 2};
  r2.mask = {0, 1, 1, 1, 1, 1};
  r2.prompt_len = 1;
  rows.push_back(r1);
  rows.push_back(r2);

  EvalOptions opts;
  opts.max_new = 4;
  PairEval pe = evaluate_pair(m, "x-y", rows, opts);
  CHECK(pe.pair == "x-y");
  CHECK(pe.examples == 2);
  CHECK(pe.bleu_score == 100.0);
  // the model never emits <eos>, so the terminator target misses
  CHECK(pe.accuracy == doctest::Approx(8.0 / 10.0).epsilon(1e-15));

  CHECK_THROWS_AS(evaluate_pair(m, "x-y", {}, opts), ContractError);
}

TEST_CASE("forgetting matrix is zero against the base itself") {
  LanguageFamily fam = make_language_family(3, 32, 31);
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.d_ff = 16;
  cfg.n_heads = 2;
  cfg.vocab_size = fam.vocab.size();
  cfg.max_seq_len = 40;
  cfg.seed = 8;
  TransformerModel base(cfg);
  base.init_params();

  auto testset = [&](const std::string& a, const std::string& b, std::uint64_t seed) {
    PairTestset ts;
    ts.pair = a + "-" + b;
    for (const ParallelExample& ex : gen_parallel(fam, a, b, 6, seed)) {
      ts.rows.push_back(apply_template(fam, ex, 1, 0, cfg.max_seq_len));
    }
    return ts;
  };
  std::vector<PairTestset> testsets;
  testsets.push_back(testset(fam.langs[0].code, fam.langs[1].code, 41));
  testsets.push_back(testset(fam.langs[0].code, fam.langs[2].code, 42));

  // A real manifest so the selective row serves every pair routed; base vs
  // base must still cancel exactly through the routed architecture.
  NeuronPartition np;
  np.epsilon = 0.5;
  np.languages = {fam.langs[0].code, fam.langs[1].code, fam.langs[2].code};
  LayerPartition lp;
  for (int i = 0; i < 8; ++i) lp.general.push_back(i);
  lp.specific[np.languages[0]] = {8, 9, 10};
  lp.specific[np.languages[1]] = {11, 12};
  lp.specific[np.languages[2]] = {13, 14, 15};
  for (const std::string& lg : np.languages) {
    std::vector<double> phi(static_cast<std::size_t>(cfg.d_ff), 0.1);
    for (int i = 0; i < cfg.d_ff; ++i) phi[static_cast<std::size_t>(i)] += 0.01 * i;
    lp.phi[lg] = phi;
  }
  lp.variance.assign(static_cast<std::size_t>(cfg.d_ff), 0.0);
  np.layers[0] = lp;
  np.pair_layers[testsets[0].pair] = {0};

  std::vector<FinetunedCheckpoint> ckpts;
  ckpts.push_back({testsets[0].pair, &base, nullptr});
  ckpts.push_back({testsets[0].pair, &base, &np});
  TransferMatrix tm = forgetting_matrix(base, ckpts, testsets, Metric::kAccuracy);
  CHECK(tm.finetuned.size() == 2);
  CHECK(tm.evaluated.size() == 2);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 2; ++c) CHECK(tm.at(r, c) == 0.0);
  }
  CHECK_THROWS_AS(tm.at(2, 0), ContractError);

  ModelConfig other = cfg;
  other.d_model = 32;
  TransformerModel incompatible(other);
  incompatible.init_params();
  std::vector<FinetunedCheckpoint> bad;
  bad.push_back({testsets[0].pair, &incompatible, nullptr});
  CHECK_THROWS_AS(forgetting_matrix(base, bad, testsets), ContractError);
}

TEST_CASE("transfer assembles from stored reports") {
  EvalReport base;
  base.checkpoint_id = "base";
  base.pairs.push_back({"aa-bb", 10.0, 0.5, 100});
  base.pairs.push_back({"aa-cc", 20.0, 0.6, 100});

  EvalReport tuned;
  tuned.checkpoint_id = "ckpt-aa-bb";
  tuned.trained_pairs = {"aa-bb"};
  tuned.pairs.push_back({"aa-bb", 15.0, 0.7, 100});
  tuned.pairs.push_back({"aa-cc", 18.0, 0.55, 100});

  TransferMatrix tm = transfer_from_reports(base, {tuned}, Metric::kAccuracy);
  REQUIRE(tm.finetuned == std::vector<std::string>{"aa-bb"});
  REQUIRE(tm.evaluated == std::vector<std::string>{"aa-bb", "aa-cc"});
  CHECK(tm.at(0, 0) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(tm.at(0, 1) == doctest::Approx(-0.05).epsilon(1e-12));

  TransferMatrix bm = transfer_from_reports(base, {tuned}, Metric::kBleu);
  CHECK(bm.at(0, 0) == doctest::Approx(5.0).epsilon(1e-12));

  EvalReport missing = tuned;
  missing.pairs.pop_back();
  CHECK_THROWS_AS(transfer_from_reports(base, {missing}, Metric::kAccuracy), DataError);

  const std::string path =
      (std::filesystem::temp_directory_path() / "langroute_transfer.csv").string();
  write_transfer_csv(path, tm);
  std::ifstream f(path);
  std::string line;
  REQUIRE(std::getline(f, line));
  CHECK(line == "finetuned,aa-bb,aa-cc");
  REQUIRE(std::getline(f, line));
  CHECK(line.rfind("aa-bb,", 0) == 0);
  std::filesystem::remove(path);
}

TEST_CASE("evaluation reports round-trip through json") {
  EvalReport rep;
  rep.checkpoint_id = "ckpt.bin";
  rep.manifest_id = "manifest.json";
  rep.seed = 123;
  rep.trained_pairs = {"aa-bb"};
  rep.pairs.push_back({"aa-bb", 42.5, 0.875, 64});
  rep.pairs.push_back({"bb-cc", 0.0, 0.25, 32});

  EvalReport back = eval_report_from_json(eval_report_to_json(rep));
  CHECK(back.checkpoint_id == rep.checkpoint_id);
  CHECK(back.manifest_id == rep.manifest_id);
  CHECK(back.seed == rep.seed);
  CHECK(back.trained_pairs == rep.trained_pairs);
  REQUIRE(back.pairs.size() == 2);
  CHECK(back.pairs[0].pair == "aa-bb");
  CHECK(back.pairs[0].bleu_score == 42.5);
  CHECK(back.pairs[0].accuracy == 0.875);
  CHECK(back.pairs[0].examples == 64);

  CHECK_THROWS_AS(eval_report_from_json("not json"), DataError);
}
