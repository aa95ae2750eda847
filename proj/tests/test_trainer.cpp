#include "langroute/trainer.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "doctest.h"
#include "langroute/corpus.hpp"
#include "langroute/errors.hpp"
#include "langroute/router.hpp"
#include "langroute/tape.hpp"

using namespace langroute;

namespace {

// A small synthetic partition over both layers of a 2-layer model: units
// 0..n_general-1 general, one specific unit per language, the rest unactivated.
NeuronPartition toy_partition(int d_ff, const std::vector<std::string>& langs,
                              int n_general = 0) {
  NeuronPartition part;
  part.epsilon = 0.5;
  part.languages = langs;
  if (n_general == 0) n_general = d_ff / 2;
  for (int layer : {0, 1}) {
    LayerPartition lp;
    for (int i = 0; i < n_general; ++i) lp.general.push_back(i);
    for (std::size_t l = 0; l < langs.size(); ++l) {
      const int unit = n_general + static_cast<int>(l);
      if (unit < d_ff) lp.specific[langs[l]] = {unit};
    }
    lp.variance.assign(static_cast<std::size_t>(d_ff), 0.0);
    for (const std::string& lang : langs) {
      std::vector<double> phi(static_cast<std::size_t>(d_ff), 0.1);
      auto it = lp.specific.find(lang);
      if (it != lp.specific.end()) {
        for (int unit : it->second) phi[static_cast<std::size_t>(unit)] = 1.0;
      }
      lp.phi[lang] = std::move(phi);
    }
    part.layers[layer] = lp;
  }
  for (std::size_t i = 0; i < langs.size(); ++i) {
    for (std::size_t j = i + 1; j < langs.size(); ++j) {
      part.pair_layers[langs[i] + "-" + langs[j]] = {0, 1};
    }
  }
  return part;
}

struct Fixture {
  LanguageFamily fam;
  ModelConfig cfg;
  NeuronPartition part;

  Fixture() : fam(make_language_family(3, 32, 7)) {
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.d_ff = 16;
    cfg.n_heads = 2;
    cfg.vocab_size = fam.vocab.size();
    cfg.max_seq_len = 40;
    cfg.seed = 5;
    std::vector<std::string> codes;
    for (const Language& l : fam.langs) codes.push_back(l.code);
    part = toy_partition(cfg.d_ff, codes);
  }

  std::vector<BatchRow> rows(const std::string& src, const std::string& tgt, int n,
                             std::uint64_t seed) const {
    std::vector<BatchRow> out;
    auto examples = gen_parallel(fam, src, tgt, n, seed);
    for (std::size_t i = 0; i < examples.size(); ++i) {
      out.push_back(apply_template(fam, examples[i], -1, seed + i, cfg.max_seq_len));
    }
    return out;
  }
};

}  // namespace

TEST_CASE("update mask covers exactly the chosen units' parameters") {
  Fixture fx;
  TransformerModel m(fx.cfg);
  m.init_params();
  const std::string pair = fx.fam.langs[0].code + "-" + fx.fam.langs[1].code;

  UpdateMask um = build_update_mask(m, fx.part, pair, {0});
  // general 8 + one specific unit per pair language
  const std::int64_t g = 8 + 2;
  CHECK(um.true_count() == g * fx.cfg.d_model + g + g * fx.cfg.d_model);
  CHECK(um.mask.count("layers.0.ffn.w1") == 1);
  CHECK(um.mask.count("layers.0.ffn.b1") == 1);
  CHECK(um.mask.count("layers.0.ffn.w2") == 1);
  CHECK(um.mask.count("layers.0.ffn.b2") == 0);
  CHECK(um.mask.count("layers.1.ffn.w1") == 0);
  CHECK(um.mask.count("tok_emb") == 0);
  CHECK(um.mask.count("layers.0.attn.wq") == 0);

  // two pairs with disjoint specific units differ only at specific coordinates
  const std::string other = fx.fam.langs[0].code + "-" + fx.fam.langs[2].code;
  UpdateMask ua = build_update_mask(m, fx.part, pair, {0, 1});
  UpdateMask ub = build_update_mask(m, fx.part, other, {0, 1});
  std::map<int, std::set<int>> spec_units;
  for (int layer : {0, 1}) {
    std::set<int> s;
    for (const Language& l : fx.fam.langs) {
      for (int u : fx.part.layers.at(layer).specific.at(l.code)) s.insert(u);
    }
    spec_units[layer] = s;
  }
  for (const auto& [name, va] : ua.mask) {
    const auto& vb = ub.mask.at(name);
    ParamSelection spec_sel = param_groups(m, {0, 1}, spec_units);
    std::set<std::int64_t> spec_coords(spec_sel.coords[name].begin(),
                                       spec_sel.coords[name].end());
    for (std::size_t i = 0; i < va.size(); ++i) {
      if (va[i] != vb[i]) CHECK(spec_coords.count(static_cast<std::int64_t>(i)) == 1);
    }
  }

  CHECK_THROWS_AS(build_update_mask(m, fx.part, pair, {5}), ContractError);
  NeuronPartition empty_part = fx.part;
  for (auto& [layer, lp] : empty_part.layers) {
    lp.general.clear();
    lp.specific.clear();
  }
  CHECK_THROWS_AS(build_update_mask(m, empty_part, pair, {0}), ContractError);
}

TEST_CASE("routed gradients stay inside the update mask on neuron-owned parameters") {
  Fixture fx;
  TransformerModel m(fx.cfg);
  m.init_params();
  const std::string a = fx.fam.langs[0].code, b = fx.fam.langs[1].code;
  const std::string pair = a + "-" + b;
  UpdateMask um = build_update_mask(m, fx.part, pair, {0, 1});
  RoutingPlan plan = build_routing_plan(fx.cfg, fx.part, a, b);

  Batch batch = rows_to_batch(fx.rows(a, b, 6, 3), pair);
  Tape tape;
  ForwardOptions opts;
  opts.routing = &plan;
  ForwardResult fr = forward(m, batch, {}, tape, opts);
  tape.backward(lm_loss_node(tape, fr, batch));

  for (int layer : {0, 1}) {
    for (const std::string& leaf : {std::string("ffn.w1"), std::string("ffn.b1"),
                                    std::string("ffn.w2")}) {
      const std::string name = TransformerModel::layer_param_name(layer, leaf);
      const Tensor& g = tape.grad(fr.param_nodes.at(name));
      const auto& mvec = um.mask.at(name);
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        if (g.data[i] != 0.0) CHECK(mvec[i] == 1);
      }
    }
  }
}

TEST_CASE("finetuning freezes everything outside the mask bit-exactly") {
  Fixture fx;
  TransformerModel m(fx.cfg);
  m.init_params();
  const std::string pair = fx.fam.langs[0].code + "-" + fx.fam.langs[1].code;
  std::map<std::string, Tensor> before;
  for (const Param& p : m.params()) before.emplace(p.name, p.value);

  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 4;
  tc.grad_accum_steps = 2;
  tc.epochs = 2;
  tc.seed = 11;
  TrainResult res = finetune_pair(m, pair, fx.rows(fx.fam.langs[0].code, fx.fam.langs[1].code, 24, 5),
                                  fx.part, tc);
  CHECK(res.steps == 12);     // 24 rows / batch 4 = 6 micro-batches per epoch
  CHECK(res.updates == 6);    // accumulation pairs them up
  CHECK(res.log.size() == 12);

  UpdateMask um = build_update_mask(m, fx.part, pair, fx.part.pair_layers.at(pair));
  std::int64_t changed = 0;
  for (const Param& p : m.params()) {
    const Tensor& old = before.at(p.name);
    for (std::size_t i = 0; i < p.value.data.size(); ++i) {
      if (um.at(p.name, static_cast<std::int64_t>(i))) {
        changed += p.value.data[i] != old.data[i];
      } else {
        CHECK(p.value.data[i] == old.data[i]);  // exact freeze
      }
    }
  }
  CHECK(changed > 0);
}

TEST_CASE("zero training steps leave the model bit-identical") {
  Fixture fx;
  TransformerModel m(fx.cfg);
  m.init_params();
  std::map<std::string, Tensor> before;
  for (const Param& p : m.params()) before.emplace(p.name, p.value);

  const std::string pair = fx.fam.langs[0].code + "-" + fx.fam.langs[1].code;
  TrainConfig tc;
  TrainResult res = finetune_pair(m, pair, {}, fx.part, tc);
  CHECK(res.steps == 0);
  CHECK(res.updates == 0);
  TrainResult full = full_finetune(m, {}, tc);
  CHECK(full.steps == 0);
  for (const Param& p : m.params()) {
    for (std::size_t i = 0; i < p.value.data.size(); ++i) {
      CHECK(p.value.data[i] == before.at(p.name).data[i]);
    }
  }
}

TEST_CASE("training is a deterministic function of seed, data and config") {
  Fixture fx;
  const std::string pair = fx.fam.langs[0].code + "-" + fx.fam.langs[1].code;
  auto rows = fx.rows(fx.fam.langs[0].code, fx.fam.langs[1].code, 16, 21);
  TrainConfig tc;
  tc.learning_rate = 5e-4;
  tc.batch_size = 4;
  tc.grad_accum_steps = 2;
  tc.seed = 77;

  TransformerModel m1(fx.cfg), m2(fx.cfg);
  m1.init_params();
  m2.init_params();
  TrainResult r1 = finetune_pair(m1, pair, rows, fx.part, tc);
  TrainResult r2 = finetune_pair(m2, pair, rows, fx.part, tc);
  REQUIRE(r1.log.size() == r2.log.size());
  for (std::size_t i = 0; i < r1.log.size(); ++i) CHECK(r1.log[i].loss == r2.log[i].loss);
  for (std::size_t p = 0; p < m1.params().size(); ++p) {
    const Tensor& a = m1.params()[p].value;
    const Tensor& c = m2.params()[p].value;
    for (std::size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == c.data[i]);
  }
}

TEST_CASE("optimizer follows the decoupled-decay moment formula") {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 4;
  cfg.d_ff = 16;
  cfg.n_heads = 1;
  cfg.vocab_size = 5;
  cfg.max_seq_len = 8;
  TransformerModel m(cfg);
  for (Param& p : m.params()) std::fill(p.value.data.begin(), p.value.data.end(), 1.0);

  TrainConfig tc;
  tc.learning_rate = 0.1;
  MaskedAdamW opt(tc);

  UpdateMask um;
  um.mask["layers.0.ffn.w1"].assign(m.param("layers.0.ffn.w1").value.data.size(), 0);
  um.mask["layers.0.ffn.w1"][0] = 1;
  um.mask["layers.0.ffn.b1"].assign(m.param("layers.0.ffn.b1").value.data.size(), 0);
  um.mask["layers.0.ffn.b1"][0] = 1;

  std::map<std::string, Tensor> grads;
  grads.emplace("layers.0.ffn.w1", Tensor::full({4, 16}, 0.5));
  grads.emplace("layers.0.ffn.b1", Tensor::full({16}, 0.5));

  auto expected = [&](double w, double g, std::int64_t t, double& m1, double& v1, bool decay) {
    m1 = tc.beta1 * m1 + (1.0 - tc.beta1) * g;
    v1 = tc.beta2 * v1 + (1.0 - tc.beta2) * g * g;
    const double mhat = m1 / (1.0 - std::pow(tc.beta1, static_cast<double>(t)));
    const double vhat = v1 / (1.0 - std::pow(tc.beta2, static_cast<double>(t)));
    return w - tc.learning_rate * (mhat / (std::sqrt(vhat) + tc.eps) + (decay ? tc.weight_decay * w : 0.0));
  };

  double mw = 0.0, vw = 0.0, mb = 0.0, vb = 0.0;
  double w_want = expected(1.0, 0.5, 1, mw, vw, true);
  double b_want = expected(1.0, 0.5, 1, mb, vb, false);
  opt.apply(m, um, grads, 1);
  CHECK(m.param("layers.0.ffn.w1").value.data[0] == doctest::Approx(w_want).epsilon(1e-15));
  CHECK(m.param("layers.0.ffn.b1").value.data[0] == doctest::Approx(b_want).epsilon(1e-15));
  CHECK(m.param("layers.0.ffn.w1").value.data[1] == 1.0);  // unmasked untouched
  CHECK(opt.state_size() == 2);

  // second step keeps per-coordinate bias-correction history
  w_want = expected(w_want, 0.25, 2, mw, vw, true);
  std::map<std::string, Tensor> grads2;
  grads2.emplace("layers.0.ffn.w1", Tensor::full({4, 16}, 0.5));
  grads2.emplace("layers.0.ffn.b1", Tensor::full({16}, 0.5));
  opt.apply(m, um, grads2, 2);  // sums divided by two micro-batches
  CHECK(m.param("layers.0.ffn.w1").value.data[0] == doctest::Approx(w_want).epsilon(1e-14));

  // zero gradient: vectors hold still, matrices only decay
  UpdateMask um2;
  um2.mask["layers.0.ffn.b1"].assign(m.param("layers.0.ffn.b1").value.data.size(), 0);
  um2.mask["layers.0.ffn.b1"][5] = 1;
  um2.mask["layers.0.ffn.w2"].assign(m.param("layers.0.ffn.w2").value.data.size(), 0);
  um2.mask["layers.0.ffn.w2"][3] = 1;
  MaskedAdamW opt2(tc);
  opt2.apply(m, um2, {}, 1);
  CHECK(m.param("layers.0.ffn.b1").value.data[5] == 1.0);
  CHECK(m.param("layers.0.ffn.w2").value.data[3] ==
        doctest::Approx(1.0 - tc.learning_rate * tc.weight_decay).epsilon(1e-15));

  // retain drops everything outside the keep set
  opt.retain({{"layers.0.ffn.w1", {0}}});
  CHECK(opt.state_size() == 1);
  opt.retain({});
  CHECK(opt.state_size() == 0);

  CHECK_THROWS_AS(opt.apply(m, um, grads, 0), ContractError);
}

TEST_CASE("multi-pair schedules alternate or serialize per the flag") {
  Fixture fx;
  const std::string a = fx.fam.langs[0].code, b = fx.fam.langs[1].code, c = fx.fam.langs[2].code;
  std::vector<PairDataset> data;
  data.push_back({a + "-" + b, fx.rows(a, b, 8, 31)});
  data.push_back({a + "-" + c, fx.rows(a, c, 8, 32)});

  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 4;
  tc.grad_accum_steps = 1;
  tc.seed = 9;

  TransformerModel m(fx.cfg);
  m.init_params();
  std::map<std::string, Tensor> before;
  for (const Param& p : m.params()) before.emplace(p.name, p.value);
  TrainResult rr = finetune_pairs(m, data, fx.part, tc);
  REQUIRE(rr.log.size() == 4);
  CHECK(rr.log[0].pair == data[0].pair);
  CHECK(rr.log[1].pair == data[1].pair);
  CHECK(rr.log[2].pair == data[0].pair);
  CHECK(rr.log[3].pair == data[1].pair);

  // union freeze: attention and embeddings still bit-identical
  for (const std::string& name : {std::string("tok_emb"), std::string("layers.0.attn.wq"),
                                  std::string("layers.1.ffn.b2")}) {
    const Tensor& now = m.param(name).value;
    for (std::size_t i = 0; i < now.data.size(); ++i) CHECK(now.data[i] == before.at(name).data[i]);
  }

  TransformerModel ms(fx.cfg);
  ms.init_params();
  TrainResult rs = finetune_pairs(ms, data, fx.part, tc, true);
  REQUIRE(rs.log.size() == 4);
  CHECK(rs.log[0].pair == data[0].pair);
  CHECK(rs.log[1].pair == data[0].pair);
  CHECK(rs.log[2].pair == data[1].pair);
  CHECK(rs.log[3].pair == data[1].pair);
}

// Selective training presumes a pretrained backbone: the frozen embeddings,
// attention and head must already carry signal for the masked FFN updates to
// steer. From scratch the loss barely moves; from a short full-training warm
// start it falls well below the 60% mark.
TEST_CASE("selective training reduces the loss on a toy pair") {
  LanguageFamily fam = make_language_family(2, 32, 17);
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.d_ff = 32;
  cfg.n_heads = 2;
  cfg.vocab_size = fam.vocab.size();
  cfg.max_seq_len = 40;
  cfg.seed = 3;
  TransformerModel m(cfg);
  m.init_params();

  std::vector<std::string> codes{fam.langs[0].code, fam.langs[1].code};
  const std::string pair = codes[0] + "-" + codes[1];
  auto make_rows = [&](std::uint64_t seed) {
    std::vector<BatchRow> rows;
    auto examples = gen_parallel(fam, codes[0], codes[1], 160, seed);
    for (std::size_t i = 0; i < examples.size(); ++i) {
      rows.push_back(apply_template(fam, examples[i], -1, 100 + i, cfg.max_seq_len));
    }
    return rows;
  };

  TrainConfig pre;
  pre.learning_rate = 3e-3;
  pre.batch_size = 8;
  pre.grad_accum_steps = 2;
  pre.epochs = 100;
  pre.seed = 7;
  pre.max_steps = 500;
  TrainResult warm = full_finetune(m, make_rows(5), pre);
  CHECK(warm.log.front().loss == doctest::Approx(std::log(fam.vocab.size())).epsilon(0.15));

  NeuronPartition part = toy_partition(cfg.d_ff, codes, 28);
  TrainConfig tc = pre;
  tc.seed = 41;
  TrainResult res = finetune_pair(m, pair, make_rows(23), part, tc);
  REQUIRE(res.log.size() >= 100);
  const double first = res.log.front().loss;
  double tail = 0.0;
  for (std::size_t i = res.log.size() - 20; i < res.log.size(); ++i) tail += res.log[i].loss;
  tail /= 20.0;
  CHECK(tail < 0.6 * first);
}

TEST_CASE("non-finite losses abort with the offending step") {
  Fixture fx;
  TransformerModel m(fx.cfg);
  m.init_params();

  // an absurd learning rate blows the parameters up after the first update,
  // so the first micro-batch of the second block overflows
  const std::string pair = fx.fam.langs[0].code + "-" + fx.fam.langs[1].code;
  TrainConfig tc;
  tc.learning_rate = 1e155;
  tc.batch_size = 4;
  tc.grad_accum_steps = 2;
  tc.epochs = 4;
  bool caught = false;
  try {
    finetune_pair(m, pair, fx.rows(fx.fam.langs[0].code, fx.fam.langs[1].code, 16, 2), fx.part, tc);
  } catch (const NumericError& e) {
    caught = true;
    CHECK(std::string(e.what()).find("training step 3") != std::string::npos);
  }
  CHECK(caught);
}

TEST_CASE("train config rejects degenerate values") {
  TrainConfig tc;
  tc.learning_rate = 0.0;
  CHECK_THROWS_AS(tc.validate(), ContractError);
  tc = TrainConfig{};
  tc.grad_accum_steps = 0;
  CHECK_THROWS_AS(tc.validate(), ContractError);
  tc = TrainConfig{};
  tc.beta2 = 1.0;
  CHECK_THROWS_AS(tc.validate(), ContractError);
  tc = TrainConfig{};
  CHECK_NOTHROW(tc.validate());
  CHECK(tc.learning_rate == 5e-5);
  CHECK(tc.batch_size == 8);
  CHECK(tc.grad_accum_steps == 10);
  CHECK(tc.epochs == 1);
}
