#include "langroute/model.hpp"

#include <cmath>
#include <random>
#include <string>

#include "langroute/errors.hpp"

namespace langroute {

void ModelConfig::validate() const {
  if (n_layers < 1) throw ContractError("config: n_layers must be >= 1");
  if (n_heads < 1 || d_model < 1 || d_model % n_heads != 0) {
    throw ContractError("config: d_model must be a positive multiple of n_heads");
  }
  if (d_ff < 16) throw ContractError("config: d_ff must be >= 16");
  if (vocab_size < 2) throw ContractError("config: vocab_size must be set");
  if (max_seq_len < 2) throw ContractError("config: max_seq_len must be >= 2");
}

std::int64_t Batch::loss_positions() const {
  std::int64_t n = 0;
  for (std::uint8_t m : mask) n += m ? 1 : 0;
  return n;
}

std::string TransformerModel::layer_param_name(int layer, const std::string& leaf) {
  return "layers." + std::to_string(layer) + "." + leaf;
}

TransformerModel::TransformerModel(ModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::int64_t d = cfg_.d_model, f = cfg_.d_ff, v = cfg_.vocab_size;
  add_param("tok_emb", {v, d});
  add_param("pos_emb", {cfg_.max_seq_len, d});
  for (int j = 0; j < cfg_.n_layers; ++j) {
    add_param(layer_param_name(j, "ln1.g"), {d});
    add_param(layer_param_name(j, "ln1.b"), {d});
    add_param(layer_param_name(j, "attn.wq"), {d, d});
    add_param(layer_param_name(j, "attn.wk"), {d, d});
    add_param(layer_param_name(j, "attn.wv"), {d, d});
    add_param(layer_param_name(j, "attn.wo"), {d, d});
    add_param(layer_param_name(j, "ln2.g"), {d});
    add_param(layer_param_name(j, "ln2.b"), {d});
    add_param(layer_param_name(j, "ffn.w1"), {d, f});
    add_param(layer_param_name(j, "ffn.b1"), {f});
    add_param(layer_param_name(j, "ffn.w2"), {f, d});
    add_param(layer_param_name(j, "ffn.b2"), {d});
  }
  add_param("lnf.g", {d});
  add_param("lnf.b", {d});
  add_param("head", {d, v});
}

void TransformerModel::add_param(std::string name, std::vector<std::int64_t> shape) {
  index_[name] = params_.size();
  params_.push_back(Param{std::move(name), Tensor::zeros(std::move(shape))});
}

Param& TransformerModel::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter " + name);
  return params_[it->second];
}

const Param& TransformerModel::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter " + name);
  return params_[it->second];
}

std::int64_t TransformerModel::num_scalars() const {
  std::int64_t n = 0;
  for (const Param& p : params_) n += p.value.numel();
  return n;
}

void TransformerModel::init_params() {
  std::mt19937_64 rng(cfg_.seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  const double base = 0.02;
  // residual-branch output projections get a depth-scaled init
  const double resid = base / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
  for (Param& p : params_) {
    const std::string& n = p.name;
    const bool is_gamma = n.size() >= 2 && n.substr(n.size() - 2) == ".g" && n.find("ln") != std::string::npos;
    const bool is_bias = (n.size() >= 2 && n.substr(n.size() - 2) == ".b" && n.find("ln") != std::string::npos) ||
                         n.find(".b1") != std::string::npos || n.find(".b2") != std::string::npos;
    if (is_gamma) {
      for (double& x : p.value.data) x = 1.0;
      continue;
    }
    if (is_bias) continue;  // zeros
    const bool is_resid_proj = n.find("attn.wo") != std::string::npos || n.find("ffn.w2") != std::string::npos;
    const double scale = is_resid_proj ? resid : base;
    for (double& x : p.value.data) x = dist(rng) * scale;
  }
}

namespace {

void validate_batch(const TransformerModel& model, const Batch& batch) {
  const ModelConfig& cfg = model.config();
  if (batch.rows < 1 || batch.cols < 1) throw ContractError("batch: empty");
  const std::size_t n = static_cast<std::size_t>(batch.rows * batch.cols);
  if (batch.tokens.size() != n || batch.mask.size() != n) {
    throw ContractError("batch: tokens/mask size does not match rows*cols");
  }
  if (batch.cols > cfg.max_seq_len) {
    throw DataError("batch: sequence length " + std::to_string(batch.cols) +
                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (int t : batch.tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw ContractError("batch: token id " + std::to_string(t) + " out of vocabulary");
    }
  }
}

}  // namespace

ForwardResult forward(const TransformerModel& model, const Batch& batch,
                      const std::set<int>& record_layers, Tape& tape,
                      const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config();
  validate_batch(model, batch);
  for (int j : record_layers) {
    if (j < 0 || j >= cfg.n_layers) {
      throw ContractError("record layer " + std::to_string(j) + " out of range");
    }
  }
  if (opts.routing) {
    for (const auto& [j, r] : opts.routing->layers) {
      if (j < 0 || j >= cfg.n_layers) {
        throw ContractError("routed layer " + std::to_string(j) + " out of range");
      }
      if (record_layers.count(j)) throw ContractError("cannot record a routed layer");
      if (opts.ablation_scale.count(j)) throw ContractError("layer cannot be both routed and ablated");
      if (static_cast<int>(r.general_scale.size()) != cfg.d_ff ||
          static_cast<int>(r.specific_scale.size()) != cfg.d_ff) {
        throw ContractError("routing scales must have d_ff entries");
      }
      bool any = false;
      for (int i = 0; i < cfg.d_ff; ++i) {
        if (r.general_scale[static_cast<std::size_t>(i)] != 0.0 ||
            r.specific_scale[static_cast<std::size_t>(i)] != 0.0) {
          any = true;
          break;
        }
      }
      if (!any) throw ContractError("routed layer " + std::to_string(j) + " has no active units");
    }
  }

  ForwardResult fr;
  fr.rows = batch.rows;
  fr.cols = batch.cols;
  for (const Param& p : model.params()) fr.param_nodes[p.name] = tape.leaf(p.value);
  auto pn = [&](const std::string& name) { return fr.param_nodes.at(name); };
  auto lp = [&](int j, const char* leaf) {
    return fr.param_nodes.at(TransformerModel::layer_param_name(j, leaf));
  };

  const std::int64_t b = batch.rows, t = batch.cols;
  const std::int64_t d = cfg.d_model, h = cfg.n_heads, hd = d / h;

  std::vector<std::int64_t> tok_rows(batch.tokens.begin(), batch.tokens.end());
  std::vector<std::int64_t> pos_rows(static_cast<std::size_t>(b * t));
  for (std::int64_t r = 0; r < b; ++r) {
    for (std::int64_t c = 0; c < t; ++c) pos_rows[static_cast<std::size_t>(r * t + c)] = c;
  }
  NodeId x = tape.add(tape.gather_rows(pn("tok_emb"), tok_rows),
                      tape.gather_rows(pn("pos_emb"), pos_rows));

  for (int j = 0; j < cfg.n_layers; ++j) {
    NodeId a = tape.layer_norm(x, lp(j, "ln1.g"), lp(j, "ln1.b"));
    NodeId q = tape.matmul(a, lp(j, "attn.wq"));
    NodeId k = tape.matmul(a, lp(j, "attn.wk"));
    NodeId v = tape.matmul(a, lp(j, "attn.wv"));
    NodeId q4 = tape.permute(tape.reshape(q, {b, t, h, hd}), {0, 2, 1, 3});
    NodeId k4t = tape.permute(tape.reshape(k, {b, t, h, hd}), {0, 2, 3, 1});
    NodeId v4 = tape.permute(tape.reshape(v, {b, t, h, hd}), {0, 2, 1, 3});
    NodeId scores = tape.mul_scalar(tape.matmul(q4, k4t), 1.0 / std::sqrt(static_cast<double>(hd)));
    NodeId probs = tape.causal_masked_softmax(scores);
    NodeId ctx = tape.reshape(tape.permute(tape.matmul(probs, v4), {0, 2, 1, 3}), {b * t, d});
    x = tape.add(x, tape.matmul(ctx, lp(j, "attn.wo")));

    NodeId f = tape.layer_norm(x, lp(j, "ln2.g"), lp(j, "ln2.b"));
    const LayerRouting* routed = nullptr;
    if (opts.routing) {
      auto it = opts.routing->layers.find(j);
      if (it != opts.routing->layers.end()) routed = &it->second;
    }
    NodeId out;
    if (routed) {
      // general branch sees car-scaled input, specific branch the complement;
      // units outside both branches are unactivated and contribute nothing
      NodeId hg = tape.relu(tape.add_bias(tape.matmul(tape.mul_scalar(f, routed->car), lp(j, "ffn.w1")),
                                          lp(j, "ffn.b1")));
      NodeId hs = tape.relu(tape.add_bias(
          tape.matmul(tape.mul_scalar(f, 1.0 - routed->car), lp(j, "ffn.w1")), lp(j, "ffn.b1")));
      NodeId og = tape.matmul(tape.scale_columns(hg, routed->general_scale), lp(j, "ffn.w2"));
      NodeId os = tape.matmul(tape.scale_columns(hs, routed->specific_scale), lp(j, "ffn.w2"));
      out = tape.add_bias(tape.add(og, os), lp(j, "ffn.b2"));
    } else {
      NodeId hid = tape.relu(tape.add_bias(tape.matmul(f, lp(j, "ffn.w1")), lp(j, "ffn.b1")));
      auto ab = opts.ablation_scale.find(j);
      if (ab != opts.ablation_scale.end()) hid = tape.scale_columns(hid, ab->second);
      if (record_layers.count(j)) fr.recorded[j] = hid;
      out = tape.add_bias(tape.matmul(hid, lp(j, "ffn.w2")), lp(j, "ffn.b2"));
    }
    x = tape.add(x, out);
  }

  x = tape.layer_norm(x, pn("lnf.g"), pn("lnf.b"));
  fr.logits = tape.matmul(x, pn("head"));
  return fr;
}

NodeId lm_loss_node(Tape& tape, const ForwardResult& fr, const Batch& batch) {
  const std::int64_t b = batch.rows, t = batch.cols;
  if (fr.rows != b || fr.cols != t) throw ContractError("loss: batch does not match forward result");
  std::vector<int> targets(static_cast<std::size_t>(b * t), 0);
  std::vector<std::uint8_t> include(static_cast<std::size_t>(b * t), 0);
  for (std::int64_t r = 0; r < b; ++r) {
    if (batch.mask_at(r, 0)) {
      throw ContractError("loss: position 0 cannot be a target, row " + std::to_string(r));
    }
    bool row_has_loss = false;
    for (std::int64_t c = 0; c + 1 < t; ++c) {
      if (batch.mask_at(r, c + 1)) {
        include[static_cast<std::size_t>(r * t + c)] = 1;
        targets[static_cast<std::size_t>(r * t + c)] = batch.token_at(r, c + 1);
        row_has_loss = true;
      }
    }
    if (!row_has_loss) {
      throw DataError("loss: sequence " + std::to_string(r) + " has no target positions");
    }
  }
  return tape.softmax_cross_entropy(fr.logits, std::move(targets), std::move(include));
}

double lm_loss(const TransformerModel& model, const Batch& batch, const ForwardOptions& opts) {
  Tape tape;
  ForwardResult fr = forward(model, batch, {}, tape, opts);
  return tape.value(lm_loss_node(tape, fr, batch)).data[0];
}

std::int64_t ParamSelection::size() const {
  std::int64_t n = 0;
  for (const auto& [name, c] : coords) n += static_cast<std::int64_t>(c.size());
  return n;
}

ParamSelection param_groups(const TransformerModel& model, const std::set<int>& layers,
                            const std::map<int, std::set<int>>& neuron_sets) {
  const ModelConfig& cfg = model.config();
  ParamSelection sel;
  for (int j : layers) {
    if (j < 0 || j >= cfg.n_layers) {
      throw ContractError("param_groups: layer " + std::to_string(j) + " out of range");
    }
    auto it = neuron_sets.find(j);
    const std::set<int> empty;
    const std::set<int>& units = it == neuron_sets.end() ? empty : it->second;
    if (units.empty()) continue;
    for (int i : units) {
      if (i < 0 || i >= cfg.d_ff) {
        throw ContractError("param_groups: neuron " + std::to_string(i) + " out of range");
      }
    }
    std::vector<std::int64_t> w1c, b1c, w2c;
    w1c.reserve(units.size() * static_cast<std::size_t>(cfg.d_model));
    for (std::int64_t r = 0; r < cfg.d_model; ++r) {
      for (int i : units) w1c.push_back(r * cfg.d_ff + i);  // input weights: column i of W1
    }
    for (int i : units) b1c.push_back(i);
    for (int i : units) {
      for (std::int64_t c = 0; c < cfg.d_model; ++c) {
        w2c.push_back(static_cast<std::int64_t>(i) * cfg.d_model + c);  // output weights: row i of W2
      }
    }
    sel.coords[TransformerModel::layer_param_name(j, "ffn.w1")] = std::move(w1c);
    sel.coords[TransformerModel::layer_param_name(j, "ffn.b1")] = std::move(b1c);
    sel.coords[TransformerModel::layer_param_name(j, "ffn.w2")] = std::move(w2c);
  }
  return sel;
}

}  // namespace langroute
