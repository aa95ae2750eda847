#include "langroute/awareness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "langroute/errors.hpp"
#include "langroute/tape.hpp"

namespace langroute {

int AwarenessTable::lang_index(const std::string& code) const {
  for (std::size_t i = 0; i < languages.size(); ++i) {
    if (languages[i] == code) return static_cast<int>(i);
  }
  throw DataError("language " + code + " not in awareness table");
}

double AwarenessTable::phi_at(int layer, int neuron, const std::string& lang) const {
  const auto it = phi.find(layer);
  if (it == phi.end()) throw ContractError("layer " + std::to_string(layer) + " not scored");
  return it->second.at2(neuron, lang_index(lang));
}

bool AwarenessTable::complete() const {
  for (const std::string& l : languages) {
    auto it = batch_counts.find(l);
    if (it == batch_counts.end() || it->second == 0) return false;
  }
  return true;
}

AwarenessTable make_awareness_table(const std::vector<std::string>& languages,
                                    const std::vector<int>& layers, int d_ff) {
  if (languages.size() < 2) throw ContractError("awareness table needs at least 2 languages");
  if (layers.empty()) throw ContractError("awareness table needs at least one layer");
  if (d_ff < 1) throw ContractError("awareness table needs positive d_ff");
  AwarenessTable t;
  t.languages = languages;
  t.layers = layers;
  std::sort(t.layers.begin(), t.layers.end());
  t.d_ff = d_ff;
  for (int j : t.layers) {
    t.phi[j] = Tensor::zeros({d_ff, static_cast<std::int64_t>(languages.size())});
  }
  for (const std::string& l : languages) t.batch_counts[l] = 0;
  return t;
}

void score_language(const TransformerModel& model, const std::string& language,
                    const std::vector<Batch>& mono_data, AwarenessTable& table,
                    const ScoreOptions& opts) {
  if (mono_data.empty()) throw ContractError("score_language: no data");
  const int li = table.lang_index(language);
  const int d_ff = model.config().d_ff;
  if (d_ff != table.d_ff) throw ContractError("score_language: table d_ff mismatch");
  const std::set<int> layer_set(table.layers.begin(), table.layers.end());

  // per layer: running sums of g*h terms over all loss positions of the dataset
  std::map<int, std::vector<double>> acc;
  for (int j : table.layers) acc[j].assign(static_cast<std::size_t>(d_ff), 0.0);
  std::int64_t total_positions = 0;

  for (const Batch& batch : mono_data) {
    Tape tape;
    ForwardResult fr = forward(model, batch, layer_set, tape);
    NodeId loss = lm_loss_node(tape, fr, batch);
    tape.backward(loss);
    std::vector<std::int64_t> rows;
    for (std::int64_t r = 0; r < batch.rows; ++r) {
      for (std::int64_t c = 0; c < batch.cols; ++c) {
        if (batch.mask_at(r, c)) rows.push_back(r * batch.cols + c);
      }
    }
    // the loss is a mean over this batch's rows; rescale to sum semantics so
    // accumulation does not depend on the batch split
    const double batch_weight = static_cast<double>(rows.size());
    total_positions += static_cast<std::int64_t>(rows.size());
    for (int j : table.layers) {
      const Tensor& h = tape.value(fr.recorded.at(j));
      const Tensor& g = tape.grad(fr.recorded.at(j));
      std::vector<double>& a = acc[j];
      for (std::int64_t row : rows) {
        const double* hv = h.data.data() + row * d_ff;
        const double* gv = g.data.data() + row * d_ff;
        for (int i = 0; i < d_ff; ++i) {
          const double term = gv[i] * batch_weight * hv[i];
          a[static_cast<std::size_t>(i)] += opts.abs_of_sum ? term : std::abs(term);
        }
      }
    }
  }

  if (total_positions == 0) throw DataError("score_language: no loss positions in data");
  for (int j : table.layers) {
    Tensor& p = table.phi[j];
    for (int i = 0; i < d_ff; ++i) {
      const double v = acc[j][static_cast<std::size_t>(i)] / static_cast<double>(total_positions);
      p.at2(i, li) = opts.abs_of_sum ? std::abs(v) : v;
    }
  }
  table.batch_counts[language] += static_cast<std::int64_t>(mono_data.size());
}

double ablation_delta(const TransformerModel& model, const Batch& batch, int layer, int neuron) {
  const ModelConfig& cfg = model.config();
  if (layer < 0 || layer >= cfg.n_layers) throw ContractError("ablation_delta: layer out of range");
  if (neuron < 0 || neuron >= cfg.d_ff) throw ContractError("ablation_delta: neuron out of range");
  const double base = lm_loss(model, batch);
  ForwardOptions opts;
  std::vector<double> scale(static_cast<std::size_t>(cfg.d_ff), 1.0);
  scale[static_cast<std::size_t>(neuron)] = 0.0;
  opts.ablation_scale[layer] = std::move(scale);
  const double ablated = lm_loss(model, batch, opts);
  return std::abs(ablated - base);
}

NeuronPartition partition(const AwarenessTable& table, double epsilon) {
  if (!(epsilon > 0.0) || !(epsilon < 1.0)) {
    throw ContractError("partition: epsilon must lie strictly between 0 and 1");
  }
  if (table.languages.size() < 2) {
    throw ContractError("partition: variance needs at least 2 languages");
  }
  if (!table.complete()) throw ContractError("partition: table has unscored languages");

  const int p = table.d_ff;
  const int n_langs = static_cast<int>(table.languages.size());
  const int n_general = static_cast<int>(std::floor(epsilon * static_cast<double>(p) + 1e-9));

  NeuronPartition part;
  part.epsilon = epsilon;
  part.languages = table.languages;

  for (int j : table.layers) {
    const Tensor& phi = table.phi.at(j);
    LayerPartition lp;
    lp.variance.assign(static_cast<std::size_t>(p), 0.0);
    for (int i = 0; i < p; ++i) {
      double mean = 0.0;
      for (int l = 0; l < n_langs; ++l) mean += phi.at2(i, l);
      mean /= static_cast<double>(n_langs);
      double var = 0.0;
      for (int l = 0; l < n_langs; ++l) {
        const double d = phi.at2(i, l) - mean;
        var += d * d;
      }
      lp.variance[static_cast<std::size_t>(i)] = var / static_cast<double>(n_langs);
    }

    std::vector<int> order(static_cast<std::size_t>(p));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (lp.variance[static_cast<std::size_t>(a)] != lp.variance[static_cast<std::size_t>(b)]) {
        return lp.variance[static_cast<std::size_t>(a)] < lp.variance[static_cast<std::size_t>(b)];
      }
      return a < b;
    });

    lp.general.assign(order.begin(), order.begin() + n_general);
    std::sort(lp.general.begin(), lp.general.end());
    lp.lambda = n_general > 0 ? lp.variance[static_cast<std::size_t>(order[static_cast<std::size_t>(n_general - 1)])]
                              : 0.0;

    for (const std::string& l : table.languages) lp.specific[l] = {};
    for (int oi = n_general; oi < p; ++oi) {
      const int i = order[static_cast<std::size_t>(oi)];
      int best = 0;
      for (int l = 1; l < n_langs; ++l) {
        if (phi.at2(i, l) > phi.at2(i, best)) best = l;  // ties keep the lower index
      }
      lp.specific[table.languages[static_cast<std::size_t>(best)]].push_back(i);
    }
    for (auto& [lang, ids] : lp.specific) std::sort(ids.begin(), ids.end());

    for (int l = 0; l < n_langs; ++l) {
      std::vector<double> col(static_cast<std::size_t>(p), 0.0);
      for (int i = 0; i < p; ++i) col[static_cast<std::size_t>(i)] = phi.at2(i, l);
      lp.phi[table.languages[static_cast<std::size_t>(l)]] = std::move(col);
    }
    part.layers[j] = std::move(lp);
  }
  return part;
}

std::map<int, std::vector<int>> pair_neurons(const NeuronPartition& partition, const std::string& a,
                                             const std::string& b) {
  if (a == b) throw ContractError("pair_neurons: languages must differ");
  for (const std::string& code : {a, b}) {
    if (std::find(partition.languages.begin(), partition.languages.end(), code) ==
        partition.languages.end()) {
      throw DataError("pair_neurons: language " + code + " not in partition");
    }
  }
  std::map<int, std::vector<int>> out;
  for (const auto& [layer, lp] : partition.layers) {
    std::set<int> u;
    auto ia = lp.specific.find(a);
    auto ib = lp.specific.find(b);
    if (ia != lp.specific.end()) u.insert(ia->second.begin(), ia->second.end());
    if (ib != lp.specific.end()) u.insert(ib->second.begin(), ib->second.end());
    out[layer] = std::vector<int>(u.begin(), u.end());
  }
  return out;
}

std::string awareness_table_to_json(const AwarenessTable& table,
                                    const std::map<std::string, std::vector<int>>& pair_layers) {
  nlohmann::json j;
  j["languages"] = table.languages;
  j["layers"] = table.layers;
  j["d_ff"] = table.d_ff;
  j["batch_counts"] = table.batch_counts;
  j["phi"] = nlohmann::json::object();
  for (int layer : table.layers) {
    nlohmann::json lj = nlohmann::json::object();
    const Tensor& p = table.phi.at(layer);
    for (std::size_t l = 0; l < table.languages.size(); ++l) {
      std::vector<double> col(static_cast<std::size_t>(table.d_ff));
      for (int i = 0; i < table.d_ff; ++i) col[static_cast<std::size_t>(i)] = p.at2(i, static_cast<std::int64_t>(l));
      lj[table.languages[l]] = col;
    }
    j["phi"][std::to_string(layer)] = lj;
  }
  j["pairs"] = pair_layers;
  return j.dump(2);
}

AwarenessTable awareness_table_from_json(const std::string& json_text,
                                         std::map<std::string, std::vector<int>>* pair_layers) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("score file is not valid JSON: ") + e.what());
  }
  try {
    AwarenessTable t = make_awareness_table(j.at("languages").get<std::vector<std::string>>(),
                                            j.at("layers").get<std::vector<int>>(),
                                            j.at("d_ff").get<int>());
    for (const auto& [k, v] : j.at("batch_counts").items()) t.batch_counts[k] = v.get<std::int64_t>();
    for (int layer : t.layers) {
      const auto& lj = j.at("phi").at(std::to_string(layer));
      Tensor& p = t.phi.at(layer);
      for (std::size_t l = 0; l < t.languages.size(); ++l) {
        const auto col = lj.at(t.languages[l]).get<std::vector<double>>();
        if (static_cast<int>(col.size()) != t.d_ff) throw DataError("phi column size mismatch");
        for (int i = 0; i < t.d_ff; ++i) p.at2(i, static_cast<std::int64_t>(l)) = col[static_cast<std::size_t>(i)];
      }
    }
    if (pair_layers && j.count("pairs")) {
      *pair_layers = j.at("pairs").get<std::map<std::string, std::vector<int>>>();
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("score file missing fields: ") + e.what());
  }
}

std::string partition_to_json(const NeuronPartition& partition) {
  nlohmann::json j;
  j["epsilon"] = partition.epsilon;
  j["languages"] = partition.languages;
  j["layers"] = nlohmann::json::object();
  for (const auto& [layer, lp] : partition.layers) {
    nlohmann::json lj;
    lj["lambda"] = lp.lambda;
    lj["general"] = lp.general;
    lj["specific"] = lp.specific;
    lj["variance"] = lp.variance;
    lj["phi"] = lp.phi;
    j["layers"][std::to_string(layer)] = lj;
  }
  j["pairs"] = partition.pair_layers;
  return j.dump(2);
}

NeuronPartition partition_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("manifest is not valid JSON: ") + e.what());
  }
  NeuronPartition part;
  try {
    part.epsilon = j.at("epsilon").get<double>();
    part.languages = j.at("languages").get<std::vector<std::string>>();
    for (const auto& [key, lj] : j.at("layers").items()) {
      LayerPartition lp;
      lp.lambda = lj.at("lambda").get<double>();
      lp.general = lj.at("general").get<std::vector<int>>();
      lp.specific = lj.at("specific").get<std::map<std::string, std::vector<int>>>();
      lp.variance = lj.at("variance").get<std::vector<double>>();
      lp.phi = lj.at("phi").get<std::map<std::string, std::vector<double>>>();
      part.layers[std::stoi(key)] = std::move(lp);
    }
    if (j.count("pairs")) {
      part.pair_layers = j.at("pairs").get<std::map<std::string, std::vector<int>>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest missing fields: ") + e.what());
  }
  return part;
}

void write_awareness_csv(const std::string& path, const AwarenessTable& table) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "layer,neuron,language,phi\n";
  for (int layer : table.layers) {
    const Tensor& p = table.phi.at(layer);
    for (int i = 0; i < table.d_ff; ++i) {
      for (std::size_t l = 0; l < table.languages.size(); ++l) {
        out << layer << ',' << i << ',' << table.languages[l] << ','
            << p.at2(i, static_cast<std::int64_t>(l)) << '\n';
      }
    }
  }
}

}  // namespace langroute
