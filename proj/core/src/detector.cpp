#include "langroute/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "langroute/errors.hpp"
#include "langroute/tape.hpp"

namespace langroute {

double ActivationTrace::layer_mean(int layer) const {
  double s = 0.0;
  for (int n = 0; n < passes; ++n) s += at(layer, n);
  return s / static_cast<double>(passes);
}

ActivationTrace trace_activations(const TransformerModel& model, const std::vector<Batch>& data,
                                  int passes, const TraceOptions& opts) {
  if (data.empty()) throw ContractError("trace_activations: no data");
  if (passes < 1) throw ContractError("trace_activations: passes must be >= 1");
  const int n_layers = model.config().n_layers;
  const int d_ff = model.config().d_ff;

  std::set<int> all_layers;
  for (int j = 0; j < n_layers; ++j) all_layers.insert(j);

  ActivationTrace trace;
  trace.n_layers = n_layers;
  trace.passes = passes;
  trace.pair = data.front().pair;
  trace.a.assign(static_cast<std::size_t>(n_layers) * static_cast<std::size_t>(passes), 0.0);

  for (int n = 0; n < passes; ++n) {
    const Batch& batch = data[static_cast<std::size_t>(n) % data.size()];
    Tape tape;
    ForwardResult fr = forward(model, batch, all_layers, tape);
    std::vector<std::int64_t> rows;
    for (std::int64_t r = 0; r < batch.rows; ++r) {
      for (std::int64_t c = 0; c < batch.cols; ++c) {
        if (batch.mask_at(r, c)) rows.push_back(r * batch.cols + c);
      }
    }
    if (rows.empty()) throw DataError("trace_activations: batch has no masked positions");
    for (int j = 0; j < n_layers; ++j) {
      const Tensor& h = tape.value(fr.recorded.at(j));
      double sum = 0.0;
      for (std::int64_t r : rows) {
        const double* row = h.data.data() + r * d_ff;
        for (int i = 0; i < d_ff; ++i) sum += opts.absolute_mean ? std::abs(row[i]) : row[i];
      }
      trace.a[static_cast<std::size_t>(j * passes + n)] =
          sum / (static_cast<double>(rows.size()) * static_cast<double>(d_ff));
    }
  }
  return trace;
}

std::vector<double> activation_deltas(const ActivationTrace& trace) {
  if (trace.n_layers < 2) throw ContractError("activation_deltas: need at least 2 layers");
  std::vector<double> d(static_cast<std::size_t>(trace.n_layers - 1), 0.0);
  for (int b = 0; b + 1 < trace.n_layers; ++b) {
    d[static_cast<std::size_t>(b)] = std::abs(trace.layer_mean(b) - trace.layer_mean(b + 1));
  }
  return d;
}

std::vector<int> select_layers(const std::vector<double>& deltas, int k) {
  if (k < 0 || k > static_cast<int>(deltas.size())) {
    throw ContractError("select_layers: k must lie in [0, |deltas|]");
  }
  std::vector<int> boundaries(deltas.size());
  std::iota(boundaries.begin(), boundaries.end(), 0);
  std::sort(boundaries.begin(), boundaries.end(), [&](int lhs, int rhs) {
    if (deltas[static_cast<std::size_t>(lhs)] != deltas[static_cast<std::size_t>(rhs)]) {
      return deltas[static_cast<std::size_t>(lhs)] > deltas[static_cast<std::size_t>(rhs)];
    }
    return lhs < rhs;
  });
  std::vector<int> selected;
  for (int i = 0; i < k; ++i) selected.push_back(boundaries[static_cast<std::size_t>(i)] + 1);
  std::sort(selected.begin(), selected.end());
  return selected;
}

LayerRelevance detect_layers(const TransformerModel& model, const std::vector<Batch>& data,
                             int passes, int k, const TraceOptions& opts) {
  ActivationTrace trace = trace_activations(model, data, passes, opts);
  LayerRelevance rel;
  rel.pair = trace.pair;
  rel.k = k;
  rel.deltas = activation_deltas(trace);
  rel.selected = select_layers(rel.deltas, k);
  return rel;
}

std::vector<int> LayerSelectionFile::all_selected() const {
  std::set<int> u;
  for (const auto& [pair, rel] : pairs) u.insert(rel.selected.begin(), rel.selected.end());
  return std::vector<int>(u.begin(), u.end());
}

std::string layer_selection_to_json(const LayerSelectionFile& sel) {
  nlohmann::json j;
  j["attribution"] = "boundary delta assigned to the upper layer";
  j["pairs"] = nlohmann::json::object();
  for (const auto& [pair, rel] : sel.pairs) {
    j["pairs"][pair] = {{"k", rel.k}, {"deltas", rel.deltas}, {"selected", rel.selected}};
  }
  return j.dump(2);
}

LayerSelectionFile layer_selection_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("layer file is not valid JSON: ") + e.what());
  }
  LayerSelectionFile sel;
  try {
    for (const auto& [pair, rj] : j.at("pairs").items()) {
      LayerRelevance rel;
      rel.pair = pair;
      rel.k = rj.at("k").get<int>();
      rel.deltas = rj.at("deltas").get<std::vector<double>>();
      rel.selected = rj.at("selected").get<std::vector<int>>();
      sel.pairs[pair] = std::move(rel);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("layer file missing fields: ") + e.what());
  }
  return sel;
}

void write_layer_activations_csv(const std::string& path,
                                 const std::vector<ActivationTrace>& traces) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "pair,layer,mean_activation\n";
  for (const ActivationTrace& t : traces) {
    for (int j = 0; j < t.n_layers; ++j) {
      out << t.pair << ',' << j << ',' << t.layer_mean(j) << '\n';
    }
  }
}

void write_layer_deltas_csv(const std::string& path, const std::vector<LayerRelevance>& relevances) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "# attribution: boundary b compares layers b and b+1; relevance goes to layer b+1\n";
  out << "pair,boundary,delta\n";
  for (const LayerRelevance& rel : relevances) {
    for (std::size_t b = 0; b < rel.deltas.size(); ++b) {
      out << rel.pair << ',' << b << ',' << rel.deltas[b] << '\n';
    }
  }
}

}  // namespace langroute
