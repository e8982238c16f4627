#include "stdemand/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "csv.hpp"
#include "stdemand/checkpoint.hpp"
#include "stdemand/kv_config.hpp"

namespace stdemand {

MetricSet MetricAccumulator::result() const {
  if (count == 0) throw DataError("metrics requested over an empty set");
  const auto n = static_cast<double>(count);
  return {abs / n, std::sqrt(sq / n), count};
}

MetricSet compute_metrics(const MatD& pred, const MatD& target, const MatD& observed,
                          const std::vector<std::size_t>& rows) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols() || observed.rows() != pred.rows() ||
      observed.cols() != pred.cols()) {
    throw ConfigError("prediction, target and mask shapes differ");
  }
  MetricAccumulator acc;
  for (auto r : rows) {
    if (r >= static_cast<std::size_t>(pred.rows())) throw ConfigError("metric row out of range");
    const auto i = static_cast<Eigen::Index>(r);
    for (Eigen::Index c = 0; c < pred.cols(); ++c) {
      if (observed(i, c) != 0.0) acc.add(pred(i, c) - target(i, c));
    }
  }
  return acc.result();
}

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

double parse_double(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw DataError("checkpoint sidecar lacks " + key);
  try {
    return std::stod(it->second);
  } catch (const std::logic_error&) {
    throw DataError("checkpoint sidecar has a malformed " + key);
  }
}

}  // namespace

void ModelBundle::save(const std::filesystem::path& checkpoint, const KeyValues& extra) const {
  write_checkpoint(params, checkpoint);
  auto kv = extra;
  for (const auto& [k, v] : config.to_map()) kv[k] = v;
  kv["scaler_offset"] = format_double(scaler.offset);
  kv["scaler_scale"] = format_double(scaler.scale);
  write_key_values(kv, sidecar_path(checkpoint));
}

ModelBundle ModelBundle::load(const std::filesystem::path& checkpoint) {
  ModelBundle b;
  const auto kv = read_key_values(sidecar_path(checkpoint));
  try {
    b.config = ForwardConfig::from_map(kv);
  } catch (const std::logic_error&) {
    throw DataError("checkpoint sidecar has a malformed number");
  }
  b.config.validate();
  b.scaler.offset = parse_double(kv, "scaler_offset");
  b.scaler.scale = parse_double(kv, "scaler_scale");
  b.params = read_checkpoint(checkpoint);
  const auto layout = init_parameters<float>(b.config, 0);
  if (layout.size() != b.params.size()) throw ConfigError("checkpoint tensors do not match its configuration");
  for (const auto& t : layout) {
    if (!b.params.contains(t.name)) throw ConfigError("checkpoint lacks tensor " + t.name);
    const auto& v = b.params[t.name];
    if (v.rows() != t.value.rows() || v.cols() != t.value.cols()) {
      throw ConfigError("checkpoint tensor " + t.name + " has the wrong shape for its configuration");
    }
  }
  return b;
}

Scenario parse_scenario(const std::string& text) {
  if (text == "joint") return Scenario::joint;
  if (text == "transfer-full") return Scenario::transfer_full;
  if (text == "transfer-partial") return Scenario::transfer_partial;
  throw ConfigError("unknown scenario " + text);
}

std::string to_string(Scenario scenario) {
  switch (scenario) {
    case Scenario::joint:
      return "joint";
    case Scenario::transfer_full:
      return "transfer-full";
    case Scenario::transfer_partial:
      return "transfer-partial";
  }
  return "joint";
}

const MetricSet& ExperimentResult::get(const std::string& method, const std::string& subset) const {
  for (const auto& r : rows) {
    if (r.method == method && r.subset == subset) return r.metrics;
  }
  throw ConfigError("no result for " + method + "/" + subset);
}

void ExperimentSpec::validate() const {
  model.validate();
  train.validate();
  if (scenario != Scenario::joint && checkpoint.empty()) throw ConfigError("transfer scenarios need a source checkpoint");
}

std::vector<std::string> draw_new_regions(const Dataset& data, std::size_t count, std::uint64_t seed) {
  if (count >= data.n_nodes()) throw ConfigError("cannot hold out every region");
  std::vector<std::size_t> picked;
  std::mt19937_64 rng(derive_seed(seed, 0x4E455752ULL));
  std::vector<std::size_t> all(data.n_nodes());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::sample(all.begin(), all.end(), std::back_inserter(picked), count, rng);
  std::vector<std::string> ids;
  for (auto i : picked) ids.push_back(data.regions.region_ids[i]);
  return ids;
}

double neighbor_mean(const Dataset& data, const std::vector<char>& visible, std::size_t node, std::size_t feature,
                     std::size_t step) {
  const auto& a = data.graph.adjacency;
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t j = 0; j < data.n_nodes(); ++j) {
    if (j == node || !visible[j] || a(static_cast<Eigen::Index>(node), static_cast<Eigen::Index>(j)) <= 0.0) continue;
    if (!data.demand.observed(j, step)) continue;
    sum += data.demand.at(j, feature, step);
    ++count;
  }
  if (count > 0) return sum / static_cast<double>(count);
  for (std::size_t j = 0; j < data.n_nodes(); ++j) {
    if (j == node || !visible[j] || !data.demand.observed(j, step)) continue;
    sum += data.demand.at(j, feature, step);
    ++count;
  }
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

std::vector<ResultRow> evaluate_forecasts(const ModelBundle& model, const Dataset& data, IndexRange steps,
                                          const std::vector<std::size_t>& hidden, std::size_t stride, IndexRange ha_fit,
                                          const std::string& scenario) {
  const auto& config = model.config;
  if (config.encoding_dim != data.encodings.dim()) {
    throw ConfigError("model expects " + std::to_string(config.encoding_dim) + "-dim encodings, city has " +
                      std::to_string(data.encodings.dim()));
  }
  if (config.n_features != data.demand.n_features) throw ConfigError("model and city disagree on the feature count");
  const std::size_t n = data.n_nodes();
  std::vector<char> visible(n, 1);
  std::vector<int> hidden_local;
  for (auto h : hidden) {
    if (h >= n) throw ConfigError("hidden node out of range");
    visible[h] = 0;
    hidden_local.push_back(static_cast<int>(h));
  }
  std::sort(hidden_local.begin(), hidden_local.end());

  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  WindowSource<float> source(data, all, model.scaler, config.window, config.horizon);
  const auto& graph = source.graph_context(config.neighbor_order);
  const auto ha = HistoricalAverage::fit(data.demand, ha_fit);
  if (stride == 0) stride = config.horizon;

  MetricAccumulator model_acc[3];
  MetricAccumulator ha_acc[3];
  MetricAccumulator nb_acc;
  const auto starts = source.starts_forecasting(steps);
  if (starts.empty()) throw DataError("evaluation span is shorter than window + horizon");
  const auto h = static_cast<Eigen::Index>(config.horizon);
  for (std::size_t k = 0; k < starts.size(); k += stride) {
    const std::size_t t = starts[k];
    const auto window = source.make(t, hidden_local);
    const auto out = forward(model.params, config, window.input, graph);
    for (std::size_t i = 0; i < n; ++i) {
      const int subset = visible[i] ? 1 : 0;  // 0 new, 1 existing
      for (std::size_t d = 0; d < config.n_features; ++d) {
        for (Eigen::Index s = 0; s < h; ++s) {
          const std::size_t step = t + static_cast<std::size_t>(s);
          if (!data.demand.observed(i, step)) continue;
          const double truth = data.demand.at(i, d, step);
          const double pred = model.scaler.inverse(
              static_cast<double>(out.pred(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d) * h + s)));
          const double base = ha.predict(i, d, data.demand.time_of(step));
          model_acc[subset].add(pred - truth);
          model_acc[2].add(pred - truth);
          ha_acc[subset].add(base - truth);
          ha_acc[2].add(base - truth);
          if (!visible[i]) nb_acc.add(neighbor_mean(data, visible, i, d, step) - truth);
        }
      }
    }
  }

  const char* names[3] = {"new", "existing", "all"};
  std::vector<ResultRow> rows;
  for (int s = 0; s < 3; ++s) {
    if (model_acc[s].count == 0) continue;
    rows.push_back({scenario, "model", names[s], model_acc[s].result()});
  }
  for (int s = 0; s < 3; ++s) {
    if (ha_acc[s].count == 0) continue;
    rows.push_back({scenario, "ha", names[s], ha_acc[s].result()});
  }
  if (nb_acc.count > 0) rows.push_back({scenario, "neighbor_mean", "new", nb_acc.result()});
  return rows;
}

namespace {

std::vector<std::size_t> resolve_new(const Dataset& data, const ExperimentSpec& spec, std::vector<std::string>& ids) {
  ids = spec.new_region_ids.empty() ? draw_new_regions(data, spec.n_new_regions, spec.seed) : spec.new_region_ids;
  std::set<std::string> unique(ids.begin(), ids.end());
  if (unique.size() != ids.size()) throw ConfigError("new-region ids contain duplicates");
  auto idx = data.indices_of(ids);
  if (idx.size() >= data.n_nodes()) throw ConfigError("at least one region must stay observed");
  return idx;
}

ForwardConfig fit_config(ForwardConfig config, const Dataset& data) {
  config.encoding_dim = data.encodings.dim();
  config.n_features = data.demand.n_features;
  config.n_covariates = kCovariateDim;
  return config;
}

}  // namespace

JointSetup prepare_joint(const Dataset& data, const ExperimentSpec& spec) {
  spec.validate();
  data.validate();
  JointSetup s;
  s.new_nodes = resolve_new(data, spec, s.new_region_ids);
  std::vector<char> is_new(data.n_nodes(), 0);
  for (auto i : s.new_nodes) is_new[i] = 1;
  for (std::size_t i = 0; i < data.n_nodes(); ++i) {
    if (!is_new[i]) s.observed_nodes.push_back(i);
  }
  s.split = chronological_split(data.demand.n_steps, spec.split);
  s.config = fit_config(spec.model, data);
  s.config.validate();
  s.scaler = Scaler::fit(data.demand, s.observed_nodes, s.split.train);
  s.source = std::make_unique<WindowSource<float>>(data, s.observed_nodes, s.scaler, s.config.window, s.config.horizon);
  s.data.train = s.source.get();
  s.data.train_starts = s.source->starts_within(s.split.train);
  s.data.val = s.source.get();
  s.data.val_starts = s.source->starts_forecasting(s.split.val);
  s.data.scaler = s.scaler;
  if (s.data.train_starts.empty()) throw DataError("training split is shorter than window + horizon");
  if (s.data.val_starts.empty()) throw DataError("validation split is shorter than the horizon");
  return s;
}

ExperimentResult run_joint(const Dataset& data, const ExperimentSpec& spec) {
  auto setup = prepare_joint(data, spec);
  Trainer trainer(setup.config, spec.train, setup.data, init_parameters<float>(setup.config, spec.train.seed));
  trainer.run();
  ExperimentResult result;
  result.new_region_ids = setup.new_region_ids;
  result.log = trainer.log();
  ModelBundle bundle{setup.config, setup.scaler, trainer.best()};
  result.rows = evaluate_forecasts(bundle, data, setup.split.test, setup.new_nodes, spec.eval_stride, setup.split.train,
                                   "joint");
  result.model = std::move(bundle);
  return result;
}

ExperimentResult run_transfer(const ModelBundle& model, const Dataset& target, const ExperimentSpec& spec) {
  target.validate();
  ExperimentResult result;
  std::vector<std::size_t> hidden;
  if (spec.scenario == Scenario::transfer_partial) hidden = resolve_new(target, spec, result.new_region_ids);
  const auto split = chronological_split(target.demand.n_steps, spec.split);
  result.rows = evaluate_forecasts(model, target, split.test, hidden, spec.eval_stride, split.train, to_string(spec.scenario));
  return result;
}

void export_encodings(const EncodingTable& table, const ModelBundle* model, std::ostream& out) {
  table.validate();
  MatF values = table.values;
  if (model) {
    const auto& config = model->config;
    if (config.encoding_dim != table.dim()) throw ConfigError("encoding width does not match the model");
    const auto v = probe<float>(table.values, model->params["probe.W"]);
    values = process_embedding<float>(v, model->params["norm.gamma"].row(0), model->params["norm.beta"].row(0)).output;
  }
  out << std::setprecision(9);
  for (std::size_t i = 0; i < table.size(); ++i) {
    out << table.region_ids[i];
    for (Eigen::Index c = 0; c < values.cols(); ++c) out << '\t' << values(static_cast<Eigen::Index>(i), c);
    out << '\n';
  }
}

EncodingTable read_encodings_tsv(std::istream& in) {
  EncodingTable t;
  std::vector<std::vector<float>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id;
    std::getline(ls, id, '\t');
    std::vector<float> row;
    std::string cell;
    while (std::getline(ls, cell, '\t')) row.push_back(static_cast<float>(csv::to_double(cell, "encoding value")));
    if (!rows.empty() && row.size() != rows.front().size()) throw DataError("ragged encoding export");
    t.region_ids.push_back(id);
    rows.push_back(std::move(row));
  }
  const auto cols = rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size());
  t.values.resize(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (Eigen::Index c = 0; c < cols; ++c) t.values(static_cast<Eigen::Index>(i), c) = rows[i][static_cast<std::size_t>(c)];
  return t;
}

void write_results_csv(const ExperimentResult& result, std::ostream& out) {
  std::string ids;
  for (const auto& id : result.new_region_ids) ids += (ids.empty() ? "" : " ") + id;
  out << "scenario,method,subset,mae,rmse,count,new_regions\n" << std::setprecision(9);
  for (const auto& r : result.rows) {
    out << r.scenario << ',' << r.method << ',' << r.subset << ',' << r.metrics.mae << ',' << r.metrics.rmse << ','
        << r.metrics.count << ',' << ids << '\n';
  }
}

void write_results_csv(const ExperimentResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_results_csv(result, out);
}

std::string format_results_table(const ExperimentResult& result) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "scenario" << std::setw(15) << "method" << std::setw(10) << "subset"
     << std::right << std::setw(10) << "MAE" << std::setw(10) << "RMSE" << std::setw(10) << "n" << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : result.rows) {
    os << std::left << std::setw(18) << r.scenario << std::setw(15) << r.method << std::setw(10) << r.subset
       << std::right << std::setw(10) << r.metrics.mae << std::setw(10) << r.metrics.rmse << std::setw(10)
       << r.metrics.count << '\n';
  }
  if (!result.new_region_ids.empty()) {
    os << "new regions:";
    for (const auto& id : result.new_region_ids) os << ' ' << id;
    os << '\n';
  }
  return os.str();
}

}  // namespace stdemand
