#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stdemand/dataset.hpp"
#include "stdemand/kv_config.hpp"
#include "stdemand/model.hpp"
#include "stdemand/synth.hpp"
#include "stdemand/training.hpp"

namespace stdemand {

struct MetricSet {
  double mae = 0.0;
  double rmse = 0.0;
  std::size_t count = 0;
};

/// Running absolute and squared error sums.
struct MetricAccumulator {
  double abs = 0.0;
  double sq = 0.0;
  std::size_t count = 0;

  void add(double error) {
    abs += std::abs(error);
    sq += error * error;
    ++count;
  }
  /// Throws DataError when nothing was accumulated.
  MetricSet result() const;
};

/// MAE and RMSE over the observed entries of the listed rows. Matrices are N x columns.
MetricSet compute_metrics(const MatD& pred, const MatD& target, const MatD& observed, const std::vector<std::size_t>& rows);

/// A trained network with everything needed to run it on another node set.
struct ModelBundle {
  ForwardConfig config;
  Scaler scaler;
  Parameters<float> params;

  /// Writes the ICKP checkpoint plus its key=value sidecar; `extra` keys are appended to the sidecar.
  void save(const std::filesystem::path& checkpoint, const KeyValues& extra = {}) const;
  static ModelBundle load(const std::filesystem::path& checkpoint);
};

enum class Scenario { joint, transfer_full, transfer_partial };
Scenario parse_scenario(const std::string& text);
std::string to_string(Scenario scenario);

struct ResultRow {
  std::string scenario;
  std::string method;  // model, ha, neighbor_mean
  std::string subset;  // new, existing, all
  MetricSet metrics;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::vector<std::string> new_region_ids;
  std::vector<EpochLog> log;
  std::optional<ModelBundle> model;

  /// Throws ConfigError if the row is absent.
  const MetricSet& get(const std::string& method, const std::string& subset) const;
};

struct ExperimentSpec {
  Scenario scenario = Scenario::joint;
  std::filesystem::path source;
  std::filesystem::path target;
  std::filesystem::path checkpoint;
  std::vector<std::string> new_region_ids;  // explicit list wins over the seeded draw
  std::size_t n_new_regions = 0;
  std::uint64_t seed = 0;
  SplitRatios split;
  std::size_t eval_stride = 0;  // 0 means one non-overlapping window per horizon
  ForwardConfig model;
  TrainConfig train;

  void validate() const;
};

/// Seeded uniform draw of `count` region ids, returned in dataset order.
std::vector<std::string> draw_new_regions(const Dataset& data, std::size_t count, std::uint64_t seed);

/// Mean of the observed values of a node's observed adjacency neighbors at the same step; nodes without such
/// neighbors fall back to the mean over all nodes in `visible` observed at that step.
double neighbor_mean(const Dataset& data, const std::vector<char>& visible, std::size_t node, std::size_t feature,
                     std::size_t step);

/// Forecasts over windows whose horizon lies in `steps`, with `hidden` nodes' histories withheld.
/// Reports the model, the historical average fitted on `ha_fit`, and (for hidden nodes) the neighbor mean.
std::vector<ResultRow> evaluate_forecasts(const ModelBundle& model, const Dataset& data, IndexRange steps,
                                          const std::vector<std::size_t>& hidden, std::size_t stride, IndexRange ha_fit,
                                          const std::string& scenario);

/// Everything a joint run needs before training starts. Owns the window source that `data` points into.
struct JointSetup {
  std::vector<std::string> new_region_ids;
  std::vector<std::size_t> new_nodes;
  std::vector<std::size_t> observed_nodes;
  ChronologicalSplit split;
  ForwardConfig config;
  Scaler scaler;
  std::unique_ptr<WindowSource<float>> source;
  TrainingData data;
};

/// Resolves the new regions, fits the scaler on observed training entries and lays out the windows.
JointSetup prepare_joint(const Dataset& data, const ExperimentSpec& spec);

/// Trains on the observed regions with masking, then evaluates on the test split with the new regions hidden.
ExperimentResult run_joint(const Dataset& data, const ExperimentSpec& spec);

/// Inference only: the bundle is applied to the target city without any parameter update.
ExperimentResult run_transfer(const ModelBundle& model, const Dataset& target, const ExperimentSpec& spec);

/// Processed node embeddings (or the raw table when no model is given) as TSV: region_id then values.
void export_encodings(const EncodingTable& table, const ModelBundle* model, std::ostream& out);
EncodingTable read_encodings_tsv(std::istream& in);

void write_results_csv(const ExperimentResult& result, std::ostream& out);
void write_results_csv(const ExperimentResult& result, const std::filesystem::path& path);
std::string format_results_table(const ExperimentResult& result);

}  // namespace stdemand
