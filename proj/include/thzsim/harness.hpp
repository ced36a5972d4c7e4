#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "thzsim/channel.hpp"
#include "thzsim/dyngnn.hpp"
#include "thzsim/scenario.hpp"
#include "thzsim/solvers.hpp"

namespace thz {

struct SplitSizes {
  int train = 300;
  int val = 100;
  int test = 100;
};

struct SweepConfig {
  std::string variable = "d_max";  // d_max (ms) | sinr_min_db | hops
  std::vector<double> values = {2, 3, 4, 5, 6};
  /// Relabel and retrain the GNNs at every point instead of reusing the
  /// default-requirement models.
  bool retrain = false;
};

/// Every knob of one experiment, read from a JSON config file.
struct ExperimentConfig {
  ChannelConfig channel;
  GeneratorConfig generator;
  ServiceRequirements requirements;
  SplitSizes splits;
  ModelConfig model;
  TrainConfig train;
  SweepConfig sweep;
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "out";
  int threads = 1;
  int bootstrap_resamples = 2000;
  /// Wall times make metrics files differ between runs; off by default.
  bool record_wall_time = false;
  bool retrain_head = false;
  std::filesystem::path base_model;  // checkpoint reused by retrain_head

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Applies THZ_OUT_DIR and THZ_THREADS when set.
void apply_env_overrides(ExperimentConfig& c);
/// Propagates the top-level seed into the generator, model and training seeds.
void apply_seed(ExperimentConfig& c, std::uint64_t seed);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
/// written by index so the outcome does not depend on scheduling.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

// ----- metrics --------------------------------------------------------------

inline constexpr const char* kMetricsSchema = "thz-metrics-v1";
inline constexpr const char* kSweepSchema = "thz-sweep-v1";

struct MetricsRow {
  std::string method;
  std::uint64_t topology_id = 0;
  int served = 0;
  int optimal = 0;
  double ratio = 0.0;
  double wall_time = 0.0;
};

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);
/// Fails loudly on a schema or header mismatch.
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

struct MeanCI {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap of the mean (95% by default).
MeanCI bootstrap_mean_ci(const std::vector<double>& xs, int resamples, std::uint64_t seed, double level = 0.95);

// ----- pipeline stages ------------------------------------------------------

struct LabeledSplit {
  std::vector<Topology> topologies;
  std::vector<LabeledTopology> labels;
};

std::vector<PreparedGraph> prepare_split(const LabeledSplit& s, const ChannelConfig& cfg, const ModelConfig& mc,
                                         int threads);
LabeledSplit label_split(const std::vector<Topology>& ts, const ChannelConfig& cfg, const ServiceRequirements& req,
                         int threads);

struct TrainedModels {
  DynGnnModel dynamic;
  DynGnnModel fixed;
  TrainHistory dynamic_history;
  TrainHistory fixed_history;
};

/// The dynamic model (architecture search + fine-tune) and the fixed SAGE-MEAN
/// + CONCAT baseline trained on the same data and schedule.
TrainedModels train_both(const ExperimentConfig& c, const std::vector<PreparedGraph>& train,
                         const std::vector<PreparedGraph>& val, bool log = false);

Architecture fixed_baseline_architecture(int hops);

/// Served counts of every method on every topology, in topology order.
std::vector<MetricsRow> evaluate_methods(const std::vector<Topology>& test, const std::vector<LabeledTopology>& labels,
                                         const DynGnnModel* dynamic, const DynGnnModel* fixed,
                                         const ChannelConfig& cfg, const ServiceRequirements& req, int threads,
                                         bool with_reformulated = true);

nlohmann::json explain_assignment(const Topology& topo, const Assignment& chosen, const std::string& method,
                                  const ChannelConfig& cfg, const ServiceRequirements& req);
/// For every request and every SPV: that link's SINR and the objective after
/// moving only that request to the SPV.
nlohmann::json explain_candidates(const Topology& topo, const Assignment& chosen, const ChannelConfig& cfg,
                                  const ServiceRequirements& req);

nlohmann::json channel_to_json(const ChannelConfig& cfg);
ChannelConfig channel_from_json(const nlohmann::json& j);

int cmd_generate(const ExperimentConfig& c);
int cmd_label(const ExperimentConfig& c);
int cmd_train(const ExperimentConfig& c);
int cmd_evaluate(const ExperimentConfig& c);
int cmd_sweep(const ExperimentConfig& c);
int cmd_explain(const ExperimentConfig& c, int topology_index, bool dump_links);

}  // namespace thz
